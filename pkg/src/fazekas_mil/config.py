"""Flat ``key=value`` run configuration shared by every command."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .model import AttentionConfig, EncoderConfig
from .transforms import PretextConfig


class ConfigError(ValueError):
    pass


OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class Config:
    seed: int = 1
    biomarker: str = "pvwm"
    # architecture
    side: int = 64
    channels: tuple[int, ...] = (8, 16, 32)
    features: int = 32
    attention_hidden: int = 32
    attention_heads: int = 1
    classifier_hidden: int = 32
    # pretext corruptions
    nonlinear_prob: float = 0.9
    shuffle_prob: float = 0.5
    shuffle_window: int = 4
    paint_prob: float = 1.0
    inpaint_prob: float = 0.8
    rect_count_min: int = 1
    rect_count_max: int = 3
    rect_side_min: float = 0.25
    rect_side_max: float = 0.5
    # reconstruction pretraining
    ssl: bool = True
    pretrain_steps: int = 500
    pretrain_batch: int = 4
    pretrain_optimizer: str = "sgd"
    pretrain_lr: float = 0.01
    pretrain_momentum: float = 0.9
    # MIL fine-tuning
    preprocess: bool = True
    epochs: int = 30
    optimizer: str = "adam"
    lr: float = 0.001
    momentum: float = 0.9
    lr_schedule: str = "cosine"
    max_rotation: float = 10.0
    flip_prob: float = 0.5
    # evaluation protocol
    folds: int = 10
    runs: int = 1
    holdout_fraction: float = 0.1

    def __post_init__(self):
        problems = []

        def need(cond: bool, msg: str) -> None:
            if not cond:
                problems.append(msg)

        need(self.biomarker in ("pvwm", "dwm"), f"biomarker must be pvwm or dwm, got {self.biomarker!r}")
        for name in ("optimizer", "pretrain_optimizer"):
            need(getattr(self, name) in OPTIMIZERS, f"{name} must be one of {', '.join(OPTIMIZERS)}")
        need(self.lr_schedule in ("constant", "cosine"), "lr_schedule must be constant or cosine")
        need(self.side >= 8, "side must be >= 8")
        need(len(self.channels) >= 1 and min(self.channels) >= 1, "channels must be positive")
        need(self.side % (2 ** max(len(self.channels), 1)) == 0, "side must be divisible by 2**len(channels)")
        for name in ("features", "attention_hidden", "attention_heads", "classifier_hidden",
                     "shuffle_window", "pretrain_batch", "folds", "runs"):
            need(getattr(self, name) >= 1, f"{name} must be >= 1")
        need(self.folds >= 2, "folds must be >= 2")
        for name in ("nonlinear_prob", "shuffle_prob", "paint_prob", "inpaint_prob", "flip_prob"):
            need(0.0 <= getattr(self, name) <= 1.0, f"{name} must lie in [0, 1]")
        need(0 <= self.rect_count_min <= self.rect_count_max, "need 0 <= rect_count_min <= rect_count_max")
        need(0.0 < self.rect_side_min <= self.rect_side_max <= 1.0, "need 0 < rect_side_min <= rect_side_max <= 1")
        need(self.pretrain_steps >= 0 and self.epochs >= 0, "step and epoch budgets must be >= 0")
        need(self.pretrain_lr > 0 and self.lr > 0, "learning rates must be positive")
        need(0.0 <= self.pretrain_momentum < 1.0 and 0.0 <= self.momentum < 1.0, "momentum must lie in [0, 1)")
        need(0.0 <= self.max_rotation <= 180.0, "max_rotation must lie in [0, 180]")
        need(0.0 < self.holdout_fraction < 1.0, "holdout_fraction must lie in (0, 1)")
        if problems:
            raise ConfigError("; ".join(problems))

    # -- derived views ------------------------------------------------------

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.side, tuple(self.channels), self.features)

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.attention_hidden, self.attention_heads)

    @property
    def pretext(self) -> PretextConfig:
        return PretextConfig(
            nonlinear_prob=self.nonlinear_prob,
            shuffle_prob=self.shuffle_prob,
            shuffle_window=(self.shuffle_window, self.shuffle_window),
            paint_prob=self.paint_prob,
            inpaint_prob=self.inpaint_prob,
            rect_count=(self.rect_count_min, self.rect_count_max),
            rect_side_fraction=(self.rect_side_min, self.rect_side_max),
        )

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    # -- text form ----------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, tuple):
                v = ",".join(map(str, v))
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(Config)}


def _parse_value(name: str, raw: str):
    default = _FIELDS[name].default
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None


def parse_overrides(pairs: dict[str, str]) -> dict:
    unknown = sorted(set(pairs) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return {k: _parse_value(k, v) for k, v in pairs.items()}


def parse_config_text(text: str, base: Config | None = None) -> Config:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value
    return (base or Config()).replace(**parse_overrides(pairs))


def load_config(path, base: Config | None = None) -> Config:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), base)
