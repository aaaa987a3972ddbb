"""Subject-level splits, training loops and the grading metrics.

Everything here is deterministic given the inputs, the :class:`Config` and a
seed.  Training streams record the subject ids they touched so that leakage
between training and validation/test subjects can be audited afterwards.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .config import Config
from .data import N_GRADES, Bag, augment, weighted_sampler
from .model import ModelBundle, bag_outputs, init_bundle, reconstruct, slices_to_array
from .transforms import compose

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


# -- metrics ------------------------------------------------------------------------


@dataclass
class EvalReport:
    confusion: np.ndarray  # rows: true grade, columns: predicted grade
    precision: np.ndarray
    sensitivity: np.ndarray
    specificity: np.ndarray
    f1: np.ndarray
    macro_f1: float

    @property
    def n_subjects(self) -> int:
        return int(self.confusion.sum())

    def relative_frequency(self) -> np.ndarray:
        return relative_frequencies(self.confusion.sum(axis=1))

    def lines(self) -> list[str]:
        out = [f"macro_f1={self.macro_f1:.6f}", f"subjects={self.n_subjects}"]
        freq = self.relative_frequency()
        for c in range(len(self.f1)):
            out += [
                f"class{c}.relative_frequency={freq[c]:.6f}",
                f"class{c}.precision={self.precision[c]:.6f}",
                f"class{c}.sensitivity={self.sensitivity[c]:.6f}",
                f"class{c}.specificity={self.specificity[c]:.6f}",
                f"class{c}.f1={self.f1[c]:.6f}",
            ]
        for i, row in enumerate(self.confusion):
            out.append(f"confusion.{i}={','.join(str(int(v)) for v in row)}")
        return out

    def table(self) -> str:
        freq = self.relative_frequency()
        rows = ["grade  rel.freq  precision  sensitivity  specificity      f1"]
        for c in range(len(self.f1)):
            rows.append(f"{c:>5}  {100 * freq[c]:7.2f}%  {self.precision[c]:9.3f}  {self.sensitivity[c]:11.3f}"
                        f"  {self.specificity[c]:11.3f}  {self.f1[c]:6.3f}")
        rows.append(f"macro-averaged F1: {self.macro_f1:.4f}")
        return "\n".join(rows)


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def metrics(confusion) -> EvalReport:
    """One-vs-rest precision, sensitivity, specificity and F1 from a confusion matrix.

    Any rate whose denominator is zero is reported as 0.
    """
    cm = np.asarray(confusion, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.sum() == 0 or cm.min() < 0:
        raise ValueError(f"need a non-empty square confusion matrix of counts, got {cm.tolist()}")
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = cm.sum() - tp - fp - fn
    precision = _ratio(tp, tp + fp)
    sensitivity = _ratio(tp, tp + fn)
    specificity = _ratio(tn, tn + fp)
    f1 = _ratio(2 * precision * sensitivity, precision + sensitivity)
    return EvalReport(cm, precision, sensitivity, specificity, f1, float(f1.mean()))


def relative_frequencies(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    return counts / counts.sum()


def confusion_matrix(truth: Sequence[int], predicted: Sequence[int], n_classes: int = N_GRADES) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(truth, dtype=np.int64), np.asarray(predicted, dtype=np.int64)), 1)
    return cm


# -- splitting ------------------------------------------------------------------------


@dataclass
class FoldPlan:
    folds: dict[str, int]
    holdout: frozenset[str]
    n_folds: int
    notes: list[str] = field(default_factory=list)

    def validation(self, fold: int) -> list[str]:
        return [s for s, f in self.folds.items() if f == fold]

    def training(self, fold: int) -> list[str]:
        return [s for s, f in self.folds.items() if f != fold]

    def pool(self) -> list[str]:
        return list(self.folds)


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    exact = total * weights / weights.sum()
    base = np.floor(exact).astype(int)
    order = sorted(range(len(weights)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[: total - base.sum()]:
        base[i] += 1
    return base


def split(subject_ids: Sequence[str], grades: Sequence[int], seed: int,
          n_folds: int = 10, holdout_fraction: float = 0.1, fold_seed: int | None = None) -> FoldPlan:
    """Stratified test holdout, then the rest dealt into ``n_folds`` stratified folds.

    The holdout depends on ``seed`` only; ``fold_seed`` (default ``seed``)
    reshuffles the fold assignment, so repeated runs share one test set.
    """
    ids = list(subject_ids)
    if len(ids) != len(set(ids)):
        raise ValueError("subject ids must be unique")
    if len(ids) < 20:
        raise ValueError(f"need at least 20 subjects for a holdout plus {n_folds} folds, got {len(ids)}")
    grades = np.asarray(grades, dtype=np.int64)
    rng = np.random.default_rng(seed)
    notes = []
    classes = sorted(set(grades.tolist()))
    by_class = {c: [ids[i] for i in np.flatnonzero(grades == c)] for c in classes}
    for c in classes:
        rng.shuffle(by_class[c])
        if len(by_class[c]) < n_folds:
            notes.append(f"grade {c} has {len(by_class[c])} subjects (< {n_folds}); fold stratification is best-effort")
    for msg in notes:
        warnings.warn(msg, stacklevel=2)

    n_holdout = int(math.floor(len(ids) * holdout_fraction + 0.5))
    quotas = _largest_remainder(n_holdout, np.array([len(by_class[c]) for c in classes], dtype=np.float64))
    holdout = set()
    remaining = []
    for c, q in zip(classes, quotas):
        holdout.update(by_class[c][:q])
        remaining.extend(by_class[c][q:])
    if fold_seed is not None and fold_seed != seed:
        fold_rng = np.random.default_rng([fold_seed, 5])
        grade_of = dict(zip(ids, grades.tolist()))
        remaining = [sid for c in classes for sid in fold_rng.permutation(
            [x for x in remaining if grade_of[x] == c]).tolist()]
    folds = {sid: i % n_folds for i, sid in enumerate(remaining)}
    return FoldPlan(folds, frozenset(holdout), n_folds, notes)


def write_plan(path, plan: FoldPlan) -> None:
    """``subject_id,role`` lines; role is ``test`` or a fold index."""
    lines = ["subject_id,role"]
    lines += [f"{sid},test" for sid in sorted(plan.holdout)]
    lines += [f"{sid},{f}" for sid, f in sorted(plan.folds.items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_plan(path) -> FoldPlan:
    folds, holdout = {}, set()
    rows = Path(path).read_text(encoding="utf-8").splitlines()
    if not rows or rows[0].strip() != "subject_id,role":
        raise ValueError(f"{path}: not a split file")
    for row in rows[1:]:
        if not row.strip():
            continue
        sid, role = (x.strip() for x in row.split(","))
        if role == "test":
            holdout.add(sid)
        else:
            folds[sid] = int(role)
    return FoldPlan(folds, frozenset(holdout), max(folds.values(), default=-1) + 1)


# -- pretraining ------------------------------------------------------------------------


@dataclass
class PretrainResult:
    bundle: ModelBundle
    losses: list[float]
    eval_before: float
    eval_after: float
    subject_ids: frozenset[str]


def _corrupted_batch(slices: Sequence[np.ndarray], picks, config: Config, rng) -> tuple[ad.DenseArray, ad.DenseArray]:
    pretext = config.pretext
    pairs = [compose(slices[i], pretext, rng) for i in picks]
    corrupted = slices_to_array([p[0] for p in pairs])
    original = slices_to_array([p[1] for p in pairs])
    return corrupted, original


def reconstruction_loss(bundle: ModelBundle, corrupted: ad.DenseArray, original: ad.DenseArray) -> ad.DenseArray:
    return ad.mse(reconstruct(corrupted, bundle), original)


def pretrain(slices: Sequence[np.ndarray], config: Config, seed: int,
             subject_ids: Sequence[str] = (), steps: int | None = None) -> PretrainResult:
    """Fit encoder + decoder to undo pretext corruptions of ``slices``.

    ``eval_before``/``eval_after`` are the loss on one fixed corrupted batch,
    measured before the first and after the last update.
    """
    steps = config.pretrain_steps if steps is None else steps
    if not slices:
        raise ValueError("pretraining needs at least one slice")
    bundle = init_bundle(seed, config.encoder, config.attention, config.classifier_hidden)
    params = bundle.parameters("encoder.") + bundle.parameters("decoder.")
    opt = make_optimizer(config.pretrain_optimizer, params, config.pretrain_lr, config.pretrain_momentum)
    rng = np.random.default_rng([seed, 1])
    probe_rng = np.random.default_rng([seed, 2])
    probe_picks = probe_rng.choice(len(slices), size=min(len(slices), max(config.pretrain_batch, 8)), replace=False)
    probe = _corrupted_batch(slices, probe_picks, config, probe_rng)

    def probe_loss() -> float:
        return float(ad.mse(reconstruct(probe[0], bundle).data, probe[1]).data)

    before = probe_loss()
    losses = []
    for step in range(steps):
        picks = rng.integers(0, len(slices), size=config.pretrain_batch)
        corrupted, original = _corrupted_batch(slices, picks, config, rng)
        loss = reconstruction_loss(bundle, corrupted, original)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericalError(f"pretraining loss became {value} at step {step}")
        loss.backward()
        opt.step()
        losses.append(value)
    after = probe_loss()
    log.debug("pretrain: %d steps, probe loss %.5f -> %.5f", steps, before, after)
    for p in bundle.params.values():
        p.zero_grad()
    return PretrainResult(bundle, losses, before, after, frozenset(subject_ids))


# -- MIL fine-tuning -----------------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    report: EvalReport
    truth: list[int]
    predicted: list[int]
    train_ids: frozenset[str]
    validation_ids: frozenset[str]
    bundle: ModelBundle | None = None


def make_optimizer(name: str, params, lr: float, momentum: float) -> ad.SGD:
    if name == "sgd":
        return ad.SGD(params, lr, momentum)
    if name == "adam":
        return ad.Adam(params, lr, momentum)
    raise ValueError(f"unknown optimizer {name!r}")


def learning_rate(base: float, schedule: str, step: int, total: int) -> float:
    """Step size for update ``step`` (0-based) of ``total``; cosine decays to 0 at the end."""
    if schedule == "constant":
        return base
    if schedule == "cosine":
        return base * 0.5 * (1.0 + math.cos(math.pi * (step + 1) / max(total, 1)))
    raise ValueError(f"unknown schedule {schedule!r}")


def predict(bundle: ModelBundle, bags: Sequence[Bag]) -> tuple[list[int], np.ndarray]:
    probs = np.array([bag_outputs(b.instances, bundle).probs.data for b in bags])
    return probs.argmax(axis=1).tolist(), probs


def fine_tune(train_bags: Sequence[Bag], config: Config, seed: int,
              pretrained: ModelBundle | None = None) -> tuple[ModelBundle, list[float], frozenset[str]]:
    """One augmented bag per update, drawn by class-balanced sampling.

    Returns the bundle, the per-step losses and the subjects that were drawn.
    """
    if not train_bags:
        raise ValueError("no training bags")
    bundle = init_bundle(seed, config.encoder, config.attention, config.classifier_hidden)
    if pretrained is not None:
        bundle.load_encoder_from(pretrained)
    params = bundle.parameters("encoder.") + bundle.parameters("attention.") + bundle.parameters("classifier.")
    opt = make_optimizer(config.optimizer, params, config.lr, config.momentum)
    rng = np.random.default_rng([seed, 3])
    stream = weighted_sampler([b.grade for b in train_bags], rng)
    seen = set()
    losses = []
    total = config.epochs * len(train_bags)
    for step in range(total):
        opt.lr = learning_rate(config.lr, config.lr_schedule, step, total)
        bag = train_bags[next(stream)]
        seen.add(bag.subject_id)
        bag = augment(bag, rng, config.max_rotation, config.flip_prob)
        out = bag_outputs(bag.instances, bundle)
        loss = ad.cross_entropy(out.logits, bag.grade)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericalError(f"fine-tuning loss became {value} at step {step}")
        loss.backward()
        opt.step()
        losses.append(value)
    return bundle, losses, frozenset(seen)


def train_fold(bags: dict[str, Bag], plan: FoldPlan, fold: int, config: Config, seed: int,
               pretrained: ModelBundle | None = None, keep_bundle: bool = False) -> FoldResult:
    """Fine-tune on every fold but ``fold`` and evaluate on ``fold``."""
    val_ids = plan.validation(fold)
    train_ids = plan.training(fold)
    if not val_ids or not train_ids:
        raise ValueError(f"fold {fold} leaves an empty training or validation set")
    bundle, _, seen = fine_tune([bags[s] for s in train_ids], config, seed, pretrained)
    val_bags = [bags[s] for s in val_ids]
    predicted, _ = predict(bundle, val_bags)
    truth = [b.grade for b in val_bags]
    report = metrics(confusion_matrix(truth, predicted))
    return FoldResult(fold, report, truth, predicted, seen, frozenset(val_ids), bundle if keep_bundle else None)


# -- cross-validation ----------------------------------------------------------------


@dataclass
class Variant:
    name: str
    preprocess: bool
    ssl: bool


ABLATIONS = (
    Variant("preprocess+ssl", True, True),
    Variant("ssl only", False, True),
    Variant("preprocess only", True, False),
    Variant("neither", False, False),
)


@dataclass
class CVResult:
    variant: str
    folds: list[FoldResult]
    pooled: EvalReport
    pretrain_ids: dict[int, frozenset[str]] = field(default_factory=dict)

    @property
    def fold_macro_f1(self) -> list[float]:
        return [f.report.macro_f1 for f in self.folds]


@dataclass
class RunSummary:
    variant: str
    runs: list[CVResult]

    @property
    def macro_f1(self) -> list[float]:
        return [r.pooled.macro_f1 for r in self.runs]

    @property
    def mean(self) -> float:
        return float(np.mean(self.macro_f1))

    @property
    def std(self) -> float:
        return float(np.std(self.macro_f1))


def _originals(bag: Bag) -> list[np.ndarray]:
    return bag.instances[: bag.n_original]


def _strip(bag: Bag) -> Bag:
    return Bag(bag.subject_id, _originals(bag), bag.grade, bag.n_original)


def _fold_job(args):
    fold, bags, plan, config, seed, variants = args
    train_ids = plan.training(fold)
    pretrained = None
    pre_ids = frozenset()
    if any(v.ssl for v in variants):
        slices = [s for sid in train_ids for s in _originals(bags[sid])]
        res = pretrain(slices, config, seed + 1000 * fold + 17, train_ids)
        pretrained, pre_ids = res.bundle, res.subject_ids
    out = {}
    plain = {sid: _strip(b) for sid, b in bags.items()}
    for v in variants:
        use = bags if v.preprocess else plain
        out[v.name] = train_fold(use, plan, fold, config, seed + 1000 * fold, pretrained if v.ssl else None)
    return fold, out, pre_ids


def cross_validate(bags: dict[str, Bag], plan: FoldPlan, config: Config, seed: int,
                   variants: Sequence[Variant] | None = None, parallel: int = 1) -> dict[str, CVResult]:
    """Run every fold of ``plan`` for each variant; bags must include the pre-processed half.

    Pretraining happens once per fold on that fold's training subjects and is
    shared by all variants that use it.  Variants with ``preprocess=False``
    drop the pre-processed instances from every bag.
    """
    if variants is None:
        variants = [Variant("configured", config.preprocess, config.ssl)]
    jobs = [(f, bags, plan, config, seed, list(variants)) for f in range(plan.n_folds)]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            done = list(pool.map(_fold_job, jobs))
    else:
        done = [_fold_job(j) for j in jobs]
    results = {}
    for v in variants:
        folds = [d[1][v.name] for d in sorted(done, key=lambda d: d[0])]
        truth = [t for f in folds for t in f.truth]
        pred = [p for f in folds for p in f.predicted]
        pre_ids = {d[0]: d[2] for d in done} if v.ssl else {}
        results[v.name] = CVResult(v.name, folds, metrics(confusion_matrix(truth, pred)), pre_ids)
    return results


def repeated_cv(bags: dict[str, Bag], config: Config, seed: int, variants: Sequence[Variant] | None = None,
                parallel: int = 1) -> tuple[list[FoldPlan], dict[str, RunSummary]]:
    """``config.runs`` cross-validation runs sharing one test holdout.

    Run ``r`` re-deals the folds with seed ``seed + r`` and trains with the same
    offset.  The headline number per run is the macro-F1 of the confusion matrix
    pooled over all validation folds.
    """
    ids = list(bags)
    grades = [bags[s].grade for s in ids]
    plans, per_variant = [], {}
    for r in range(config.runs):
        plan = split(ids, grades, seed, config.folds, config.holdout_fraction, fold_seed=seed + r)
        plans.append(plan)
        res = cross_validate(bags, plan, config, seed + r, variants, parallel)
        for name, cv in res.items():
            per_variant.setdefault(name, RunSummary(name, [])).runs.append(cv)
    return plans, per_variant


def fit_final(bags: dict[str, Bag], plan: FoldPlan, config: Config, seed: int,
              pretrained: ModelBundle | None = None) -> tuple[ModelBundle, EvalReport | None]:
    """Train on every non-test subject and score the test holdout (``None`` if it is empty)."""
    dev = plan.pool()
    use = bags if config.preprocess else {sid: _strip(b) for sid, b in bags.items()}
    if config.ssl and pretrained is None:
        slices = [s for sid in dev for s in _originals(bags[sid])]
        pretrained = pretrain(slices, config, seed + 17, dev).bundle
    bundle, _, _ = fine_tune([use[s] for s in dev], config, seed, pretrained if config.ssl else None)
    test = sorted(plan.holdout)
    if not test:
        return bundle, None
    predicted, _ = predict(bundle, [use[s] for s in test])
    return bundle, metrics(confusion_matrix([use[s].grade for s in test], predicted))


def leakage(results: dict[str, CVResult], plan: FoldPlan) -> list[str]:
    """Every subject id that crossed a train/validation or train/test boundary."""
    problems = []
    for name, res in results.items():
        for f in res.folds:
            for sid in sorted(f.train_ids & f.validation_ids):
                problems.append(f"{name} fold {f.fold}: {sid} trained and validated")
            for sid in sorted(f.train_ids & plan.holdout):
                problems.append(f"{name} fold {f.fold}: {sid} is a test subject")
            pre = res.pretrain_ids.get(f.fold, frozenset())
            for sid in sorted(pre & (f.validation_ids | plan.holdout)):
                problems.append(f"{name} fold {f.fold}: {sid} used for pretraining")
    return problems


# -- attention inspection -----------------------------------------------------------------


@dataclass
class AttentionReport:
    subject_id: str
    weights: np.ndarray  # (r, n_instances)
    n_original: int

    @property
    def top_instance(self) -> int:
        return int(self.weights.sum(axis=0).argmax())

    def slice_weights(self) -> np.ndarray:
        """Weight per original slice, adding each slice's pre-processed twin when present."""
        w = self.weights.sum(axis=0) / self.weights.shape[0]
        k = self.n_original
        out = w[:k].copy()
        extra = w[k:]
        out[: len(extra)] += extra
        return out

    @property
    def top_slice(self) -> int:
        return int(self.slice_weights().argmax())

    def lines(self) -> list[str]:
        rows = []
        for i in range(self.weights.shape[1]):
            kind = "original" if i < self.n_original else "preprocessed"
            src = i if i < self.n_original else i - self.n_original
            flag = " *" if i == self.top_instance else ""
            vals = ",".join(f"{v:.6f}" for v in self.weights[:, i])
            rows.append(f"{self.subject_id}\t{i}\t{kind}\t{src}\t{vals}{flag}")
        return rows


def attention_report(bundle: ModelBundle, bag: Bag) -> AttentionReport:
    out = bag_outputs(bag.instances, bundle)
    return AttentionReport(bag.subject_id, out.weights.data.copy(), bag.n_original)
