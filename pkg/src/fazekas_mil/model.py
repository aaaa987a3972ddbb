"""Encoder-decoder for reconstruction pretraining and the attention MIL classifier.

The encoder is shared: pretraining fits encoder + decoder to reconstruct
clean slices from corrupted ones, fine-tuning reuses the encoder weights by
name and trains attention pooling plus a small classifier head on bags.

Shapes used throughout::

    slices  X : (K, 1, d, d)    one bag, intensities in [0, 1]
    features H : (K, u)
    weights  A : (r, K)         A = softmax_rows(W2 @ tanh(W1 @ H.T))
    pooled   M : (r, u)         M = A @ H
    probs      : (C,)
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, DenseArray

N_CLASSES = 4


@dataclass(frozen=True)
class EncoderConfig:
    input_side: int = 64
    channels: tuple[int, ...] = (8, 16, 32)
    features: int = 32

    def __post_init__(self):
        if not self.channels or any(c < 1 for c in self.channels):
            raise ContractViolation(f"encoder channels must be positive, got {self.channels}")
        if self.features < 1:
            raise ContractViolation(f"feature width must be >= 1, got {self.features}")
        if self.input_side < 1 or self.input_side % (2 ** len(self.channels)):
            raise ContractViolation(
                f"input side {self.input_side} is not divisible by 2**{len(self.channels)}")


@dataclass(frozen=True)
class AttentionConfig:
    hidden: int = 32
    heads: int = 1

    def __post_init__(self):
        if self.hidden < 1 or self.heads < 1:
            raise ContractViolation(f"attention sizes must be >= 1, got d_a={self.hidden}, r={self.heads}")


@dataclass
class ModelBundle:
    """Named parameters for encoder, decoder, attention and classifier."""

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    classifier_hidden: int = 32
    n_classes: int = N_CLASSES
    params: dict[str, DenseArray] = field(default_factory=dict)

    def parameters(self, prefix: str = "") -> list[DenseArray]:
        return [p for name, p in self.params.items() if name.startswith(prefix)]

    def named(self, prefix: str = "") -> dict[str, DenseArray]:
        return {name: p for name, p in self.params.items() if name.startswith(prefix)}

    def clone(self) -> "ModelBundle":
        out = copy.copy(self)
        out.params = {name: DenseArray(p.data.copy(), requires_grad=True) for name, p in self.params.items()}
        return out

    def load_encoder_from(self, other: "ModelBundle") -> None:
        """Copy every ``encoder.*`` array from ``other``; shapes must already agree."""
        for name, src in other.named("encoder.").items():
            dst = self.params.get(name)
            if dst is None or dst.shape != src.shape:
                have = None if dst is None else dst.shape
                raise ContractViolation(f"encoder parameter {name}: shape {src.shape} does not fit {have}")
            dst.data = src.data.copy()
            dst.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def parameter_shapes(
    encoder: EncoderConfig,
    attention: AttentionConfig,
    classifier_hidden: int,
    n_classes: int = N_CLASSES,
) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    chans = encoder.channels
    prev = 1
    for i, c in enumerate(chans, start=1):
        shapes[f"encoder.conv{i}.weight"] = (c, prev, 3, 3)
        shapes[f"encoder.conv{i}.bias"] = (c,)
        prev = c
    shapes["encoder.proj.weight"] = (chans[-1], encoder.features)
    shapes["encoder.proj.bias"] = (encoder.features,)
    # decoder stage i takes upsampled stage i+1 features concatenated with skip i
    for i in range(len(chans) - 1, 0, -1):
        shapes[f"decoder.conv{i}.weight"] = (chans[i - 1], chans[i] + chans[i - 1], 3, 3)
        shapes[f"decoder.conv{i}.bias"] = (chans[i - 1],)
    shapes["decoder.out.weight"] = (1, chans[0], 3, 3)
    shapes["decoder.out.bias"] = (1,)
    shapes["attention.w1"] = (attention.hidden, encoder.features)
    shapes["attention.w2"] = (attention.heads, attention.hidden)
    shapes["classifier.hidden.weight"] = (attention.heads * encoder.features, classifier_hidden)
    shapes["classifier.hidden.bias"] = (classifier_hidden,)
    shapes["classifier.out.weight"] = (classifier_hidden, n_classes)
    shapes["classifier.out.bias"] = (n_classes,)
    return shapes


def _fan_in(name: str, shape: tuple[int, ...], shapes: dict[str, tuple[int, ...]]) -> int:
    if name.endswith(".bias"):
        shape = shapes[name[: -len("bias")] + "weight"]
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    if name.startswith("attention."):
        return shape[1]
    return shape[0]


def _feeds_relu(name: str, shapes: dict[str, tuple[int, ...]]) -> bool:
    # He-style scaling keeps activations from shrinking through relu stacks.
    return name.endswith(".weight") and (len(shapes[name]) == 4 or name == "classifier.hidden.weight") \
        and name != "decoder.out.weight"


def init_bundle(
    seed: int,
    encoder: EncoderConfig | None = None,
    attention: AttentionConfig | None = None,
    classifier_hidden: int = 32,
    n_classes: int = N_CLASSES,
) -> ModelBundle:
    """Fresh parameters in a fixed name order.

    Weights feeding a relu are drawn from U(-sqrt(6/fan_in), sqrt(6/fan_in));
    everything else from U(-sqrt(1/fan_in), sqrt(1/fan_in)).
    """
    encoder = encoder or EncoderConfig()
    attention = attention or AttentionConfig()
    if classifier_hidden < 1:
        raise ContractViolation(f"classifier hidden width must be >= 1, got {classifier_hidden}")
    rng = np.random.default_rng(seed)
    shapes = parameter_shapes(encoder, attention, classifier_hidden, n_classes)
    params = {}
    for name, shape in shapes.items():
        gain = 6.0 if _feeds_relu(name, shapes) else 1.0
        bound = np.sqrt(gain / _fan_in(name, shape, shapes))
        params[name] = DenseArray(rng.uniform(-bound, bound, size=shape), requires_grad=True)
    return ModelBundle(encoder, attention, classifier_hidden, n_classes, params)


# -- encoder / decoder ------------------------------------------------------


def _check_slices(x: DenseArray, bundle: ModelBundle) -> None:
    d = bundle.encoder.input_side
    if x.data.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (d, d):
        raise ContractViolation(f"expected slices of shape (K, 1, {d}, {d}), got {x.shape}")


_MINUS_ONE = np.array(-1.0)


def encoder_stages(x, bundle: ModelBundle) -> list[DenseArray]:
    """Per-stage feature maps; stage i is ``(channels[i], K, d / 2**(i+1), d / 2**(i+1))``."""
    x = x if isinstance(x, DenseArray) else DenseArray(x)
    _check_slices(x, bundle)
    p = bundle.params
    stages = []
    k, _, d, _ = x.shape
    h = ad.reshape(x, (1, k, d, d))  # channel-major layout for conv2d
    # fixed centring onto [-1, 1]; plain [0, 1] inputs leave SGD stuck on a plateau
    h = ad.add(ad.scale(h, 2.0), _MINUS_ONE)
    for i in range(1, len(bundle.encoder.channels) + 1):
        h = ad.relu(ad.conv2d(h, p[f"encoder.conv{i}.weight"], p[f"encoder.conv{i}.bias"], stride=2))
        stages.append(h)
    return stages


def project(stages: list[DenseArray], bundle: ModelBundle) -> DenseArray:
    p = bundle.params
    return ad.add(ad.matmul(ad.global_avg_pool(stages[-1]), p["encoder.proj.weight"]), p["encoder.proj.bias"])


def encode(x, bundle: ModelBundle) -> DenseArray:
    """Feature matrix ``H`` of shape ``(K, u)``, one row per slice."""
    return project(encoder_stages(x, bundle), bundle)


def decode(stages: list[DenseArray], bundle: ModelBundle) -> DenseArray:
    """U-Net style decoder: nearest upsampling and skip concatenation back to ``(K, 1, d, d)``."""
    p = bundle.params
    n_stages = len(bundle.encoder.channels)
    if len(stages) != n_stages:
        raise ContractViolation(f"decoder needs {n_stages} encoder stages, got {len(stages)}")
    h = stages[-1]
    for i in range(n_stages - 1, 0, -1):
        h = ad.concat([ad.upsample2x_nearest(h), stages[i - 1]], axis=0)
        h = ad.relu(ad.conv2d(h, p[f"decoder.conv{i}.weight"], p[f"decoder.conv{i}.bias"]))
    out = ad.conv2d(ad.upsample2x_nearest(h), p["decoder.out.weight"], p["decoder.out.bias"])
    _, k, d, _ = out.shape
    return ad.reshape(out, (k, 1, d, d))


def reconstruct(x, bundle: ModelBundle) -> DenseArray:
    return decode(encoder_stages(x, bundle), bundle)


# -- MIL head -----------------------------------------------------------------


def attention(h: DenseArray, bundle: ModelBundle) -> DenseArray:
    p = bundle.params
    logits = ad.matmul(p["attention.w2"], ad.tanh(ad.matmul(p["attention.w1"], ad.transpose(h))))
    return ad.softmax_rows(logits)


def pool(a: DenseArray, h: DenseArray) -> DenseArray:
    if a.shape[1] != h.shape[0]:
        raise ContractViolation(f"pool: attention {a.shape} does not match features {h.shape}")
    return ad.matmul(a, h)


def classify_logits(m: DenseArray, bundle: ModelBundle) -> DenseArray:
    p = bundle.params
    flat = ad.reshape(m, (1, m.data.size))
    hidden = ad.relu(ad.add(ad.matmul(flat, p["classifier.hidden.weight"]), p["classifier.hidden.bias"]))
    out = ad.add(ad.matmul(hidden, p["classifier.out.weight"]), p["classifier.out.bias"])
    return ad.reshape(out, (bundle.n_classes,))


def classify(m: DenseArray, bundle: ModelBundle) -> DenseArray:
    logits = classify_logits(m, bundle)
    return ad.reshape(ad.softmax_rows(ad.reshape(logits, (1, bundle.n_classes))), (bundle.n_classes,))


@dataclass
class BagOutput:
    logits: DenseArray
    probs: DenseArray
    weights: DenseArray
    features: DenseArray


def slices_to_array(instances) -> DenseArray:
    """Stack 8-bit slices into a ``(K, 1, d, d)`` array scaled to [0, 1]."""
    stack = np.stack([np.asarray(img) for img in instances]).astype(np.float64) / 255.0
    return DenseArray(stack[:, None, :, :])


def bag_outputs(instances, bundle: ModelBundle) -> BagOutput:
    """Forward pass for one bag: a list of 8-bit slices or a ready ``(K, 1, d, d)`` array."""
    if isinstance(instances, np.ndarray) and instances.ndim == 4:
        instances = DenseArray(instances)
    n = instances.shape[0] if isinstance(instances, DenseArray) else len(instances)
    if n == 0:
        raise ContractViolation("bag is empty")
    x = instances if isinstance(instances, DenseArray) else slices_to_array(instances)
    h = encode(x, bundle)
    a = attention(h, bundle)
    logits = classify_logits(pool(a, h), bundle)
    probs = ad.reshape(ad.softmax_rows(ad.reshape(logits, (1, bundle.n_classes))), (bundle.n_classes,))
    return BagOutput(logits, probs, a, h)


def bag_forward(instances, bundle: ModelBundle) -> DenseArray:
    """Class probabilities for one bag of slices."""
    return bag_outputs(instances, bundle).probs


def bag_loss(probs: DenseArray, grade: int) -> DenseArray:
    """Negative log-probability of the true grade."""
    if not 0 <= grade < probs.shape[0]:
        raise ContractViolation(f"grade {grade} outside 0..{probs.shape[0] - 1}")
    picked = ad.reshape(probs, (1, probs.shape[0]))
    onehot = np.zeros((probs.shape[0], 1))
    onehot[grade, 0] = 1.0
    return ad.scale(ad.log(ad.reshape(ad.matmul(picked, onehot), ())), -1.0)
