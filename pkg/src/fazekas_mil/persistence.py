"""Versioned binary container for named float64 arrays and model bundles.

Layout (all integers little-endian u32)::

    b"FZKM" | version | count | count x (name_len | utf-8 name | rank | dims... | f64 LE payload)

Bundle architecture is stored alongside the weights as small ``meta.*``
arrays, so a file is self-describing.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import DenseArray
from .model import AttentionConfig, EncoderConfig, ModelBundle, parameter_shapes

MAGIC = b"FZKM"
VERSION = 1
_U32 = struct.Struct("<I")
_META = "meta."


class FormatError(ValueError):
    """Bytes are not a container this version understands (bad magic, version or layout)."""


def encode_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, _U32.pack(VERSION), _U32.pack(len(arrays))]
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        chunks.append(_U32.pack(len(raw)))
        chunks.append(raw)
        chunks.append(_U32.pack(a.ndim))
        chunks.extend(_U32.pack(d) for d in a.shape)
        chunks.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated container: need {n} bytes at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def decode_arrays(data: bytes) -> dict[str, np.ndarray]:
    r = _Reader(data)
    if bytes(r.take(4)) != MAGIC:
        raise FormatError("not a model container (bad magic bytes)")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported container version {version} (expected {VERSION})")
    out: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        try:
            name = bytes(r.take(r.u32())).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("array name is not valid UTF-8") from exc
        if name in out:
            raise FormatError(f"duplicate array name {name!r}")
        shape = tuple(r.u32() for _ in range(r.u32()))
        n = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes after the last array")
    return out


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_arrays(arrays))


def load_arrays(path) -> dict[str, np.ndarray]:
    return decode_arrays(Path(path).read_bytes())


# -- bundles ------------------------------------------------------------------


def bundle_arrays(bundle: ModelBundle) -> dict[str, np.ndarray]:
    meta = {
        "input_side": [bundle.encoder.input_side],
        "channels": list(bundle.encoder.channels),
        "features": [bundle.encoder.features],
        "attention_hidden": [bundle.attention.hidden],
        "attention_heads": [bundle.attention.heads],
        "classifier_hidden": [bundle.classifier_hidden],
        "n_classes": [bundle.n_classes],
    }
    arrays = {_META + k: np.asarray(v, dtype=np.float64) for k, v in meta.items()}
    arrays.update({name: p.data for name, p in bundle.params.items()})
    return arrays


def _meta_int(arrays, key: str) -> list[int]:
    try:
        vals = arrays[_META + key].ravel()
    except KeyError:
        raise FormatError(f"bundle is missing {_META + key}") from None
    if vals.size == 0 or np.any(vals != np.round(vals)):
        raise FormatError(f"{_META + key} must hold integers")
    return [int(v) for v in vals]


def arrays_to_bundle(arrays: dict[str, np.ndarray]) -> ModelBundle:
    try:
        encoder = EncoderConfig(_meta_int(arrays, "input_side")[0], tuple(_meta_int(arrays, "channels")),
                                _meta_int(arrays, "features")[0])
        attention = AttentionConfig(_meta_int(arrays, "attention_hidden")[0], _meta_int(arrays, "attention_heads")[0])
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"bundle metadata is inconsistent: {exc}") from exc
    hidden = _meta_int(arrays, "classifier_hidden")[0]
    n_classes = _meta_int(arrays, "n_classes")[0]
    shapes = parameter_shapes(encoder, attention, hidden, n_classes)
    weights = {k: v for k, v in arrays.items() if not k.startswith(_META)}
    missing = sorted(set(shapes) - set(weights))
    extra = sorted(set(weights) - set(shapes))
    if missing or extra:
        raise FormatError(f"parameter names do not match the architecture (missing {missing}, unexpected {extra})")
    params = {}
    for name, shape in shapes.items():
        if weights[name].shape != shape:
            raise FormatError(f"{name}: stored shape {weights[name].shape}, architecture needs {shape}")
        params[name] = DenseArray(weights[name].copy(), requires_grad=True)
    return ModelBundle(encoder, attention, hidden, n_classes, params)


def save_bundle(path, bundle: ModelBundle) -> None:
    save_arrays(path, bundle_arrays(bundle))


def load_bundle(path) -> ModelBundle:
    return arrays_to_bundle(load_arrays(path))
