import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from fazekas_mil.model import AttentionConfig, EncoderConfig, init_bundle
from fazekas_mil.persistence import (
    MAGIC,
    FormatError,
    bundle_arrays,
    decode_arrays,
    encode_arrays,
    load_bundle,
    save_bundle,
)

names = st.text(min_size=1, max_size=12)
payload = arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4),
                 elements=st.floats(allow_nan=True, allow_infinity=True, width=64))


def test_bundle_roundtrip_is_bit_exact(tmp_path):
    b = init_bundle(4, EncoderConfig(32, (4, 8), 16), AttentionConfig(8, 2), 12)
    path = tmp_path / "m.fzkm"
    save_bundle(path, b)
    back = load_bundle(path)
    assert back.encoder == b.encoder and back.attention == b.attention
    assert back.classifier_hidden == 12 and back.n_classes == 4
    assert list(back.params) == list(b.params)
    for name, p in b.params.items():
        assert back.params[name].data.tobytes() == p.data.tobytes()
    save_bundle(tmp_path / "again.fzkm", back)
    assert (tmp_path / "again.fzkm").read_bytes() == path.read_bytes()


@given(st.dictionaries(names, payload, max_size=4))
def test_array_container_roundtrip(arrays_in):
    out = decode_arrays(encode_arrays(arrays_in))
    assert list(out) == list(arrays_in)
    for k, v in arrays_in.items():
        assert out[k].shape == v.shape and out[k].tobytes() == v.tobytes()


def test_header_layout():
    raw = encode_arrays({"a": np.array([1.0])})
    assert raw[:4] == MAGIC
    assert raw[4:8] == (1).to_bytes(4, "little")


def test_bad_magic_is_rejected(tmp_path):
    b = init_bundle(0)
    path = tmp_path / "m.fzkm"
    save_bundle(path, b)
    raw = bytearray(path.read_bytes())
    raw[0:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        load_bundle(path)


def test_unknown_version_is_rejected():
    raw = bytearray(encode_arrays({}))
    raw[4:8] = (9).to_bytes(4, "little")
    with pytest.raises(FormatError, match="version"):
        decode_arrays(bytes(raw))


@pytest.mark.parametrize("cut", [3, 10, 20, -1])
def test_truncation_is_rejected(cut):
    raw = encode_arrays({"w": np.arange(6.0).reshape(2, 3)})
    with pytest.raises(FormatError):
        decode_arrays(raw[:cut])


def test_trailing_bytes_are_rejected():
    with pytest.raises(FormatError, match="trailing"):
        decode_arrays(encode_arrays({"w": np.ones(2)}) + b"\0")


def test_bundle_with_wrong_shapes_is_rejected():
    arrays = bundle_arrays(init_bundle(0))
    arrays["attention.w1"] = np.zeros((3, 3))
    with pytest.raises(FormatError, match="attention.w1"):
        from fazekas_mil.persistence import arrays_to_bundle
        arrays_to_bundle(arrays)


def test_bundle_missing_metadata_is_rejected():
    from fazekas_mil.persistence import arrays_to_bundle
    arrays = bundle_arrays(init_bundle(0))
    del arrays["meta.channels"]
    with pytest.raises(FormatError, match="meta.channels"):
        arrays_to_bundle(arrays)
