import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fazekas_mil import autodiff as ad
from fazekas_mil.autodiff import ContractViolation, DenseArray
from fazekas_mil.gradcheck import check_composite
from fazekas_mil.model import (
    AttentionConfig,
    EncoderConfig,
    attention,
    bag_forward,
    bag_loss,
    bag_outputs,
    classify,
    decode,
    encode,
    encoder_stages,
    init_bundle,
    parameter_shapes,
    pool,
    reconstruct,
    slices_to_array,
)

SMALL = EncoderConfig(input_side=16, channels=(2, 3, 4), features=4)


@pytest.fixture(scope="module")
def bundle():
    return init_bundle(0)


def _slices(rng, k, d=64):
    return rng.uniform(0, 1, size=(k, 1, d, d))


def test_duplicate_slice_gives_duplicate_rows(bundle, rng):
    x = _slices(rng, 3)
    x[2] = x[1]
    h = encode(x, bundle).data
    assert h.shape == (3, 32)
    assert np.array_equal(h[1], h[2])


def test_permuting_slices_permutes_rows(bundle, rng):
    x = _slices(rng, 4)
    perm = np.array([2, 0, 3, 1])
    np.testing.assert_allclose(encode(x[perm], bundle).data, encode(x, bundle).data[perm], atol=1e-12)


def test_wrong_spatial_size_is_rejected(bundle):
    with pytest.raises(ContractViolation, match="64"):
        encode(np.zeros((1, 1, 32, 32)), bundle)


@pytest.mark.parametrize("d", [32, 64])
def test_reconstruction_has_input_shape(d, rng):
    b = init_bundle(1, EncoderConfig(input_side=d))
    x = _slices(rng, 2, d)
    out = reconstruct(x, b)
    assert out.shape == x.shape
    loss = ad.mse(out, x).item()
    assert np.isfinite(loss) and loss >= 0


def test_decoder_needs_every_stage(bundle, rng):
    stages = encoder_stages(_slices(rng, 1), bundle)
    with pytest.raises(ContractViolation):
        decode(stages[:-1], bundle)


def test_single_instance_attention_is_one(bundle, rng):
    h = DenseArray(rng.standard_normal((1, 32)))
    assert attention(h, bundle).data.tolist() == [[1.0]]


def test_zero_second_attention_layer_gives_uniform_weights(rng):
    b = init_bundle(2, attention=AttentionConfig(hidden=8, heads=3))
    b.params["attention.w2"].data[:] = 0.0
    a = attention(DenseArray(rng.standard_normal((5, 32))), b).data
    assert a.shape == (3, 5)
    np.testing.assert_allclose(a, 0.2, atol=1e-15)


def test_attention_hand_example():
    b = init_bundle(0, EncoderConfig(input_side=8, channels=(2,), features=2), AttentionConfig(hidden=2, heads=1))
    b.params["attention.w1"].data[:] = np.eye(2)
    b.params["attention.w2"].data[:] = [[1.0, 0.0]]
    a = attention(DenseArray(np.eye(2)), b).data
    t = np.tanh(1.0)  # 0.761594...; softmax of [t, 0] is [sigmoid(t), 1 - sigmoid(t)]
    np.testing.assert_allclose(a, [[0.681700, 0.318300]], atol=1e-6)
    np.testing.assert_allclose(a, [[np.exp(t) / (np.exp(t) + 1), 1 / (np.exp(t) + 1)]], atol=1e-15)


def test_pool_examples(rng):
    m = pool(DenseArray(np.array([[0.5, 0.5]])), DenseArray(np.array([[0.0, 2.0], [2.0, 0.0]]))).data
    assert m.tolist() == [[1.0, 1.0]]
    h = rng.standard_normal((4, 3))
    onehot = np.zeros((1, 4))
    onehot[0, 2] = 1.0
    assert np.array_equal(pool(DenseArray(onehot), DenseArray(h)).data[0], h[2])
    with pytest.raises(ContractViolation):
        pool(DenseArray(np.ones((1, 3))), DenseArray(h))


def test_classify_outputs_a_distribution(bundle, rng):
    p = classify(DenseArray(rng.standard_normal((1, 32))), bundle).data
    assert p.shape == (4,) and abs(p.sum() - 1) < 1e-12 and np.all((p > 0) & (p < 1))


def test_zeroed_classifier_is_uniform(rng):
    b = init_bundle(3)
    for name, p in b.named("classifier.").items():
        p.data[:] = 0.0
    p = classify(DenseArray(rng.standard_normal((1, 32))), b).data
    np.testing.assert_allclose(p, [0.25] * 4, atol=1e-15)


@settings(max_examples=15)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_bag_forward_is_permutation_invariant(seed, k):
    rng = np.random.default_rng(seed)
    b = init_bundle(seed % 1000, SMALL, AttentionConfig(hidden=3), 5)
    x = rng.uniform(0, 1, size=(k, 1, 16, 16))
    base = bag_forward(DenseArray(x), b).data
    perm = rng.permutation(k)
    out = bag_forward(DenseArray(x[perm]), b).data
    assert np.max(np.abs(out - base)) < 1e-12
    assert np.argmax(out) == np.argmax(base)


def test_duplicating_instances_halves_weights_and_keeps_pool(bundle, rng):
    x = _slices(rng, 3)
    once = bag_outputs(DenseArray(x), bundle)
    twice = bag_outputs(DenseArray(np.concatenate([x, x])), bundle)
    np.testing.assert_allclose(twice.weights.data[:, :3], once.weights.data / 2, atol=1e-12)
    m_once = pool(once.weights, once.features).data
    m_twice = pool(twice.weights, twice.features).data
    np.testing.assert_allclose(m_twice, m_once, atol=1e-12)
    np.testing.assert_allclose(twice.probs.data, once.probs.data, atol=1e-12)


def test_one_hot_prediction_has_negligible_loss():
    assert bag_loss(DenseArray(np.array([0.0, 1.0, 0.0, 0.0])), 1).item() < 1e-9


def test_bag_loss_is_negative_log_probability():
    p = np.array([0.1, 0.2, 0.3, 0.4])
    assert bag_loss(DenseArray(p), 2).item() == pytest.approx(-np.log(0.3), rel=1e-15)
    with pytest.raises(ContractViolation):
        bag_loss(DenseArray(p), 4)


def test_empty_bag_is_rejected(bundle):
    with pytest.raises(ContractViolation, match="empty"):
        bag_forward([], bundle)


def test_slices_to_array_scales_to_unit_interval():
    x = slices_to_array([np.full((4, 4), 255, np.uint8), np.zeros((4, 4), np.uint8)]).data
    assert x.shape == (2, 1, 4, 4) and x.max() == 1.0 and x.min() == 0.0


@pytest.mark.parametrize("seed", range(3))
def test_end_to_end_gradient_matches_central_differences(seed):
    r = check_composite(seed)
    assert r.error < 1e-5, r.errors


def test_init_is_seeded_and_shaped():
    a, b = init_bundle(5), init_bundle(5)
    shapes = parameter_shapes(EncoderConfig(), AttentionConfig(), 32)
    assert list(a.params) == list(shapes)
    for name in shapes:
        assert a.params[name].shape == shapes[name]
        assert a.params[name].data.tobytes() == b.params[name].data.tobytes()


def test_init_bounds():
    b = init_bundle(0)
    w = b.params["encoder.conv2.weight"].data
    assert np.abs(w).max() <= np.sqrt(6 / (8 * 9))
    w2 = b.params["attention.w2"].data
    assert np.abs(w2).max() <= np.sqrt(1 / 32)
    out = b.params["decoder.out.weight"].data
    assert np.abs(out).max() <= np.sqrt(1 / (8 * 9))


def test_load_encoder_copies_only_encoder(rng):
    a, b = init_bundle(0), init_bundle(1)
    a.load_encoder_from(b)
    for name in a.params:
        same = np.array_equal(a.params[name].data, b.params[name].data)
        assert same == name.startswith("encoder.")
    with pytest.raises(ContractViolation):
        init_bundle(0, SMALL).load_encoder_from(b)


def test_config_validation():
    with pytest.raises(ContractViolation):
        EncoderConfig(input_side=20)
    with pytest.raises(ContractViolation):
        AttentionConfig(hidden=0)
    with pytest.raises(ContractViolation):
        init_bundle(0, classifier_hidden=0)
