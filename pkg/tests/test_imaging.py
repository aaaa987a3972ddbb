import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fazekas_mil.imaging import (
    ImageError,
    histogram,
    otsu_from_histogram,
    otsu_threshold,
    preprocess_slice,
    preprocess_steps,
    read_image,
    write_image,
    zero_below,
)
from oracles import between_class_argmax, otsu_bruteforce, otsu_from_counts

images = arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)))


def test_histogram_small_cases():
    h = histogram(np.array([[0, 0], [255, 255]], dtype=np.uint8))
    assert h[0] == 2 and h[255] == 2 and h.sum() == 4
    h = histogram(np.array([[7]], dtype=np.uint8))
    assert h[7] == 1 and h.sum() == 1


def test_histogram_recount(rng):
    img = rng.integers(0, 256, size=(64, 64), dtype=np.uint8)
    h = histogram(img)
    assert h.sum() == 4096
    recount = [0] * 256
    for v in img.ravel():
        recount[int(v)] += 1
    assert h.tolist() == recount


def test_otsu_two_level_ties_pick_smallest():
    res = otsu_threshold(np.array([[0, 0], [255, 255]], dtype=np.uint8))
    assert res.theta == 0
    assert res.intra_class_variance == 0.0


def test_otsu_constant_image_puts_everything_in_first_class():
    res = otsu_threshold(np.full((5, 7), 128, dtype=np.uint8))
    assert res.theta == 0
    assert res.class_weights == (0.0, 1.0)
    assert res.intra_class_variance == 0.0


def test_otsu_random_32_matches_bruteforce(rng):
    img = rng.integers(0, 256, size=(32, 32), dtype=np.uint8)
    theta, best = otsu_bruteforce(img)
    res = otsu_threshold(img)
    assert res.theta == theta
    assert res.intra_class_variance == pytest.approx(float(best), rel=1e-12, abs=1e-12)


@settings(max_examples=25)
@given(images)
def test_otsu_matches_exact_search(img):
    theta, best = otsu_from_counts(histogram(img))
    res = otsu_threshold(img)
    assert res.theta == theta
    assert abs(res.intra_class_variance - float(best)) <= 1e-9 * max(1.0, float(best))


@given(images)
def test_otsu_result_invariants(img):
    res = otsu_threshold(img)
    assert abs(sum(res.class_weights) - 1.0) <= 1e-12
    w0, w1 = res.class_weights
    v0, v1 = res.class_variances
    assert abs(res.intra_class_variance - (w0 * v0 + w1 * v1)) <= 1e-9
    assert min(v0, v1) >= 0.0


@settings(max_examples=25)
@given(images)
def test_within_and_between_class_criteria_agree(img):
    assert otsu_threshold(img).theta == between_class_argmax(histogram(img))


def test_otsu_near_tie_resolved_exactly():
    # two thresholds whose scores differ only in the last float bits
    counts = np.zeros(256, dtype=np.int64)
    counts[[10, 11, 200, 201]] = [3, 3, 3, 3]
    t, _ = otsu_from_counts(counts)
    assert otsu_from_histogram(counts).theta == t


def test_otsu_rejects_bad_histograms():
    with pytest.raises(ImageError):
        otsu_from_histogram(np.zeros(256))
    with pytest.raises(ImageError):
        otsu_from_histogram(np.ones(10))


def test_zero_below_examples():
    img = np.array([[10, 200], [0, 255]], dtype=np.uint8)
    assert zero_below(img, 100).tolist() == [[0, 200], [0, 255]]
    assert not zero_below(img, 255).any()


@given(images, st.integers(0, 255))
def test_zero_below_idempotent_and_monotone(img, theta):
    once = zero_below(img, theta)
    assert np.array_equal(zero_below(once, theta), once)
    assert np.all(once <= img)


def test_zero_below_rejects_out_of_range():
    with pytest.raises(ImageError):
        zero_below(np.zeros((2, 2), dtype=np.uint8), 256)


def test_preprocess_all_zero():
    assert not preprocess_slice(np.zeros((8, 8), dtype=np.uint8)).any()


def _three_level_phantom():
    img = np.zeros((32, 32), dtype=np.uint8)
    rows, cols = np.indices(img.shape)
    r = np.hypot(rows - 16, cols - 16)
    img[r < 12] = 90
    img[r < 4] = 230
    return img


def test_preprocess_three_level_phantom_keeps_only_bright_blob():
    img = _three_level_phantom()
    out = preprocess_slice(img)
    assert np.array_equal(out, np.where(img == 230, 230, 0))


def test_full_image_rethresholding_stalls_on_three_levels():
    # Step 1 splits {0} from {90, 230}; afterwards the same split is optimal again,
    # so thresholding over the whole image (zeros included) never removes the ring.
    img = _three_level_phantom()
    s1, s2, s3 = preprocess_steps(img, ignore_removed=False)
    assert np.array_equal(s1, img)
    assert np.array_equal(s3, img)


def test_preprocess_steps_remove_background_then_tissue():
    img = _three_level_phantom()
    s1, s2, s3 = preprocess_steps(img)
    assert set(np.unique(s1)) == {0, 90, 230}  # background already 0
    assert set(np.unique(s2)) == {0, 230}
    assert np.array_equal(s2, s3)


def test_nonzero_only_rethresholding_differs_from_full_image():
    # Four intensity bands: the full-image variant stalls because the zeros created by
    # step 1 dominate the histogram, the nonzero variant keeps peeling bands off.
    img = np.repeat(np.array([0, 60, 120, 180, 240], dtype=np.uint8), [400, 300, 200, 60, 20])
    img = img.reshape(49, 20)
    full = preprocess_slice(img, ignore_removed=False)
    nonzero = preprocess_slice(img, ignore_removed=True)
    assert set(np.unique(nonzero)) <= {0, 180, 240}
    assert np.count_nonzero(nonzero) <= np.count_nonzero(full)


@given(images)
def test_preprocess_support_and_values(img):
    out = preprocess_slice(img)
    kept = out > 0
    assert np.all(img[kept] == out[kept])
    assert np.all(img[kept] > 0)


@given(images)
def test_imaging_is_pure(img):
    before = img.copy()
    a = preprocess_slice(img)
    b = preprocess_slice(img)
    assert np.array_equal(img, before)
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("suffix", [".png", ".pgm"])
def test_image_roundtrip(tmp_path, rng, suffix):
    img = rng.integers(0, 256, size=(9, 13), dtype=np.uint8)
    path = tmp_path / f"slice{suffix}"
    write_image(path, img)
    back = read_image(path)
    assert back.dtype == np.uint8 and np.array_equal(back, img)


def test_pgm_is_binary_p5(tmp_path):
    path = tmp_path / "x.pgm"
    write_image(path, np.zeros((2, 3), dtype=np.uint8))
    assert path.read_bytes().startswith(b"P5")


def test_read_rejects_colour(tmp_path):
    from PIL import Image

    path = tmp_path / "rgb.png"
    Image.new("RGB", (4, 4)).save(path)
    with pytest.raises(ImageError):
        read_image(path)


def test_invalid_arrays_rejected():
    with pytest.raises(ImageError):
        histogram(np.zeros((0, 3), dtype=np.uint8))
    with pytest.raises(ImageError):
        histogram(np.full((2, 2), 300))
    with pytest.raises(ImageError):
        histogram(np.zeros((2, 2, 2), dtype=np.uint8))
