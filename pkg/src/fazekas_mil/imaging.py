"""8-bit grayscale images, Otsu threshold search and lesion pre-processing.

Images are plain 2-D ``uint8`` numpy arrays (rows x columns).  Every function
here is pure: inputs are never modified.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image

N_LEVELS = 256


class ImageError(ValueError):
    """Input is not a valid 8-bit grayscale image."""


def as_gray(img) -> np.ndarray:
    """Validate ``img`` and return it as a 2-D uint8 array (no copy when already one)."""
    a = np.asarray(img)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ImageError(f"expected a non-empty 2-D image, got shape {a.shape}")
    if a.dtype != np.uint8:
        if not np.issubdtype(a.dtype, np.integer) or a.min() < 0 or a.max() > 255:
            raise ImageError(f"pixel values must be integers in [0, 255] (dtype {a.dtype})")
        a = a.astype(np.uint8)
    return a


def quantize(values) -> np.ndarray:
    """Round real intensities in [0, 255] to the nearest 8-bit level."""
    return np.clip(np.rint(np.asarray(values, dtype=np.float64)), 0, 255).astype(np.uint8)


def histogram(img) -> np.ndarray:
    """Pixel count for each of the 256 intensity levels."""
    return np.bincount(as_gray(img).ravel(), minlength=N_LEVELS).astype(np.int64)


@dataclass(frozen=True)
class OtsuResult:
    theta: int
    intra_class_variance: float
    class_weights: tuple[float, float]
    class_means: tuple[float, float]
    class_variances: tuple[float, float]


def _class_stats(counts: np.ndarray, theta: int) -> OtsuResult:
    levels = np.arange(N_LEVELS, dtype=np.float64)
    total = counts.sum()
    weights, means, variances = [], [], []
    for sel in (slice(0, theta + 1), slice(theta + 1, N_LEVELS)):
        n = counts[sel]
        size = n.sum()
        if size == 0:
            weights.append(0.0)
            means.append(0.0)
            variances.append(0.0)
            continue
        mu = float((n * levels[sel]).sum() / size)
        weights.append(float(size / total))
        means.append(mu)
        variances.append(float((n * (levels[sel] - mu) ** 2).sum() / size))
    w0 = weights[0]
    weights[1] = 1.0 - w0 if weights[1] else 0.0
    if not weights[1]:
        weights[0] = 1.0
    intra = weights[0] * variances[0] + weights[1] * variances[1]
    return OtsuResult(theta, intra, (weights[0], weights[1]), (means[0], means[1]), (variances[0], variances[1]))


def otsu_from_histogram(counts) -> OtsuResult:
    """Otsu threshold of a 256-bin histogram.

    ``theta`` is the smallest level ``t`` minimising the weighted within-class
    variance of ``{0..t}`` versus ``{t+1..255}``.  An empty class contributes
    nothing to the sum.  Ties are settled with exact rational arithmetic.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if counts.shape != (N_LEVELS,) or counts.min() < 0 or counts.sum() == 0:
        raise ImageError("histogram must have 256 non-negative bins and at least one pixel")
    levels = np.arange(N_LEVELS, dtype=np.int64)
    n0 = np.cumsum(counts)
    s0 = np.cumsum(counts * levels)
    n_total, s_total = int(n0[-1]), int(s0[-1])
    n1, s1 = n_total - n0, s_total - s0

    # N * sigma_w^2(t) = sum(n_i i^2) - s0^2/n0 - s1^2/n1, so minimising sigma_w^2
    # means maximising the "explained" term below (empty classes add 0).
    with np.errstate(divide="ignore", invalid="ignore"):
        explained = np.where(n0 > 0, s0.astype(np.float64) ** 2 / n0, 0.0)
        explained += np.where(n1 > 0, s1.astype(np.float64) ** 2 / n1, 0.0)
    best = explained.max()
    candidates = np.flatnonzero(explained >= best * (1 - 1e-9))
    if len(candidates) > 1:
        def exact(t: int) -> Fraction:
            a, b = int(n0[t]), int(n1[t])
            val = Fraction(int(s0[t]) ** 2, a) if a else Fraction(0)
            return val + (Fraction(int(s1[t]) ** 2, b) if b else Fraction(0))

        scores = [exact(int(t)) for t in candidates]
        top = max(scores)
        theta = int(candidates[scores.index(top)])
    else:
        theta = int(candidates[0])
    return _class_stats(counts, theta)


def otsu_threshold(img, ignore_zeros: bool = False) -> OtsuResult:
    """Otsu threshold of an image.

    With ``ignore_zeros`` the search only sees non-zero pixels, i.e. the part of
    the image that earlier pre-processing steps left in place.  An image with no
    such pixels yields ``theta = 0``.
    """
    counts = histogram(img)
    if ignore_zeros:
        counts = counts.copy()
        counts[0] = 0
        if counts.sum() == 0:
            counts[0] = 1
    return otsu_from_histogram(counts)


def zero_below(img, theta: int) -> np.ndarray:
    """Set every pixel with intensity <= ``theta`` to 0."""
    a = as_gray(img)
    if not 0 <= theta <= 255:
        raise ImageError(f"threshold must lie in [0, 255], got {theta}")
    return np.where(a <= theta, 0, a).astype(np.uint8)


def preprocess_steps(img, steps: int = 3, ignore_removed: bool = True) -> list[np.ndarray]:
    """Intermediate images of the chained threshold-and-zero pipeline.

    Step 1 removes the background, step 2 the darker tissue, step 3 the
    remaining grey matter, leaving bright lesion candidates.  Each step
    thresholds the previous step's output.  With ``ignore_removed`` (default)
    steps after the first compute their threshold over surviving (non-zero)
    pixels only; otherwise the whole image, zeros included, is used.
    """
    out = as_gray(img)
    trail = []
    for k in range(steps):
        res = otsu_threshold(out, ignore_zeros=ignore_removed and k > 0)
        out = zero_below(out, res.theta)
        trail.append(out)
    return trail


def preprocess_slice(img, ignore_removed: bool = True) -> np.ndarray:
    return preprocess_steps(img, 3, ignore_removed)[-1]


# -- file I/O -----------------------------------------------------------------


def read_image(path) -> np.ndarray:
    """Read an 8-bit grayscale PNG or binary PGM."""
    with Image.open(path) as im:
        if im.mode != "L":
            raise ImageError(f"{path}: not an 8-bit grayscale image (mode {im.mode})")
        return as_gray(np.array(im))


def write_image(path, img) -> None:
    """Write a PNG, or a binary P5 PGM when the suffix is ``.pgm``."""
    path = Path(path)
    im = Image.fromarray(as_gray(img))
    if path.suffix.lower() == ".pgm":
        im.save(path, format="PPM")
    else:
        im.save(path, format="PNG")
