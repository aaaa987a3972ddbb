"""Corruptions used as pretext tasks for reconstruction pretraining.

Each transform takes an 8-bit slice and a ``numpy.random.Generator`` (or an
integer seed) and returns a new slice; the caller trains a network to map the
corrupted slice back to the original.  Randomness only ever comes from the
generator that is passed in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import as_gray, quantize

Rect = tuple[int, int, int, int]  # (row0, col0, row1, col1), inclusive corners


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


# -- non-linear intensity -------------------------------------------------------


def bezier(points, steps: int = 1000) -> tuple[np.ndarray, np.ndarray]:
    """Sample a cubic Bezier curve with four ``(x, y)`` control points."""
    p = np.asarray(points, dtype=np.float64)
    if p.shape != (4, 2):
        raise ValueError(f"need four (x, y) control points, got shape {p.shape}")
    s = np.linspace(0.0, 1.0, steps)[:, None]
    curve = ((1 - s) ** 3 * p[0] + 3 * (1 - s) ** 2 * s * p[1]
             + 3 * (1 - s) * s ** 2 * p[2] + s ** 3 * p[3])
    return curve[:, 0], curve[:, 1]


def intensity_lut(points, steps: int = 1000) -> np.ndarray:
    """256-entry lookup table for the curve, read at each intensity v / 255."""
    xs, ys = bezier(points, steps)
    order = np.argsort(xs, kind="stable")
    y = np.interp(np.arange(256) / 255.0, xs[order], ys[order])
    return quantize(y * 255.0)


def random_curve_points(rng) -> np.ndarray:
    """Endpoints (0,0)->(1,1) or, with probability 1/2, (0,1)->(1,0); sorted interior points."""
    rng = _rng(rng)
    xs = np.sort(rng.random(2))
    ys = np.sort(rng.random(2))
    if rng.random() < 0.5:
        return np.array([[0.0, 0.0], [xs[0], ys[0]], [xs[1], ys[1]], [1.0, 1.0]])
    return np.array([[0.0, 1.0], [xs[0], ys[1]], [xs[1], ys[0]], [1.0, 0.0]])


def nonlinear_intensity(img, rng, points=None) -> np.ndarray:
    """Remap intensities through a monotone cubic Bezier curve."""
    a = as_gray(img)
    if points is None:
        points = random_curve_points(rng)
    return intensity_lut(points)[a]


# -- local pixel shuffling ------------------------------------------------------


def local_shuffle(img, rng, window: tuple[int, int] = (4, 4)) -> np.ndarray:
    """Permute pixels uniformly at random inside each non-overlapping window.

    ``window`` is ``(height, width)``; windows on the right and bottom edges may
    be smaller when the image side is not a multiple of the window.
    """
    a = as_gray(img)
    wh, ww = window
    if wh < 1 or ww < 1:
        raise ValueError(f"window sides must be >= 1, got {window}")
    rng = _rng(rng)
    h, w = a.shape
    rows, cols = np.indices((h, w))
    window_id = ((rows // wh) * ((w + ww - 1) // ww) + cols // ww).ravel()
    home = np.argsort(window_id, kind="stable")
    shuffled = np.lexsort((rng.random(h * w), window_id))
    out = np.empty(h * w, dtype=np.uint8)
    out[home] = a.ravel()[shuffled]
    return out.reshape(h, w)


# -- in/out-painting ------------------------------------------------------------


def random_rectangles(shape, rng, count: tuple[int, int] = (1, 3),
                      side_fraction: tuple[float, float] = (0.25, 0.5)) -> list[Rect]:
    """Draw between ``count[0]`` and ``count[1]`` axis-aligned boxes inside ``shape``."""
    rng = _rng(rng)
    h, w = shape
    k = int(rng.integers(count[0], count[1] + 1))
    rects = []
    for _ in range(k):
        rh = max(1, min(h, int(round(h * rng.uniform(*side_fraction)))))
        rw = max(1, min(w, int(round(w * rng.uniform(*side_fraction)))))
        r0 = int(rng.integers(0, h - rh + 1))
        c0 = int(rng.integers(0, w - rw + 1))
        rects.append((r0, c0, r0 + rh - 1, c0 + rw - 1))
    return rects


def rect_mask(shape, rects) -> np.ndarray:
    """Boolean union of inclusive rectangles."""
    h, w = shape
    mask = np.zeros(shape, dtype=bool)
    for r0, c0, r1, c1 in rects:
        if not (0 <= r0 <= r1 < h and 0 <= c0 <= c1 < w):
            raise ValueError(f"rectangle {(r0, c0, r1, c1)} is not inside an image of shape {shape}")
        mask[r0:r1 + 1, c0:c1 + 1] = True
    return mask


def _fill_noise(a: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = a.copy()
    out[mask] = rng.integers(0, 256, size=int(mask.sum()), dtype=np.uint8)
    return out


def in_paint(img, rng, rects=None, count=(1, 3), side_fraction=(0.25, 0.5)) -> np.ndarray:
    """Replace the pixels inside the rectangles with uniform noise."""
    a = as_gray(img)
    rng = _rng(rng)
    if rects is None:
        rects = random_rectangles(a.shape, rng, count, side_fraction)
    return _fill_noise(a, rect_mask(a.shape, rects), rng)


def out_paint(img, rng, rects=None, count=(1, 3), side_fraction=(0.25, 0.5)) -> np.ndarray:
    """Replace the pixels outside the union of the rectangles with uniform noise."""
    a = as_gray(img)
    rng = _rng(rng)
    if rects is None:
        rects = random_rectangles(a.shape, rng, count, side_fraction)
    return _fill_noise(a, ~rect_mask(a.shape, rects), rng)


# -- composition ------------------------------------------------------------------


@dataclass(frozen=True)
class PretextConfig:
    """Application probabilities and sizes for the pretext corruptions."""

    nonlinear_prob: float = 0.9
    shuffle_prob: float = 0.5
    shuffle_window: tuple[int, int] = (4, 4)
    paint_prob: float = 1.0
    inpaint_prob: float = 0.8  # otherwise out-paint
    rect_count: tuple[int, int] = (1, 3)
    rect_side_fraction: tuple[float, float] = (0.25, 0.5)

    def __post_init__(self):
        for name in ("nonlinear_prob", "shuffle_prob", "paint_prob", "inpaint_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if min(self.shuffle_window) < 1:
            raise ValueError(f"shuffle window sides must be >= 1, got {self.shuffle_window}")
        lo, hi = self.rect_count
        if not 0 <= lo <= hi:
            raise ValueError(f"bad rectangle count range {self.rect_count}")
        flo, fhi = self.rect_side_fraction
        if not 0.0 < flo <= fhi <= 1.0:
            raise ValueError(f"bad rectangle side fraction range {self.rect_side_fraction}")


def compose(img, config: PretextConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt a slice and return ``(corrupted, original)`` as a training pair.

    Intensity remapping and local shuffling are applied independently with
    their own probabilities; then, with probability ``paint_prob``, exactly one
    of in-painting (probability ``inpaint_prob``) or out-painting.
    """
    original = as_gray(img)
    rng = _rng(rng)
    out = original
    if rng.random() < config.nonlinear_prob:
        out = nonlinear_intensity(out, rng)
    if rng.random() < config.shuffle_prob:
        out = local_shuffle(out, rng, config.shuffle_window)
    if rng.random() < config.paint_prob:
        painter = in_paint if rng.random() < config.inpaint_prob else out_paint
        out = painter(out, rng, count=config.rect_count, side_fraction=config.rect_side_fraction)
    return out.copy(), original.copy()
