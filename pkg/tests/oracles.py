"""Independent reference implementations used only by the tests.

Each oracle recomputes a quantity from its definition with the most direct
method available (exact rationals, explicit loops), sharing no code with the
package under test.
"""

from __future__ import annotations

from collections import Counter
from fractions import Fraction

import numpy as np


def otsu_bruteforce(pixels) -> tuple[int, Fraction]:
    """Smallest t minimising the weighted within-class variance, in exact arithmetic.

    Every candidate threshold is scored from the raw pixel list, with empty
    classes contributing zero.
    """
    values = [int(v) for v in np.asarray(pixels).ravel()]
    n = len(values)
    best_t, best = None, None
    for t in range(256):
        total = Fraction(0)
        for cls in ([v for v in values if v <= t], [v for v in values if v > t]):
            if not cls:
                continue
            mean = Fraction(sum(cls), len(cls))
            var = sum((Fraction(v) - mean) ** 2 for v in cls) / len(cls)
            total += Fraction(len(cls), n) * var
        if best is None or total < best:
            best_t, best = t, total
    return best_t, best


def otsu_from_counts(counts) -> tuple[int, Fraction]:
    """Same search as :func:`otsu_bruteforce` but driven by a 256-bin histogram (still exact)."""
    occupied = [(i, int(c)) for i, c in enumerate(counts) if c]
    n = sum(c for _, c in occupied)
    best_t, best = None, None
    for t in range(256):
        total = Fraction(0)
        for cls in ([(i, c) for i, c in occupied if i <= t], [(i, c) for i, c in occupied if i > t]):
            size = sum(c for _, c in cls)
            if size == 0:
                continue
            mean = Fraction(sum(i * c for i, c in cls), size)
            var = sum(c * (i - mean) ** 2 for i, c in cls) / size
            total += Fraction(size, n) * var
        if best is None or total < best:
            best_t, best = t, total
    return best_t, best


def otsu_direct(counts) -> int:
    """Two-pass per-class variances in float for every t; near-ties settled exactly.

    Cheap enough for thousands of images while computing each class's mean and
    variance from scratch rather than from running sums.
    """
    counts = np.asarray(counts, dtype=np.float64)
    levels = np.arange(256, dtype=np.float64)
    n = counts.sum()
    scores = np.empty(256)
    for t in range(256):
        total = 0.0
        for sel in (slice(0, t + 1), slice(t + 1, 256)):
            c = counts[sel]
            size = c.sum()
            if size == 0:
                continue
            mu = (c * levels[sel]).sum() / size
            total += (size / n) * ((c * (levels[sel] - mu) ** 2).sum() / size)
        scores[t] = total
    best = scores.min()
    near = np.flatnonzero(scores <= best + 1e-9 * max(best, 1.0))
    if len(near) == 1:
        return int(near[0])
    return otsu_from_counts(counts.astype(np.int64))[0]


def between_class_argmax(counts) -> int:
    """Smallest t maximising w0 * w1 * (mu0 - mu1)^2, exact; empty class scores 0."""
    counts = [int(c) for c in counts]
    n = sum(counts)
    best_t, best = None, None
    for t in range(256):
        n0 = sum(counts[: t + 1])
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            score = Fraction(0)
        else:
            mu0 = Fraction(sum(i * counts[i] for i in range(t + 1)), n0)
            mu1 = Fraction(sum(i * counts[i] for i in range(t + 1, 256)), n1)
            score = Fraction(n0, n) * Fraction(n1, n) * (mu0 - mu1) ** 2
        if best is None or score > best:
            best_t, best = t, score
    return best_t


def window_multisets(img, wh: int, ww: int) -> dict[tuple[int, int], Counter]:
    img = np.asarray(img)
    out = {}
    for r in range(0, img.shape[0], wh):
        for c in range(0, img.shape[1], ww):
            out[(r, c)] = Counter(img[r:r + wh, c:c + ww].ravel().tolist())
    return out


def bezier_point(points, s: float) -> tuple[float, float]:
    """De Casteljau evaluation of a cubic Bezier curve at parameter ``s``."""
    pts = [tuple(map(float, p)) for p in points]
    while len(pts) > 1:
        pts = [((1 - s) * a[0] + s * b[0], (1 - s) * a[1] + s * b[1]) for a, b in zip(pts, pts[1:])]
    return pts[0]


def naive_matmul(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def naive_conv2d(x, w, b, stride: int) -> np.ndarray:
    """Direct loop 3x3 convolution (cross-correlation), zero padding 1, layout (C, N, H, W)."""
    c, n, h, wd = x.shape
    o = w.shape[0]
    ho, wo = -(-h // stride), -(-wd // stride)
    pad = np.zeros((c, n, h + 2, wd + 2))
    pad[:, :, 1:-1, 1:-1] = x
    out = np.zeros((o, n, ho, wo))
    for oc in range(o):
        for s in range(n):
            for i in range(ho):
                for j in range(wo):
                    acc = b[oc]
                    for ic in range(c):
                        for di in range(3):
                            for dj in range(3):
                                acc += w[oc, ic, di, dj] * pad[ic, s, i * stride + di, j * stride + dj]
                    out[oc, s, i, j] = acc
    return out


def confusion_metrics(cm) -> dict[str, list[Fraction] | Fraction]:
    """One-vs-rest rates from their definitions, exact; zero denominators give 0."""
    cm = [[int(v) for v in row] for row in cm]
    k = len(cm)
    total = sum(map(sum, cm))

    def ratio(a, b):
        return Fraction(a, b) if b else Fraction(0)

    out = {"precision": [], "sensitivity": [], "specificity": [], "f1": []}
    for c in range(k):
        tp = cm[c][c]
        fp = sum(cm[r][c] for r in range(k)) - tp
        fn = sum(cm[c]) - tp
        tn = total - tp - fp - fn
        p, s = ratio(tp, tp + fp), ratio(tp, tp + fn)
        out["precision"].append(p)
        out["sensitivity"].append(s)
        out["specificity"].append(ratio(tn, tn + fp))
        out["f1"].append(ratio(2 * p * s, p + s) if p + s else Fraction(0))
    out["macro_f1"] = sum(out["f1"]) / k
    return out


# Twenty fixed confusion matrices: balanced, skewed, degenerate and empty-class cases.
FIXED_CONFUSIONS = [
    [[5, 0, 0, 0], [0, 5, 0, 0], [0, 0, 5, 0], [0, 0, 0, 5]],
    [[10, 2, 0, 0], [3, 7, 1, 0], [0, 1, 4, 1], [0, 0, 1, 2]],
    [[1, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]],
    [[0, 4, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]],
    [[50, 10, 2, 0], [12, 20, 3, 1], [1, 4, 6, 2], [0, 0, 2, 3]],
    [[0, 0, 0, 3], [0, 0, 3, 0], [0, 3, 0, 0], [3, 0, 0, 0]],
    [[2, 2, 2, 2], [2, 2, 2, 2], [2, 2, 2, 2], [2, 2, 2, 2]],
    [[7, 0, 0, 0], [7, 0, 0, 0], [7, 0, 0, 0], [7, 0, 0, 0]],
    [[86, 0, 0, 0], [0, 42, 0, 0], [0, 0, 14, 1], [0, 0, 0, 7]],
    [[30, 5, 0, 0], [8, 9, 0, 0], [0, 2, 3, 0], [0, 0, 0, 0]],
    [[0, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 9]],
    [[3, 1, 0, 0], [1, 3, 0, 0], [0, 0, 0, 0], [0, 0, 1, 0]],
    [[17, 3, 1, 1], [4, 8, 2, 0], [1, 1, 3, 1], [0, 0, 1, 1]],
    [[1, 1, 1, 1], [0, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]],
    [[100, 1, 0, 0], [1, 100, 0, 0], [0, 0, 100, 1], [0, 0, 1, 100]],
    [[0, 1, 0, 0], [1, 0, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]],
    [[12, 0, 0, 0], [5, 0, 0, 0], [2, 0, 0, 0], [1, 0, 0, 0]],
    [[4, 3, 2, 1], [1, 4, 3, 2], [2, 1, 4, 3], [3, 2, 1, 4]],
    [[9, 0, 1, 0], [0, 0, 0, 0], [2, 0, 5, 0], [0, 0, 0, 0]],
    [[172, 0, 0, 0], [0, 84, 0, 0], [0, 0, 29, 0], [0, 0, 0, 15]],
]
