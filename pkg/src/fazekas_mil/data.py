"""Subjects, bags, augmentation, weighted sampling and the synthetic phantom set.

A *bag* holds a subject's K original slices followed by their K pre-processed
counterparts and carries one Fazekas grade (0-3) for the chosen biomarker.
The synthetic generator draws per-slice grades, labels each subject with the
maximum slice grade, and writes PNG slices plus a CSV manifest.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from .imaging import as_gray, preprocess_slice, quantize, read_image, write_image

BIOMARKERS = ("pvwm", "dwm")
N_GRADES = 4
SLICES_PER_SUBJECT = 7
MANIFEST_HEADER = ("subject_id", "slices", "pvwm", "dwm")
HIDDEN_GRADES_FILE = "slice_grades.csv"

# Relative class frequencies of the clinical cohort (counts out of 300 subjects).
PVWM_PROFILE = (172, 84, 29, 15)
DWM_PROFILE = (117, 149, 29, 5)


class DataError(Exception):
    """Base class for dataset problems."""


class MissingSliceError(DataError, FileNotFoundError):
    pass


class SliceShapeError(DataError):
    pass


class GradeError(DataError):
    pass


class ManifestError(DataError):
    pass


@dataclass(frozen=True)
class Subject:
    subject_id: str
    slice_paths: tuple[str, ...]
    pvwm_grade: int
    dwm_grade: int

    def __post_init__(self):
        if not self.slice_paths:
            raise ManifestError(f"subject {self.subject_id} has no slices")
        for name in ("pvwm_grade", "dwm_grade"):
            g = getattr(self, name)
            if not 0 <= g < N_GRADES:
                raise GradeError(f"subject {self.subject_id}: {name} {g} outside 0..3")

    def grade(self, biomarker: str) -> int:
        if biomarker not in BIOMARKERS:
            raise ValueError(f"unknown biomarker {biomarker!r}; expected one of {BIOMARKERS}")
        return self.pvwm_grade if biomarker == "pvwm" else self.dwm_grade


@dataclass
class Bag:
    subject_id: str
    instances: list[np.ndarray]
    grade: int
    n_original: int = field(default=0)

    def __post_init__(self):
        if not self.n_original:
            self.n_original = len(self.instances)

    def __len__(self) -> int:
        return len(self.instances)


# -- manifest -------------------------------------------------------------------


def read_manifest(path) -> list[Subject]:
    """Load ``subject_id,slices,pvwm,dwm`` rows; slice paths are resolved against the manifest folder."""
    path = Path(path)
    base = path.parent
    subjects, seen = [], set()
    try:
        handle = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot open manifest {path}: {exc}") from exc
    with handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ManifestError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ManifestError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            sid, slices, pv, dw = (x.strip() for x in row)
            if sid in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate subject_id {sid}")
            seen.add(sid)
            try:
                pv_grade, dw_grade = int(pv), int(dw)
            except ValueError:
                raise GradeError(f"{path}:{lineno}: grades must be integers") from None
            paths = tuple(str(base / p) for p in slices.split(";") if p)
            subjects.append(Subject(sid, paths, pv_grade, dw_grade))
    for s in subjects:
        for p in s.slice_paths:
            if not Path(p).is_file():
                raise MissingSliceError(f"subject {s.subject_id}: slice {p} not found")
    return subjects


def write_manifest(path, rows: Sequence[tuple[str, Sequence[str], int, int]]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for sid, paths, pv, dw in rows:
            writer.writerow([sid, ";".join(paths), pv, dw])


def read_hidden_grades(directory) -> dict[str, dict[str, list[int]]]:
    """Per-slice grades written next to a synthetic manifest."""
    out = {}
    with (Path(directory) / HIDDEN_GRADES_FILE).open(newline="", encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            out[row["subject_id"]] = {
                b: [int(g) for g in row[b].split(";")] for b in BIOMARKERS
            }
    return out


# -- bags -----------------------------------------------------------------------


def load_slices(subject: Subject) -> list[np.ndarray]:
    images = []
    for p in subject.slice_paths:
        if not Path(p).is_file():
            raise MissingSliceError(f"subject {subject.subject_id}: slice {p} not found")
        images.append(read_image(p))
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise SliceShapeError(f"subject {subject.subject_id}: slices differ in size {sorted(shapes)}")
    return images


def make_bag(subject_id: str, slices: Sequence[np.ndarray], grade: int, preprocess: bool = True) -> Bag:
    if not 0 <= grade < N_GRADES:
        raise GradeError(f"subject {subject_id}: grade {grade} outside 0..3")
    originals = [as_gray(s) for s in slices]
    if len({s.shape for s in originals}) != 1:
        raise SliceShapeError(f"subject {subject_id}: slices differ in size")
    instances = list(originals)
    if preprocess:
        instances += [preprocess_slice(s) for s in originals]
    return Bag(subject_id, instances, grade, len(originals))


def assemble_bag(subject: Subject, biomarker: str = "pvwm", preprocess: bool = True) -> Bag:
    """Originals followed by their pre-processed counterparts (2K instances)."""
    return make_bag(subject.subject_id, load_slices(subject), subject.grade(biomarker), preprocess)


def rotate_flip(images: np.ndarray, angle: float, flip: bool) -> np.ndarray:
    """Rotate a ``(K, H, W)`` stack by ``angle`` degrees (bilinear, zero fill), then mirror left-right."""
    out = images
    if angle != 0.0:
        rotated = ndimage.rotate(images.astype(np.float64), angle, axes=(2, 1), reshape=False,
                                 order=1, mode="constant", cval=0.0, prefilter=False)
        out = quantize(rotated)
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment(bag: Bag, rng, max_angle: float = 10.0, flip_prob: float = 0.5) -> Bag:
    """One random rotation in [-max_angle, max_angle] and one flip draw, shared by every instance."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    angle = float(rng.uniform(-max_angle, max_angle))
    flip = bool(rng.random() < flip_prob)
    stack = rotate_flip(np.stack(bag.instances), angle, flip)
    return Bag(bag.subject_id, list(stack), bag.grade, bag.n_original)


# -- weighted sampling --------------------------------------------------------------


def sampling_weights(grades: Sequence[int], classes: Sequence[int] | None = None) -> np.ndarray:
    """Per-subject probability proportional to 1 / (size of its grade class)."""
    grades = np.asarray(grades, dtype=np.int64)
    if grades.size == 0:
        raise ValueError("no subjects to sample from")
    counts = np.bincount(grades, minlength=N_GRADES)
    for c in classes or ():
        if counts[c] == 0:
            raise ValueError(f"class {c} has no subjects to sample")
    w = 1.0 / counts[grades]
    return w / w.sum()


def weighted_sampler(grades: Sequence[int], rng, classes: Sequence[int] | None = None,
                     chunk: int = 1024) -> Iterator[int]:
    """Endless stream of subject indices drawn with replacement by :func:`sampling_weights`."""
    p = sampling_weights(grades, classes)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    n = len(p)
    while True:
        yield from rng.choice(n, size=chunk, p=p).tolist()


# -- synthetic phantoms -------------------------------------------------------------


def quota_counts(n: int, profile: Sequence[float]) -> list[int]:
    """Split ``n`` into classes proportional to ``profile`` (largest-remainder rounding)."""
    p = np.asarray(profile, dtype=np.float64)
    exact = n * p / p.sum()
    base = np.floor(exact).astype(int)
    order = sorted(range(len(p)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[: n - base.sum()]:
        base[i] += 1
    return base.tolist()


def slice_grades_for(grade: int, rng: np.random.Generator, n_slices: int = SLICES_PER_SUBJECT) -> list[int]:
    """Per-slice grades whose maximum is ``grade``; 1-3 slices carry the top grade."""
    if grade == 0:
        return [0] * n_slices
    n_top = int(rng.choice([1, 2, 3], p=[0.5, 0.3, 0.2]))
    grades = []
    for _ in range(n_slices):
        if grade > 1 and rng.random() < 0.4:
            grades.append(int(rng.integers(1, grade)))
        else:
            grades.append(0)
    for k in rng.choice(n_slices, size=n_top, replace=False):
        grades[int(k)] = grade
    return grades


def subject_grade(slice_grades: Sequence[int]) -> int:
    """Bag label under the MIL rule: the largest instance grade."""
    return int(max(slice_grades))


@dataclass(frozen=True)
class Anatomy:
    center: tuple[float, float]
    brain_axes: tuple[float, float]
    ventricle_axes: tuple[float, float]
    ventricle_gap: float
    tissue: float
    csf: float
    lesion: float
    noise: float


def random_anatomy(rng: np.random.Generator, side: int) -> Anatomy:
    u = side / 64.0
    return Anatomy(
        center=(side / 2 + rng.uniform(-2, 2) * u, side / 2 + rng.uniform(-2, 2) * u),
        brain_axes=(rng.uniform(25, 28) * u, rng.uniform(20, 23) * u),
        ventricle_axes=(rng.uniform(7.5, 9.5) * u, rng.uniform(2.2, 3.0) * u),
        ventricle_gap=rng.uniform(4.0, 5.0) * u,
        tissue=rng.uniform(90, 110),
        csf=rng.uniform(30, 45),
        lesion=rng.uniform(200, 235),
        noise=rng.uniform(4, 7),
    )


def _ellipse(rows, cols, center, axes) -> np.ndarray:
    return ((rows - center[0]) / axes[0]) ** 2 + ((cols - center[1]) / axes[1]) ** 2 <= 1.0


def _blobs(rows, cols, centers, radii) -> np.ndarray:
    mask = np.zeros(rows.shape, dtype=bool)
    for (r, c), rad in zip(centers, radii):
        mask |= (rows - r) ** 2 + (cols - c) ** 2 <= rad ** 2
    return mask


def _pick(candidates: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    idx = rng.choice(len(candidates), size=min(k, len(candidates)), replace=False)
    return candidates[idx]


def phantom_slice(anatomy: Anatomy, slice_index: int, pvwm: int, dwm: int,
                  rng: np.random.Generator, side: int = 64, n_slices: int = SLICES_PER_SUBJECT) -> np.ndarray:
    """One FLAIR-like axial slice: dark background, grey brain, dark ventricles, bright lesions."""
    rows, cols = np.indices((side, side), dtype=np.float64)
    mid = (n_slices - 1) / 2
    depth = abs(slice_index - mid) / max(mid, 1.0)
    brain_axes = (anatomy.brain_axes[0] * (1 - 0.08 * depth), anatomy.brain_axes[1] * (1 - 0.08 * depth))
    vent_axes = (anatomy.ventricle_axes[0] * (1 - 0.35 * depth), anatomy.ventricle_axes[1] * (1 - 0.2 * depth))
    cy, cx = anatomy.center
    brain = _ellipse(rows, cols, anatomy.center, brain_axes)
    ventricles = (_ellipse(rows, cols, (cy, cx - anatomy.ventricle_gap), vent_axes)
                  | _ellipse(rows, cols, (cy, cx + anatomy.ventricle_gap), vent_axes))
    to_ventricle = ndimage.distance_transform_edt(~ventricles)
    to_edge = ndimage.distance_transform_edt(brain)

    img = np.where(brain, anatomy.tissue, 0.0)
    img[ventricles] = anatomy.csf
    lesion = np.zeros((side, side), dtype=bool)
    u = side / 64.0

    # periventricular lesions hug the ventricle wall
    rim = np.argwhere((to_ventricle > 0) & (to_ventricle <= 2.0 * u))
    if pvwm == 1:
        # thin caps over the ventricle tips
        tips = np.abs(rows - cy) >= rng.uniform(0.3, 0.5) * vent_axes[0]
        lesion |= (to_ventricle > 0) & (to_ventricle <= rng.uniform(1.5, 2.2) * u) & tips
    elif pvwm == 2:
        lesion |= (to_ventricle > 0) & (to_ventricle <= rng.uniform(2.0, 3.0) * u)
    elif pvwm == 3:
        width = rng.uniform(4.0, 5.5) * u
        lesion |= (to_ventricle > 0) & (to_ventricle <= width)
        centers = _pick(np.argwhere((to_ventricle > width - 1) & (to_ventricle <= width + 1)), 4, rng)
        lesion |= _blobs(rows, cols, centers, rng.uniform(2.5, 4.0, len(centers)) * u)

    # deep white matter lesions sit away from both the ventricles and the cortex
    deep = np.argwhere((to_ventricle > 7 * u) & (to_edge > 4 * u))
    if dwm == 1:
        centers = _pick(deep, int(rng.integers(1, 3)), rng)
        lesion |= _blobs(rows, cols, centers, rng.uniform(0.8, 1.3, len(centers)) * u)
    elif dwm == 2:
        centers = _pick(deep, int(rng.integers(4, 7)), rng)
        lesion |= _blobs(rows, cols, centers, rng.uniform(1.2, 2.0, len(centers)) * u)
    elif dwm == 3:
        centers = _pick(deep, int(rng.integers(2, 4)), rng)
        lesion |= _blobs(rows, cols, centers, rng.uniform(3.5, 5.0, len(centers)) * u)

    lesion &= brain & ~ventricles
    img[lesion] = anatomy.lesion
    img = ndimage.gaussian_filter(img, 0.6 * u)
    img += rng.normal(0.0, anatomy.noise, img.shape) * (img > 5)
    img += np.abs(rng.normal(0.0, 2.0, img.shape)) * ~brain
    return quantize(img)


@dataclass
class SyntheticSubject:
    subject_id: str
    slices: list[np.ndarray]
    pvwm_slices: list[int]
    dwm_slices: list[int]

    @property
    def pvwm_grade(self) -> int:
        return subject_grade(self.pvwm_slices)

    @property
    def dwm_grade(self) -> int:
        return subject_grade(self.dwm_slices)

    def grade(self, biomarker: str) -> int:
        return self.pvwm_grade if biomarker == "pvwm" else self.dwm_grade

    def slice_grades(self, biomarker: str) -> list[int]:
        return self.pvwm_slices if biomarker == "pvwm" else self.dwm_slices


def generate_subjects(n_subjects: int, seed: int, side: int = 64,
                      pvwm_profile: Sequence[float] = PVWM_PROFILE,
                      dwm_profile: Sequence[float] = DWM_PROFILE) -> list[SyntheticSubject]:
    """In-memory synthetic cohort; class sizes follow the profiles exactly (largest remainder)."""
    if n_subjects < 8:
        raise ValueError(f"need at least 8 subjects, got {n_subjects}")
    rng = np.random.default_rng(seed)
    pv_targets = np.repeat(np.arange(N_GRADES), quota_counts(n_subjects, pvwm_profile))
    dw_targets = np.repeat(np.arange(N_GRADES), quota_counts(n_subjects, dwm_profile))
    rng.shuffle(pv_targets)
    rng.shuffle(dw_targets)
    width = len(str(n_subjects - 1))
    subjects = []
    for i in range(n_subjects):
        pv = slice_grades_for(int(pv_targets[i]), rng)
        dw = slice_grades_for(int(dw_targets[i]), rng)
        anatomy = random_anatomy(rng, side)
        slices = [phantom_slice(anatomy, k, pv[k], dw[k], rng, side) for k in range(SLICES_PER_SUBJECT)]
        subjects.append(SyntheticSubject(f"S{i:0{width}d}", slices, pv, dw))
    return subjects


def synth_dataset(n_subjects: int, out_dir, seed: int, side: int = 64) -> list[Subject]:
    """Write a synthetic cohort as PNG slices plus ``manifest.csv`` and the hidden slice grades."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    cohort = generate_subjects(n_subjects, seed, side)
    rows = []
    with (out / HIDDEN_GRADES_FILE).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(("subject_id", "pvwm", "dwm"))
        for s in cohort:
            paths = []
            for k, img in enumerate(s.slices):
                rel = f"images/{s.subject_id}_{k}.png"
                write_image(out / rel, img)
                paths.append(rel)
            rows.append((s.subject_id, paths, s.pvwm_grade, s.dwm_grade))
            writer.writerow((s.subject_id, ";".join(map(str, s.pvwm_slices)), ";".join(map(str, s.dwm_slices))))
    write_manifest(out / "manifest.csv", rows)
    return read_manifest(out / "manifest.csv")
