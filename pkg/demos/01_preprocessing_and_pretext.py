"""
Thresholding phantom slices and corrupting them for pretraining
================================================================

Walks one synthetic FLAIR-like slice through the three rounds of Otsu
thresholding, then through each corruption used to pretrain the encoder.
Images land in ``demo_out/01`` (or the directory given as the first argument).
"""

import sys
from pathlib import Path

import numpy as np

from fazekas_mil.data import generate_subjects
from fazekas_mil.imaging import otsu_threshold, preprocess_steps, write_image
from fazekas_mil import transforms as tf

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "01"
out.mkdir(parents=True, exist_ok=True)

# %%
# A small cohort; pick the subject with the heaviest periventricular burden
# and its worst slice.
cohort = generate_subjects(12, seed=4)
subject = max(cohort, key=lambda s: (s.pvwm_grade, sum(s.pvwm_slices)))
k = int(np.argmax(subject.pvwm_slices))
img = subject.slices[k]
print(f"{subject.subject_id}: grade {subject.pvwm_grade}, slice {k}, per-slice grades {subject.pvwm_slices}")
write_image(out / "slice.png", img)

# %%
# Each round thresholds what the previous round kept.  The first cut removes
# background, the second the grey tissue, the third keeps only the brightest
# structures.  Zeros left by earlier rounds are not counted again.
steps = preprocess_steps(img)
for i, step in enumerate(steps, start=1):
    print(f"step {i}: {np.count_nonzero(step):5d} pixels survive")
    write_image(out / f"step{i}.png", step)

res = otsu_threshold(img)
print(f"first threshold {res.theta}, class weights {tuple(round(w, 3) for w in res.class_weights)}")

# %%
# Counting the removed zeros again puts the threshold back between background
# and tissue, so the later rounds remove nothing new.
full = preprocess_steps(img, ignore_removed=False)
print("re-counting zeros instead (the later rounds stall):", [int(np.count_nonzero(s)) for s in full], "pixels per step")

# %%
# The four pretext corruptions, each from its own seed.  The network learns
# to map the corrupted image back to the original.
rng = np.random.default_rng(0)
write_image(out / "nonlinear.png", tf.nonlinear_intensity(img, rng))
write_image(out / "shuffle.png", tf.local_shuffle(img, rng, (8, 8)))
write_image(out / "inpaint.png", tf.in_paint(img, rng))
write_image(out / "outpaint.png", tf.out_paint(img, rng))

corrupted, original = tf.compose(img, tf.PretextConfig(), 11)
write_image(out / "composed.png", corrupted)
print("composed corruption changed", int(np.count_nonzero(corrupted != original)), "of", img.size, "pixels")
print("wrote", sorted(p.name for p in out.glob("*.png")))
