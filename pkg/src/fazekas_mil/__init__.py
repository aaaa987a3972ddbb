"""Attention-based multiple instance learning for slice-level white-matter lesion grading.

Modules: ``imaging`` (Otsu pre-processing, image I/O), ``transforms`` (pretext
corruptions), ``autodiff`` (numpy reverse-mode engine), ``model``
(encoder-decoder and attention MIL head), ``persistence`` (binary bundle
container), ``data`` (manifests, bags, synthetic phantoms), ``evaluation``
(pretraining, fine-tuning, cross-validation, metrics) and ``cli``.
"""

__version__ = "0.1.0"
