"""imas — instance-adaptive semi-supervised semantic segmentation, desk scale.

A from-scratch training engine built on a minimal reverse-mode autodiff
tensor (numpy storage, optional compiled convolution kernels): a small
encoder-decoder segmentation net trained as a student/teacher EMA pair,
with per-instance hardness estimation steering both the strength of strong
augmentations and the weighting of the consistency loss.
"""

__version__ = "0.1.0"

from . import errors  # noqa: F401
