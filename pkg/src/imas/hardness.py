"""Instance hardness from teacher-student disagreement.

The hardness of an unlabeled instance is

    gamma = 1 - [rho_s/2 * wIoU(p_s, p_t) + rho_t/2 * wIoU(p_t, p_s)]

where ``rho_s``/``rho_t`` are the fractions of pixels each model predicts
with confidence >= tau, and ``wIoU`` is a class-weighted IoU computed over
the confident pixels of its *first* argument (the source of the asymmetry;
the two orderings are averaged, so gamma itself is symmetric).  Everything
here operates on plain ``[K, H, W]`` probability arrays and is stateless.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DimensionError

__all__ = [
    "HardnessReport",
    "confidence_ratio",
    "weighted_iou",
    "evaluate_hardness",
    "sort_by_hardness",
]


@dataclass(frozen=True)
class HardnessReport:
    """Per-instance hardness with its ingredients, all in [0, 1]."""

    gamma: float
    rho_s: float
    rho_t: float
    wiou_st: float  # wIoU(p_s, p_t): student's confident set and weights
    wiou_ts: float  # wIoU(p_t, p_s): teacher's confident set and weights


def _check_tau(tau):
    if not (0.0 < tau <= 1.0):
        raise ArgumentError(f"tau must be in (0, 1], got {tau!r}")


def _check_probmap(p, name):
    p = np.asarray(p)
    if p.ndim != 3:
        raise DimensionError(f"{name} must be [K, H, W], got shape {p.shape}")
    return p


def confidence_ratio(p, tau):
    """Fraction of pixels whose max class probability is >= tau."""
    p = _check_probmap(p, "p")
    _check_tau(tau)
    return float(np.count_nonzero(p.max(axis=0) >= tau)) / (p.shape[1] * p.shape[2])


def weighted_iou(z1, z2, tau):
    """Class-weighted IoU of argmax maps over z1's confident pixels.

    Omega is the set of pixels where max(z1) >= tau.  Per-class IoU is
    computed between the argmax maps of z1 and z2 restricted to Omega,
    for the classes present in z1's argmax there; each class is weighted
    by normalized inverse frequency so rare classes count more.  Returns
    0.0 when Omega is empty.  Not commutative: both the mask and the
    weights come from the first argument.
    """
    z1 = _check_probmap(z1, "z1")
    z2 = _check_probmap(z2, "z2")
    if z1.shape != z2.shape:
        raise DimensionError(f"shape mismatch: {z1.shape} vs {z2.shape}")
    _check_tau(tau)

    omega = z1.max(axis=0) >= tau
    if not omega.any():
        return 0.0
    a = z1.argmax(axis=0)[omega]
    b = z2.argmax(axis=0)[omega]

    classes, counts = np.unique(a, return_counts=True)
    inv = 1.0 / counts.astype(np.float64)
    ious = np.empty(len(classes), dtype=np.float64)
    for i, c in enumerate(classes):
        in_a = a == c
        in_b = b == c
        inter = np.count_nonzero(in_a & in_b)
        union = np.count_nonzero(in_a | in_b)  # >= counts[i] > 0
        ious[i] = inter / union
    # sum(inv * iou) / sum(inv) == sum(w * iou) with w the normalized
    # weights, but stays exactly 1.0 under perfect agreement
    return float((inv * ious).sum() / inv.sum())


def evaluate_hardness(p_t, p_s, tau):
    """Score one instance's hardness from teacher/teacher-student maps.

    Returns a :class:`HardnessReport`; ``gamma`` is clamped to [0, 1]
    against float round-off, though each term already lies there.
    """
    rho_s = confidence_ratio(p_s, tau)
    rho_t = confidence_ratio(p_t, tau)
    wiou_st = weighted_iou(p_s, p_t, tau)
    wiou_ts = weighted_iou(p_t, p_s, tau)
    gamma = 1.0 - (rho_s / 2.0 * wiou_st + rho_t / 2.0 * wiou_ts)
    gamma = min(1.0, max(0.0, gamma))
    return HardnessReport(gamma, rho_s, rho_t, wiou_st, wiou_ts)


def sort_by_hardness(batch):
    """Stable (ascending, descending) index orders over a report batch.

    Ties break by original batch index in both directions, so equal-gamma
    runs keep their batch order.
    """
    if not batch:
        raise ArgumentError("cannot sort an empty batch")
    idx = range(len(batch))
    ascending = sorted(idx, key=lambda i: (batch[i].gamma, i))
    descending = sorted(idx, key=lambda i: (-batch[i].gamma, i))
    return ascending, descending
