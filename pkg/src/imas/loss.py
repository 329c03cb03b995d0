"""Training objectives: supervised, standard-consistency, and adaptive.

All pixel losses are cross-entropy against hard argmax targets.  The
consistency losses mask pixels by teacher confidence but normalize by the
full pixel count H*W, so the loss scales with the confident fraction.  The
adaptive variant additionally weights each instance by its easiness
(1 - gamma), averaging an intensity branch and a CutMix branch.

Predictions enter as probability Tensors (graph-carrying); targets enter
as plain arrays (or are detached), so no gradient can reach the teacher or
the hardness scores.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DimensionError
from .tensor import Tensor, add, gather_class, log_clamped, scale_by, stack0, sum_all

__all__ = [
    "LossBreakdown",
    "AdaptiveStats",
    "supervised_loss",
    "standard_unsup_loss",
    "adaptive_unsup_loss",
    "total_loss",
    "make_breakdown",
]


@dataclass(frozen=True)
class LossBreakdown:
    l_x: float
    l_u: float
    total: float
    per_instance_weights: list
    confident_fraction_I: float
    confident_fraction_C: float


@dataclass(frozen=True)
class AdaptiveStats:
    """Side data from adaptive_unsup_loss, merged into a LossBreakdown."""

    per_instance_weights: list
    confident_fraction_I: float
    confident_fraction_C: float


def _check_tau(tau):
    if not (0.0 < tau <= 1.0):
        raise ArgumentError(f"tau must be in (0, 1], got {tau!r}")


def _batch_preds(preds):
    """Normalize predictions to one [B, K, H, W] graph tensor."""
    if isinstance(preds, Tensor):
        if preds.data.ndim != 4:
            raise DimensionError(
                f"batched predictions must be [B, K, H, W], got {preds.shape}")
        return preds
    seq = list(preds)
    if not seq:
        raise ArgumentError("empty prediction batch")
    for t in seq:
        if not isinstance(t, Tensor) or t.data.ndim != 3:
            raise DimensionError("per-instance predictions must be [K, H, W] tensors")
    try:
        return stack0(seq)
    except ValueError as e:
        raise DimensionError(str(e)) from None


def _batch_arrays(maps, ndim, what):
    """Normalize targets/labels to one [B, ...] plain array (detached)."""
    if isinstance(maps, Tensor):
        arr = maps.data
    elif isinstance(maps, np.ndarray):
        arr = maps
    else:
        seq = [m.data if isinstance(m, Tensor) else np.asarray(m) for m in maps]
        if not seq:
            raise ArgumentError(f"empty {what} batch")
        try:
            arr = np.stack(seq)
        except ValueError as e:
            raise DimensionError(f"{what}: {e}") from None
    if arr.ndim != ndim:
        raise DimensionError(f"{what} batch must have {ndim} dims, got {arr.ndim}")
    return arr


def supervised_loss(preds, labels, *, ignore=255):
    """Batch mean of per-image mean pixel cross-entropy.

    Ignore-valued pixels leave both the numerator and the pixel count; an
    image with nothing but ignore pixels contributes 0 while the batch
    divisor stays B.
    """
    p = _batch_preds(preds)
    lab = _batch_arrays(labels, 3, "labels")
    b, k, h, w = p.data.shape
    if lab.shape != (b, h, w):
        raise DimensionError(f"labels shape {lab.shape} != {(b, h, w)}")
    valid = lab != ignore
    bad = valid & ((lab < 0) | (lab >= k))
    if bad.any():
        raise ArgumentError(
            f"labels contain class ids outside [0, {k}) at {int(bad.sum())} pixels")
    safe = np.where(valid, lab, 0).astype(np.int64)
    counts = valid.reshape(b, -1).sum(axis=1)
    coeff = np.where(valid, -1.0, 0.0) / np.maximum(counts, 1)[:, None, None] / b
    return sum_all(scale_by(log_clamped(gather_class(p, safe)), coeff))


def standard_unsup_loss(student_preds, teacher_preds, tau):
    """Plain consistency: CE to the teacher argmax at confident pixels / HW."""
    _check_tau(tau)
    p = _batch_preds(student_preds)
    t = _batch_arrays(teacher_preds, 4, "teacher maps")
    if t.shape != p.data.shape:
        raise DimensionError(f"teacher shape {t.shape} != student {p.data.shape}")
    b, k, h, w = t.shape
    conf = t.max(axis=1) >= tau
    ids = t.argmax(axis=1)
    coeff = np.where(conf, -1.0, 0.0) / (h * w) / b
    return sum_all(scale_by(log_clamped(gather_class(p, ids)), coeff))


def _branch_sum(preds, targets, tau, scale, what):
    t = _batch_arrays(targets, 4, what)
    if t.shape != preds.data.shape:
        raise DimensionError(f"{what} shape {t.shape} != preds {preds.data.shape}")
    conf = t.max(axis=1) >= tau
    ids = t.argmax(axis=1)
    coeff = np.where(conf, -1.0, 0.0) * scale[:, None, None]
    term = sum_all(scale_by(log_clamped(gather_class(preds, ids)), coeff))
    return term, float(conf.mean())


def adaptive_unsup_loss(branchI_preds, branchI_targets, branchC_preds,
                        branchC_targets, reports, tau, *, weights=None):
    """Hardness-weighted consistency over the two strong branches.

    L_u = (1/B) * sum_i w_i/(2HW) * [ sum_j 1[conf_I]*CE_I + 1[conf_C]*CE_C ]

    with w_i = 1 - gamma_i by default (`weights` overrides, e.g. all ones
    for the plain-consistency baseline).  Instances at gamma = 1 get weight
    exactly 0, so their gradients vanish identically.
    """
    _check_tau(tau)
    pI = _batch_preds(branchI_preds)
    pC = _batch_preds(branchC_preds)
    if pI.data.shape != pC.data.shape:
        raise DimensionError(
            f"branch shapes differ: {pI.data.shape} vs {pC.data.shape}")
    b, k, h, w = pI.data.shape
    if len(reports) != b:
        raise DimensionError(f"{len(reports)} reports for a batch of {b}")
    if weights is None:
        wvec = np.array([1.0 - r.gamma for r in reports], dtype=np.float64)
    else:
        if len(weights) != b:
            raise DimensionError(f"{len(weights)} weights for a batch of {b}")
        wvec = np.asarray(weights, dtype=np.float64)
        if (wvec < 0).any() or (wvec > 1).any():
            raise ArgumentError("per-instance weights must lie in [0, 1]")
    scale = wvec / (2.0 * h * w) / b
    sI, fracI = _branch_sum(pI, branchI_targets, tau, scale, "branch I targets")
    sC, fracC = _branch_sum(pC, branchC_targets, tau, scale, "branch C targets")
    stats = AdaptiveStats(
        per_instance_weights=[float(x) for x in wvec],
        confident_fraction_I=fracI,
        confident_fraction_C=fracC,
    )
    return add(sI, sC), stats


def total_loss(l_x, l_u, lambda_u):
    """Scalar objective l_x + lambda_u * l_u."""
    if lambda_u < 0:
        raise ArgumentError(f"lambda_u must be >= 0, got {lambda_u!r}")
    return float(l_x) + float(lambda_u) * float(l_u)


def make_breakdown(l_x, l_u, lambda_u, per_instance_weights, confident_fraction_I,
                   confident_fraction_C):
    return LossBreakdown(
        l_x=float(l_x),
        l_u=float(l_u),
        total=total_loss(l_x, l_u, lambda_u),
        per_instance_weights=list(per_instance_weights),
        confident_fraction_I=float(confident_fraction_I),
        confident_fraction_C=float(confident_fraction_C),
    )
