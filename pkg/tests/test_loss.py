"""Loss tests against naive double-loop oracles."""

import numpy as np
import pytest

from imas.errors import ArgumentError, DimensionError
from imas.hardness import HardnessReport
from imas.loss import (
    LossBreakdown,
    adaptive_unsup_loss,
    make_breakdown,
    standard_unsup_loss,
    supervised_loss,
    total_loss,
)
from imas.tensor import Tensor, softmax_channels

CLAMP = 1e-12


def _probs(rng, k, h, w, sharp=3.0):
    z = np.exp(sharp * rng.standard_normal((k, h, w)))
    return (z / z.sum(0, keepdims=True)).astype(np.float32)


def _rep(g):
    return HardnessReport(g, 0.0, 0.0, 0.0, 0.0)


# ----------------------------------------------------------------- oracles --

def naive_supervised(preds, labels, ignore=255):
    total = 0.0
    for p, lab in zip(preds, labels):
        k, h, w = p.shape
        s, n = 0.0, 0
        for y in range(h):
            for x in range(w):
                c = int(lab[y, x])
                if c == ignore:
                    continue
                s += -np.log(max(float(p[c, y, x]), CLAMP))
                n += 1
        total += s / n if n else 0.0
    return total / len(preds)


def naive_standard(student, teacher, tau):
    total = 0.0
    for ps, pt in zip(student, teacher):
        k, h, w = ps.shape
        s = 0.0
        for y in range(h):
            for x in range(w):
                col = pt[:, y, x]
                if float(col.max()) >= tau:
                    c = int(col.argmax())
                    s += -np.log(max(float(ps[c, y, x]), CLAMP))
        total += s / (h * w)
    return total / len(student)


def naive_adaptive(predsI, targetsI, predsC, targetsC, gammas, tau, weights=None):
    total = 0.0
    b = len(predsI)
    for i in range(b):
        k, h, w = predsI[i].shape
        wgt = (1.0 - gammas[i]) if weights is None else weights[i]
        s = 0.0
        for y in range(h):
            for x in range(w):
                col = targetsI[i][:, y, x]
                if float(col.max()) >= tau:
                    s += -np.log(max(float(predsI[i][int(col.argmax()), y, x]), CLAMP))
                col = targetsC[i][:, y, x]
                if float(col.max()) >= tau:
                    s += -np.log(max(float(predsC[i][int(col.argmax()), y, x]), CLAMP))
        total += wgt / (2 * h * w) * s
    return total / b


# -------------------------------------------------------------- supervised --

def test_supervised_perfect_predictions():
    lab = np.array([[0, 1], [1, 0]], dtype=np.uint8)
    p = np.zeros((2, 2, 2), dtype=np.float32)
    for y in range(2):
        for x in range(2):
            p[lab[y, x], y, x] = 1.0
    loss = supervised_loss([Tensor(p)], [lab])
    assert loss.item() == 0.0


def test_supervised_uniform_ln_k():
    lab = np.zeros((4, 4), dtype=np.uint8)
    p = np.full((4, 4, 4), 0.25, dtype=np.float32)
    loss = supervised_loss([Tensor(p)], [lab])
    assert abs(loss.item() - np.log(4)) < 1e-6


def test_supervised_oracle_with_ignores():
    rng = np.random.default_rng(0)
    preds, labels = [], []
    for i in range(3):
        preds.append(_probs(rng, 4, 6, 6))
        lab = rng.integers(0, 4, size=(6, 6)).astype(np.int64)
        lab[rng.random((6, 6)) < 0.3] = 255
        labels.append(lab)
    labels[1][:] = 255  # fully-ignored image contributes 0, /B retained
    got = supervised_loss([Tensor(p) for p in preds], labels)
    want = naive_supervised(preds, labels)
    assert abs(got.item() - want) < 1e-6


def test_supervised_invalid_class_id():
    p = np.full((3, 2, 2), 1 / 3, dtype=np.float32)
    lab = np.array([[0, 5], [1, 2]], dtype=np.int64)  # 5 is not ignore
    with pytest.raises(ArgumentError):
        supervised_loss([Tensor(p)], [lab])


def test_supervised_gradient_skips_ignored_pixels():
    rng = np.random.default_rng(1)
    logits = Tensor(rng.standard_normal((1, 3, 2, 2)), requires_grad=True, dtype=np.float32)
    preds = softmax_channels(logits)
    lab = np.array([[0, 255], [1, 255]], dtype=np.int64)
    loss = supervised_loss(preds, [lab])
    loss.backward()
    g = logits.grad[0]
    assert np.any(g[:, 0, 0] != 0) and np.any(g[:, 1, 0] != 0)
    assert np.all(g[:, 0, 1] == 0) and np.all(g[:, 1, 1] == 0)


# ---------------------------------------------------------------- standard --

def test_standard_no_confident_pixels():
    s = np.full((4, 3, 3), 0.25, dtype=np.float32)
    t = np.full((4, 3, 3), 0.25, dtype=np.float32)
    loss = standard_unsup_loss([Tensor(s)], [t], 0.95)
    assert loss.item() == 0.0


def test_standard_perfect_onehot_agreement():
    amap = np.array([[0, 1], [2, 0]])
    p = np.zeros((3, 2, 2), dtype=np.float32)
    for y in range(2):
        for x in range(2):
            p[amap[y, x], y, x] = 1.0
    loss = standard_unsup_loss([Tensor(p)], [p.copy()], 0.95)
    assert abs(loss.item()) < 1e-7


def test_standard_oracle():
    rng = np.random.default_rng(2)
    student = [_probs(rng, 3, 8, 8) for _ in range(4)]
    teacher = [_probs(rng, 3, 8, 8, sharp=5.0) for _ in range(4)]
    got = standard_unsup_loss([Tensor(p) for p in student], teacher, 0.7)
    want = naive_standard(student, teacher, 0.7)
    assert abs(got.item() - want) < 1e-6


# ---------------------------------------------------------------- adaptive --

def test_adaptive_all_hard_is_exactly_zero_with_zero_grads():
    rng = np.random.default_rng(3)
    logits = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True, dtype=np.float32)
    preds = softmax_channels(logits)
    targets = [_probs(rng, 3, 4, 4, sharp=6.0) for _ in range(2)]
    reports = [_rep(1.0), _rep(1.0)]
    loss, stats = adaptive_unsup_loss(preds, targets, preds, targets, reports, 0.7)
    assert loss.item() == 0.0
    assert stats.per_instance_weights == [0.0, 0.0]
    loss.backward()
    assert logits.grad is not None and np.all(logits.grad == 0.0)


def test_adaptive_reduces_to_standard_when_easy():
    rng = np.random.default_rng(4)
    student = [_probs(rng, 3, 8, 8) for _ in range(3)]
    teacher = [_probs(rng, 3, 8, 8, sharp=5.0) for _ in range(3)]
    reports = [_rep(0.0)] * 3
    sp = [Tensor(p) for p in student]
    adaptive, _ = adaptive_unsup_loss(sp, teacher, sp, teacher, reports, 0.7)
    standard = standard_unsup_loss([Tensor(p) for p in student], teacher, 0.7)
    assert abs(adaptive.item() - standard.item()) < 1e-6


def test_adaptive_hand_built_single_instance():
    tau = 0.8
    pI = np.stack([np.array([[0.7, 0.4], [0.6, 0.2]], dtype=np.float32)])
    pI = np.concatenate([pI, 1.0 - pI])          # K=2
    tI = np.stack([np.array([[0.9, 0.85], [0.5, 0.95]], dtype=np.float32)])
    tI = np.concatenate([tI, 1.0 - tI])
    pC = np.stack([np.array([[0.3, 0.6], [0.8, 0.1]], dtype=np.float32)])
    pC = np.concatenate([pC, 1.0 - pC])
    tC = np.stack([np.array([[0.1, 0.9], [0.85, 0.6]], dtype=np.float32)])
    tC = np.concatenate([tC, 1.0 - tC])
    reports = [_rep(0.5)]
    loss, stats = adaptive_unsup_loss([Tensor(pI)], [tI], [Tensor(pC)], [tC],
                                      reports, tau)
    # branch I confident at 3 pixels, all target class 0;
    # branch C confident at (0,0) class 1, (0,1) class 0, (1,0) class 0
    want = 0.5 / 8.0 * (
        -np.log(0.7) - np.log(0.4) - np.log(0.2)
        - np.log(1.0 - 0.3) - np.log(0.6) - np.log(0.8)
    )
    assert abs(loss.item() - want) < 1e-6
    assert stats.per_instance_weights == [0.5]
    assert stats.confident_fraction_I == 0.75
    assert stats.confident_fraction_C == 0.75


def test_adaptive_oracle_random():
    rng = np.random.default_rng(5)
    b = 4
    predsI = [_probs(rng, 3, 8, 8) for _ in range(b)]
    predsC = [_probs(rng, 3, 8, 8) for _ in range(b)]
    targetsI = [_probs(rng, 3, 8, 8, sharp=5.0) for _ in range(b)]
    targetsC = [_probs(rng, 3, 8, 8, sharp=5.0) for _ in range(b)]
    gammas = [0.1, 0.5, 0.9, 0.3]
    reports = [_rep(g) for g in gammas]
    got, _ = adaptive_unsup_loss(
        [Tensor(p) for p in predsI], targetsI,
        [Tensor(p) for p in predsC], targetsC, reports, 0.7,
    )
    want = naive_adaptive(predsI, targetsI, predsC, targetsC, gammas, 0.7)
    assert abs(got.item() - want) < 1e-6


def test_adaptive_weights_override():
    rng = np.random.default_rng(6)
    b = 2
    predsI = [_probs(rng, 3, 4, 4) for _ in range(b)]
    targetsI = [_probs(rng, 3, 4, 4, sharp=5.0) for _ in range(b)]
    reports = [_rep(0.9), _rep(0.9)]  # would nearly zero the default weights
    got, stats = adaptive_unsup_loss(
        [Tensor(p) for p in predsI], targetsI,
        [Tensor(p) for p in predsI], targetsI, reports, 0.7,
        weights=[1.0, 1.0],
    )
    want = naive_adaptive(predsI, targetsI, predsI, targetsI, [0, 0], 0.7,
                          weights=[1.0, 1.0])
    assert abs(got.item() - want) < 1e-6
    assert stats.per_instance_weights == [1.0, 1.0]


def test_adaptive_no_grad_into_targets_or_gamma():
    rng = np.random.default_rng(7)
    logits = Tensor(rng.standard_normal((1, 3, 4, 4)), requires_grad=True, dtype=np.float32)
    preds = softmax_channels(logits)
    target_t = Tensor(_probs(rng, 3, 4, 4, sharp=5.0), requires_grad=True)
    loss, _ = adaptive_unsup_loss(preds, [target_t], preds, [target_t],
                                  [_rep(0.3)], 0.7)
    loss.backward()
    assert logits.grad is not None
    assert target_t.grad is None  # teacher maps are data, not graph


def test_adaptive_confidence_monotone_in_tau():
    rng = np.random.default_rng(8)
    preds = [_probs(rng, 3, 8, 8) for _ in range(2)]
    targets = [_probs(rng, 3, 8, 8, sharp=3.0) for _ in range(2)]
    reports = [_rep(0.2)] * 2
    fractions = []
    for tau in (0.4, 0.6, 0.8, 0.95):
        _, stats = adaptive_unsup_loss(
            [Tensor(p) for p in preds], targets,
            [Tensor(p) for p in preds], targets, reports, tau,
        )
        fractions.append(stats.confident_fraction_I)
    assert all(a >= b for a, b in zip(fractions, fractions[1:]))


def test_adaptive_shape_validation():
    rng = np.random.default_rng(9)
    p = [Tensor(_probs(rng, 3, 4, 4))]
    t = [_probs(rng, 3, 4, 4)]
    bad = [_probs(rng, 3, 4, 5)]
    with pytest.raises(DimensionError):
        adaptive_unsup_loss(p, bad, p, t, [_rep(0.5)], 0.7)
    with pytest.raises(DimensionError):
        adaptive_unsup_loss(p, t, p, t, [_rep(0.5), _rep(0.5)], 0.7)


# ------------------------------------------------------------------- total --

def test_total_loss_arithmetic():
    assert total_loss(1.0, 0.5, 3.0) == 2.5
    assert total_loss(1.25, 0.5, 0.0) == 1.25
    assert total_loss(0.75, 0.0, 3.0) == 0.75
    with pytest.raises(ArgumentError):
        total_loss(1.0, 0.5, -1.0)


def test_breakdown_invariant():
    stats_weights = [0.25, 0.75]
    bd = make_breakdown(1.2, 0.4, 3.0, stats_weights, 0.5, 0.6)
    assert isinstance(bd, LossBreakdown)
    assert abs(bd.total - (bd.l_x + 3.0 * bd.l_u)) < 1e-6
    assert bd.per_instance_weights == stats_weights
    assert bd.confident_fraction_I == 0.5 and bd.confident_fraction_C == 0.6
