"""Hardness-evaluation tests against an independent brute-force oracle.

The oracle below recomputes the class-weighted IoU with Python sets of
pixel coordinates — no shared code with the implementation under test.
"""

import numpy as np
import pytest

from imas.errors import ArgumentError, DimensionError
from imas.hardness import (
    HardnessReport,
    confidence_ratio,
    evaluate_hardness,
    sort_by_hardness,
    weighted_iou,
)


# ---------------------------------------------------------------- oracle --

def _argmax_first(z, y, x):
    # first index wins on ties, like np.argmax
    best, bc = -np.inf, 0
    for c in range(z.shape[0]):
        v = float(z[c, y, x])
        if v > best:
            best, bc = v, c
    return bc


def brute_weighted_iou(z1, z2, tau):
    """Set-arithmetic reimplementation of the class-weighted IoU."""
    K, H, W = z1.shape
    omega = set()
    for y in range(H):
        for x in range(W):
            if max(float(z1[c, y, x]) for c in range(K)) >= tau:
                omega.add((y, x))
    if not omega:
        return 0.0
    a = {px: _argmax_first(z1, *px) for px in omega}
    b = {px: _argmax_first(z2, *px) for px in omega}
    classes = sorted(set(a.values()))
    inv = {c: 1.0 / sum(1 for v in a.values() if v == c) for c in classes}
    norm = sum(inv.values())
    total = 0.0
    for c in classes:
        sa = {px for px in omega if a[px] == c}
        sb = {px for px in omega if b[px] == c}
        total += (inv[c] / norm) * (len(sa & sb) / len(sa | sb))
    return total


def brute_confidence_ratio(p, tau):
    K, H, W = p.shape
    hits = sum(
        1
        for y in range(H)
        for x in range(W)
        if max(float(p[c, y, x]) for c in range(K)) >= tau
    )
    return hits / (H * W)


def brute_gamma(p_t, p_s, tau):
    rho_s = brute_confidence_ratio(p_s, tau)
    rho_t = brute_confidence_ratio(p_t, tau)
    g = 1.0 - (
        rho_s / 2.0 * brute_weighted_iou(p_s, p_t, tau)
        + rho_t / 2.0 * brute_weighted_iou(p_t, p_s, tau)
    )
    return min(1.0, max(0.0, g))


def random_probmap(rng, k, h, w, sharp=None):
    """Random ProbMap; `sharp` scales logits so confidence varies."""
    logits = rng.standard_normal((k, h, w))
    if sharp is not None:
        logits = logits * sharp
    e = np.exp(logits - logits.max(axis=0, keepdims=True))
    return (e / e.sum(axis=0, keepdims=True)).astype(np.float64)


def onehotish(amap, k, hi=0.9):
    """ProbMap with the given argmax and max prob `hi` everywhere."""
    amap = np.asarray(amap)
    lo = (1.0 - hi) / (k - 1)
    p = np.full((k,) + amap.shape, lo)
    for c in range(k):
        p[c][amap == c] = hi
    return p


# ---------------------------------------------------------- weighted IoU --

def test_worked_2x2_example():
    a = onehotish([[0, 0], [0, 1]], k=2)
    b = onehotish([[0, 0], [1, 1]], k=2)
    # n_0=3, n_1=1 -> weights 0.25 / 0.75; IoU_0 = 2/3, IoU_1 = 1/2
    want = 0.25 * (2 / 3) + 0.75 * 0.5
    assert abs(want - 13 / 24) < 1e-15
    got = weighted_iou(a, b, 0.8)
    assert abs(got - want) < 1e-12
    assert abs(brute_weighted_iou(a, b, 0.8) - want) < 1e-12


def test_perfect_agreement_is_exactly_one():
    rng = np.random.default_rng(7)
    amap = rng.integers(0, 3, size=(6, 6))
    p = onehotish(amap, k=3, hi=0.97)
    assert weighted_iou(p, p.copy(), 0.95) == 1.0


def test_disjoint_classes_zero():
    a = onehotish(np.zeros((4, 4), int), k=2)
    b = onehotish(np.ones((4, 4), int), k=2)
    assert weighted_iou(a, b, 0.5) == 0.0


def test_empty_confidence_set_zero():
    p = np.full((4, 3, 3), 0.25)
    q = onehotish(np.zeros((3, 3), int), k=4, hi=0.97)
    assert weighted_iou(p, q, 0.95) == 0.0
    # ... but swapping arguments makes Omega full, so the result is live
    assert weighted_iou(q, p, 0.95) > 0.0


def test_exhaustive_binary_2x2_configs():
    # every pair of binary argmax patterns on a 2x2 grid, fully confident
    for abits in range(16):
        amap = np.array([(abits >> i) & 1 for i in range(4)]).reshape(2, 2)
        pa = onehotish(amap, k=2)
        for bbits in range(16):
            bmap = np.array([(bbits >> i) & 1 for i in range(4)]).reshape(2, 2)
            pb = onehotish(bmap, k=2)
            got = weighted_iou(pa, pb, 0.8)
            want = brute_weighted_iou(pa, pb, 0.8)
            assert abs(got - want) < 1e-12, (abits, bbits)


def test_weighted_iou_shape_mismatch():
    a = np.full((2, 4, 4), 0.5)
    b = np.full((2, 4, 5), 0.5)
    with pytest.raises(DimensionError):
        weighted_iou(a, b, 0.9)


def test_weighted_iou_oracle_random():
    rng = np.random.default_rng(11)
    for trial in range(300):
        sharp = rng.uniform(0.5, 8.0)
        a = random_probmap(rng, 3, 8, 8, sharp)
        b = random_probmap(rng, 3, 8, 8, sharp)
        tau = 0.7 if trial % 2 == 0 else 0.95
        got = weighted_iou(a, b, tau)
        assert abs(got - brute_weighted_iou(a, b, tau)) < 1e-9
        assert 0.0 <= got <= 1.0


# ----------------------------------------------------- confidence ratio --

def test_confidence_ratio_saturation_and_floor():
    one_hot = onehotish(np.zeros((5, 5), int), k=3, hi=1.0)
    assert confidence_ratio(one_hot, 0.95) == 1.0
    uniform = np.full((4, 5, 5), 0.25)
    assert confidence_ratio(uniform, 0.95) == 0.0


def test_confidence_ratio_pixel_count_oracle():
    rng = np.random.default_rng(3)
    p = random_probmap(rng, 3, 8, 8, sharp=4.0)
    assert confidence_ratio(p, 0.7) == brute_confidence_ratio(p, 0.7)


def test_confidence_ratio_monotone_in_tau():
    rng = np.random.default_rng(5)
    p = random_probmap(rng, 4, 8, 8, sharp=3.0)
    taus = np.linspace(0.05, 1.0, 20)
    ratios = [confidence_ratio(p, float(t)) for t in taus]
    assert all(r0 >= r1 for r0, r1 in zip(ratios, ratios[1:]))


def test_confidence_ratio_bad_tau():
    p = np.full((2, 2, 2), 0.5)
    with pytest.raises(ArgumentError):
        confidence_ratio(p, 0.0)
    with pytest.raises(ArgumentError):
        confidence_ratio(p, 1.5)


# ------------------------------------------------------------- hardness --

def test_identical_confident_maps_gamma_zero():
    amap = np.arange(16).reshape(4, 4) % 3
    p = onehotish(amap, k=3, hi=0.99)
    rep = evaluate_hardness(p, p.copy(), 0.95)
    assert rep.gamma == 0.0
    assert rep.rho_s == 1.0 and rep.rho_t == 1.0
    assert rep.wiou_st == 1.0 and rep.wiou_ts == 1.0


def test_unconfident_maps_gamma_one():
    p = np.full((4, 4, 4), 0.25)
    rep = evaluate_hardness(p, p.copy(), 0.95)
    assert rep.gamma == 1.0
    assert rep.rho_s == 0.0 and rep.rho_t == 0.0


def test_hardness_oracle_random():
    rng = np.random.default_rng(23)
    for trial in range(200):
        sharp = rng.uniform(0.5, 8.0)
        pt = random_probmap(rng, 3, 8, 8, sharp)
        ps = random_probmap(rng, 3, 8, 8, sharp)
        tau = 0.7 if trial % 2 == 0 else 0.95
        rep = evaluate_hardness(pt, ps, tau)
        assert abs(rep.gamma - brute_gamma(pt, ps, tau)) < 1e-9
        # components line up with their own oracles
        assert abs(rep.rho_s - brute_confidence_ratio(ps, tau)) < 1e-12
        assert abs(rep.rho_t - brute_confidence_ratio(pt, tau)) < 1e-12
        assert abs(rep.wiou_st - brute_weighted_iou(ps, pt, tau)) < 1e-9
        assert abs(rep.wiou_ts - brute_weighted_iou(pt, ps, tau)) < 1e-9


def test_gamma_symmetry_exact():
    rng = np.random.default_rng(31)
    for _ in range(50):
        a = random_probmap(rng, 3, 6, 6, sharp=rng.uniform(1, 6))
        b = random_probmap(rng, 3, 6, 6, sharp=rng.uniform(1, 6))
        assert evaluate_hardness(a, b, 0.8).gamma == evaluate_hardness(b, a, 0.8).gamma


def test_gamma_bounds_bulk():
    rng = np.random.default_rng(37)
    for _ in range(10_000):
        a = random_probmap(rng, 3, 4, 4, sharp=rng.uniform(0.2, 10))
        b = random_probmap(rng, 3, 4, 4, sharp=rng.uniform(0.2, 10))
        g = evaluate_hardness(a, b, 0.9).gamma
        assert 0.0 <= g <= 1.0


def test_report_invariant_reconstructs():
    rng = np.random.default_rng(41)
    a = random_probmap(rng, 3, 8, 8, sharp=5.0)
    b = random_probmap(rng, 3, 8, 8, sharp=5.0)
    r = evaluate_hardness(a, b, 0.7)
    recon = 1.0 - (r.rho_s / 2 * r.wiou_st + r.rho_t / 2 * r.wiou_ts)
    assert abs(r.gamma - recon) < 1e-9


# ------------------------------------------------------------- sorting --

def _reports(gammas):
    return [HardnessReport(g, 0.0, 0.0, 0.0, 0.0) for g in gammas]


def test_sort_example():
    asc, desc = sort_by_hardness(_reports([0.5, 0.1, 0.9]))
    assert asc == [1, 0, 2]
    assert desc == [2, 0, 1]


def test_sort_all_ties_keeps_batch_order():
    asc, desc = sort_by_hardness(_reports([0.3, 0.3, 0.3, 0.3]))
    assert asc == [0, 1, 2, 3]
    assert desc == [0, 1, 2, 3]


def test_sort_random_permutation_monotone():
    rng = np.random.default_rng(43)
    gammas = rng.uniform(0, 1, size=16).tolist()
    gammas[3] = gammas[11]  # plant a tie
    asc, desc = sort_by_hardness(_reports(gammas))
    assert sorted(asc) == list(range(16)) and sorted(desc) == list(range(16))
    seq = [gammas[i] for i in asc]
    assert all(x <= y for x, y in zip(seq, seq[1:]))
    seq = [gammas[i] for i in desc]
    assert all(x >= y for x, y in zip(seq, seq[1:]))
    assert asc.index(3) < asc.index(11) and desc.index(3) < desc.index(11)


def test_sort_empty_batch_rejected():
    with pytest.raises(ArgumentError):
        sort_by_hardness([])
