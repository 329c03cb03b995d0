"""Trainer orchestration: stepping, evaluation, CSV/checkpoint outputs.

The mIoU oracle below recomputes the metric from per-class pixel sets,
independent of any confusion-matrix bookkeeping in the implementation.
"""

import csv
import numpy as np
import pytest

from imas import tensor as T
from imas.data import generate_dataset, load_sample, split
from imas.errors import ConfigError, NumericError
from imas.model import init_pair
from imas.tensor import init_optimizer
from imas.trainer import (
    HARDNESS_HEADER,
    METRICS_HEADER,
    TrainConfig,
    evaluate_miou,
    run,
    train_step,
)


# ------------------------------------------------------------- fixtures --

@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    """8 train / 2 val scenes at 16x16, half the pool labeled."""
    root = tmp_path_factory.mktemp("tiny_ds")
    manifest = generate_dataset(root, n_train=8, n_val=2, h=16, w=16,
                                k=3, seed=11)
    return split(manifest, "1/2", seed=11)


def cfg(tiny, **over):
    base = dict(mode="imas", epochs=1, batch_size=4, seed=5,
                out_dir=str(tiny.root))
    base.update(over)
    return TrainConfig(**base)


def clone_params(net):
    return [p.data.copy() for p in net.params]


# -------------------------------------------------------------- oracles --

def oracle_miou(preds, truths, k):
    """mIoU from per-class pixel-coordinate sets (image index included)."""
    per_class = {}
    for c in range(k):
        inter = union = 0
        for i, (p, t) in enumerate(zip(preds, truths)):
            a = {(i,) + tuple(xy) for xy in np.argwhere(p == c)}
            b = {(i,) + tuple(xy) for xy in np.argwhere(t == c)}
            inter += len(a & b)
            union += len(a | b)
        if union:
            per_class[c] = inter / union
    return sum(per_class.values()) / len(per_class), per_class


class OneHotNet:
    """Stub net emitting fixed logits per image, keyed by batch order."""

    def __init__(self, label_maps, k):
        self.maps = [np.asarray(m) for m in label_maps]
        self.k = k
        self.cursor = 0

    def forward(self, x, train_mode=False):
        b = x.shape[0]
        taken = self.maps[self.cursor:self.cursor + b]
        self.cursor += b
        logits = np.stack([
            10.0 * (np.arange(self.k)[:, None, None] == m) for m in taken
        ]).astype(np.float32)
        return T.Tensor(logits)


# ----------------------------------------------------------- evaluation --

def test_miou_perfect_prediction_is_one(tiny):
    truths = [load_sample(tiny, sid).label for sid in tiny.val]
    net = OneHotNet(truths, tiny.k)
    miou, per_class = evaluate_miou(net, tiny.val, tiny)
    assert miou == 1.0
    present = ~np.isnan(per_class)
    assert np.all(per_class[present] == 1.0)


def test_miou_matches_set_oracle(tiny):
    pair = init_pair(tiny.k, seed=3)
    samples = [load_sample(tiny, sid) for sid in tiny.val]
    with T.no_grad():
        logits = pair.student.forward(
            T.Tensor(np.stack([s.image for s in samples])))
    preds = np.argmax(logits.data, axis=1)
    want, per = oracle_miou(list(preds), [s.label for s in samples], tiny.k)

    got, per_class = evaluate_miou(pair.student, tiny.val, tiny)
    assert abs(got - want) < 1e-9
    for c in range(tiny.k):
        if c in per:
            assert abs(per_class[c] - per[c]) < 1e-9
        else:
            assert np.isnan(per_class[c])


def test_miou_excludes_classes_absent_everywhere(tiny):
    # Predict the truth for class 0 pixels, class 1 elsewhere: any class
    # >= 2 that never occurs in truth must not drag the mean down.
    truths = [load_sample(tiny, sid).label for sid in tiny.val]
    fakes = [np.where(t == 0, 0, 1).astype(np.uint8) for t in truths]
    net = OneHotNet(fakes, tiny.k)
    miou, per_class = evaluate_miou(net, tiny.val, tiny)
    want, per = oracle_miou(fakes, truths, tiny.k)
    assert abs(miou - want) < 1e-9
    absent = [c for c in range(tiny.k) if c not in per]
    assert all(np.isnan(per_class[c]) for c in absent)


def test_miou_rejects_empty_ids(tiny):
    pair = init_pair(tiny.k, seed=3)
    from imas.errors import ArgumentError
    with pytest.raises(ArgumentError):
        evaluate_miou(pair.student, [], tiny)


# ------------------------------------------------------------ stepping --

def make_batches(manifest, config):
    bx = [load_sample(manifest, sid)
          for sid in manifest.labeled[:config.batch_size]]
    bu = [load_sample(manifest, sid)
          for sid in manifest.unlabeled[:config.batch_size]]
    return bx, bu


def test_lr_zero_freezes_student_but_teacher_tracks(tiny):
    config = cfg(tiny, base_lr=0.0)
    pair = init_pair(tiny.k, seed=config.seed, alpha=config.alpha)
    # Perturb the teacher so the EMA pull is visible.
    pair.teacher.params[0].data += 0.25
    t_before = clone_params(pair.teacher)
    s_before = clone_params(pair.student)
    state = init_optimizer(pair.student.params, 0.0, total_steps=4)

    bx, bu = make_batches(tiny, config)
    breakdown, reports = train_step(pair, state, bx, bu, config, step=1,
                                    crop=tiny.crop)
    assert len(reports) == len(bu)
    assert np.isfinite(breakdown.total)
    for before, p in zip(s_before, pair.student.params):
        assert np.array_equal(before, p.data)
    # Teacher moved by exactly one EMA application toward the (frozen)
    # student -- proof that backprop/SGD touched nothing of the teacher.
    a = config.alpha
    for tb, sb, p in zip(t_before, s_before, pair.teacher.params):
        want = a * tb + (1.0 - a) * sb
        np.testing.assert_allclose(p.data, want, rtol=0, atol=1e-7)
    assert state.step_count == 1


def test_supervised_step_mirrors_teacher_and_zeroes_lu(tiny):
    config = cfg(tiny, mode="supervised")
    pair = init_pair(tiny.k, seed=config.seed, alpha=config.alpha)
    pair.teacher.params[0].data += 0.25
    state = init_optimizer(pair.student.params, config.base_lr, total_steps=4)
    bx, bu = make_batches(tiny, config)
    breakdown, reports = train_step(pair, state, bx, bu, config, step=1,
                                    crop=tiny.crop)
    assert breakdown.l_u == 0.0
    assert breakdown.total == breakdown.l_x
    assert reports == []
    for sp, tp in zip(pair.student.params, pair.teacher.params):
        assert np.array_equal(sp.data, tp.data)


def test_standard_cr_uses_unit_weights(tiny):
    config = cfg(tiny, mode="standard_cr")
    pair = init_pair(tiny.k, seed=config.seed)
    state = init_optimizer(pair.student.params, config.base_lr, total_steps=4)
    bx, bu = make_batches(tiny, config)
    breakdown, reports = train_step(pair, state, bx, bu, config, step=1,
                                    crop=tiny.crop)
    assert breakdown.per_instance_weights == [1.0] * len(bu)
    assert len(reports) == len(bu)          # hardness still logged


def test_imas_weights_follow_hardness(tiny):
    config = cfg(tiny)
    pair = init_pair(tiny.k, seed=config.seed)
    state = init_optimizer(pair.student.params, config.base_lr, total_steps=4)
    bx, bu = make_batches(tiny, config)
    breakdown, reports = train_step(pair, state, bx, bu, config, step=1,
                                    crop=tiny.crop)
    want = [1.0 - r.gamma for r in reports]
    assert breakdown.per_instance_weights == pytest.approx(want, abs=0)


def test_nonfinite_loss_aborts_with_context(tiny):
    config = cfg(tiny)
    pair = init_pair(tiny.k, seed=config.seed)
    pair.student.params[0].data[:] = np.nan
    state = init_optimizer(pair.student.params, config.base_lr, total_steps=4)
    bx, bu = make_batches(tiny, config)
    with pytest.raises(NumericError) as err:
        train_step(pair, state, bx, bu, config, step=7, crop=tiny.crop)
    msg = str(err.value)
    assert "step 7" in msg
    assert bu[0].id in msg


# ------------------------------------------------------------ full runs --

def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_run_outputs_and_determinism(tiny, tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    for out in (out_a, out_b):
        config = cfg(tiny, epochs=2, eval_every=1, out_dir=str(out))
        result = run(config, tiny)
        assert (out / "checkpoint_best.bin").exists()
        assert (out / "checkpoint_final.bin").exists()
        assert 0.0 <= result.best_val_miou <= 1.0

    for name in ("metrics.csv", "hardness.csv"):
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()

    rows = read_rows(out_a / "metrics.csv")
    assert rows[0] == list(METRICS_HEADER)
    spe = -(-len(tiny.unlabeled) // 4)           # ceil
    assert len(rows) == 1 + 2 * spe + 1          # header + initial + steps
    head = dict(zip(rows[0], rows[1]))
    assert head["step"] == "0" and head["epoch"] == "0"
    assert head["l_x"] == "" and head["val_miou"] != ""
    # eval_every=1: the last row of each epoch carries a mIoU figure.
    for row in rows[2:]:
        d = dict(zip(rows[0], row))
        is_epoch_end = int(d["step"]) % spe == 0
        assert (d["val_miou"] != "") == is_epoch_end
        assert 0.0 <= float(d["mean_gamma"]) <= 1.0

    hrows = read_rows(out_a / "hardness.csv")
    assert hrows[0] == list(HARDNESS_HEADER)
    assert len(hrows) == 1 + 2 * spe * 4         # batch of 4 per step


def test_run_epochs_zero_emits_initial_eval_only(tiny, tmp_path):
    config = cfg(tiny, epochs=0, out_dir=str(tmp_path / "zero"))
    result = run(config, tiny)
    rows = read_rows(tmp_path / "zero" / "metrics.csv")
    assert len(rows) == 2
    assert rows[1][0] == "0"
    assert result.final_val_miou_student == result.best_val_miou
    assert (tmp_path / "zero" / "checkpoint_final.bin").exists()


def test_run_supervised_has_empty_gamma_cells(tiny, tmp_path):
    config = cfg(tiny, mode="supervised", epochs=1,
                 out_dir=str(tmp_path / "sup"))
    run(config, tiny)
    rows = read_rows(tmp_path / "sup" / "metrics.csv")
    spe = -(-len(tiny.unlabeled) // 4)           # same epoch unit as SSL
    assert len(rows) == 1 + 1 + spe
    for row in rows[2:]:
        d = dict(zip(rows[0], row))
        assert d["l_u"] == "0.0"
        assert d["mean_gamma"] == "" and d["std_gamma"] == ""
    assert read_rows(tmp_path / "sup" / "hardness.csv") == [
        list(HARDNESS_HEADER)]


# --------------------------------------------------------------- config --

def test_config_validation():
    TrainConfig().validate()
    bad = [dict(tau=0.0), dict(tau=1.5), dict(lambda_u=-1), dict(alpha=1.0),
           dict(alpha=0.0), dict(batch_size=0), dict(epochs=-1),
           dict(mode="nope"), dict(blend_direction="x"),
           dict(cutmix_trigger="x"), dict(eval_model="critic"),
           dict(eval_every=0), dict(momentum=1.0), dict(poly_power=0.0)]
    for over in bad:
        with pytest.raises(ConfigError):
            TrainConfig(**over).validate()
