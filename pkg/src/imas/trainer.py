"""Training orchestration: per-step pipeline, evaluation, and run outputs.

One optimization step follows a fixed order so the adaptive pieces all see
the same weak view of each unlabeled instance:

1. weak-augment the labeled batch, supervised loss on the student;
2. weak-augment each unlabeled instance once, then student and teacher
   forward passes on that view without gradients;
3. per-instance hardness from the two prediction maps;
4. two strong branches built in parallel from the weak view -- intensity
   distortion re-blended toward the weak image, and hardness-paired CutMix
   over the weak images and teacher maps;
5. student forward on both branches (one stacked pass), consistency loss;
6. backprop and SGD on the student only;
7. EMA update of the teacher.

`supervised` mode runs steps 1 and 6 and mirrors the teacher; `standard_cr`
keeps the full pipeline but neutralizes every hardness-derived quantity
(blend weight 1, CutMix probability 0.5 with random pairing, unit loss
weights).  All randomness comes from named substreams keyed by the global
step (or epoch, for the unlabeled pool shuffle), so toggling one feature
never shifts another's draws.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import (
    adaptive_blend,
    adaptive_cutmix,
    apply_intensity_ops,
    apply_weak_record,
    blend_coefficient,
    sample_intensity_ops,
    sample_weak_record,
)
from .data import load_batch, load_sample
from .errors import ArgumentError, ConfigError, NumericError
from .hardness import evaluate_hardness
from .loss import adaptive_unsup_loss, make_breakdown, supervised_loss
from .model import ema_update, init_pair, mirror_student, save_checkpoint
from .streams import substream
from .tensor import current_lr, init_optimizer, sgd_step

MODES = ("supervised", "standard_cr", "imas")
METRICS_HEADER = ("step", "epoch", "l_x", "l_u", "mean_gamma", "std_gamma",
                  "lr", "val_miou")
HARDNESS_HEADER = ("step", "instance_id", "gamma", "rho_s", "rho_t",
                   "wiou_st", "wiou_ts")


@dataclass
class TrainConfig:
    mode: str = "imas"
    tau: float = 0.95
    lambda_u: float = 3.0
    alpha: float = 0.996
    batch_size: int = 8
    epochs: int = 40
    base_lr: float = 0.01
    momentum: float = 0.9
    poly_power: float = 0.9
    seed: int = 0
    blend_direction: str = "prose"
    cutmix_trigger: str = "prose"
    eval_every: int = 5
    eval_model: str = "student"
    ignore: int = 255
    out_dir: str = "runs/imas"
    dtype: str = "float32"

    def validate(self):
        checks = [
            (self.mode in MODES,
             f"mode must be one of {MODES}, got {self.mode!r}"),
            (0.0 < self.tau <= 1.0, f"tau must lie in (0,1], got {self.tau}"),
            (self.lambda_u >= 0, f"lambda_u must be >= 0, got {self.lambda_u}"),
            (0.0 < self.alpha < 1.0,
             f"alpha must lie in (0,1), got {self.alpha}"),
            (self.batch_size >= 1,
             f"batch_size must be >= 1, got {self.batch_size}"),
            (self.epochs >= 0, f"epochs must be >= 0, got {self.epochs}"),
            (self.base_lr >= 0, f"base_lr must be >= 0, got {self.base_lr}"),
            (0.0 <= self.momentum < 1.0,
             f"momentum must lie in [0,1), got {self.momentum}"),
            (self.poly_power > 0,
             f"poly_power must be > 0, got {self.poly_power}"),
            (self.blend_direction in ("prose", "literal"),
             f"blend_direction must be 'prose' or 'literal', "
             f"got {self.blend_direction!r}"),
            (self.cutmix_trigger in ("prose", "probability_mean"),
             f"cutmix_trigger must be 'prose' or 'probability_mean', "
             f"got {self.cutmix_trigger!r}"),
            (self.eval_every >= 1,
             f"eval_every must be >= 1, got {self.eval_every}"),
            (self.eval_model in ("student", "teacher"),
             f"eval_model must be 'student' or 'teacher', "
             f"got {self.eval_model!r}"),
            (0 <= self.ignore <= 255,
             f"ignore must be a uint8 value, got {self.ignore}"),
            (self.dtype in ("float32", "float64"),
             f"dtype must be 'float32' or 'float64', got {self.dtype!r}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self


@dataclass
class MetricsRow:
    step: int
    epoch: int
    l_x: float = None
    l_u: float = None
    mean_gamma: float = None
    std_gamma: float = None
    lr: float = None
    val_miou: float = None

    def to_csv(self):
        cells = [str(self.step), str(self.epoch)]
        for v in (self.l_x, self.l_u, self.mean_gamma, self.std_gamma,
                  self.lr, self.val_miou):
            cells.append("" if v is None else repr(float(v)))
        return ",".join(cells)


@dataclass(frozen=True)
class RunResult:
    out_dir: str
    total_steps: int
    best_val_miou: float
    final_val_miou_student: float
    final_val_miou_teacher: float
    metrics_path: str
    hardness_path: str


# --------------------------------------------------------------- threads --

def _thread_count():
    raw = os.environ.get("IMAS_THREADS", "").strip()
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"IMAS_THREADS must be an integer, got {raw!r}")


def _parallel_map(fn, items):
    """Map a pure function over items, pooled when IMAS_THREADS > 1.

    Every random decision is drawn before this is called, so the result
    (and the RNG stream position) is identical at any pool width.
    """
    n = _thread_count()
    if n <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))


# -------------------------------------------------------------- stepping --

def _weak_batch(samples, rng, *, crop, ignore, with_labels):
    """Pre-draw one weak record per sample, then apply them (poolable)."""
    records = [sample_weak_record(rng, s.image.shape[1], s.image.shape[2],
                                  crop) for s in samples]

    def apply(pair_):
        sample, rec = pair_
        label = sample.label if with_labels else None
        return apply_weak_record(sample.image, label, rec, crop=crop,
                                 ignore=ignore)

    return _parallel_map(apply, list(zip(samples, records)))


def train_step(pair, state, batch_x, batch_u, config, step, *, crop):
    """One optimization step; returns (LossBreakdown, hardness reports).

    Gradients flow through the student's strong-branch and labeled passes
    only; the teacher and all hardness quantities are treated as data.
    Raises NumericError with the step and instance ids if the loss is not
    finite.
    """
    if not batch_x:
        raise ArgumentError("labeled batch is empty")
    if config.mode != "supervised" and not batch_u:
        raise ArgumentError("unlabeled batch is empty")
    try:
        return _step_body(pair, state, batch_x, batch_u, config, step,
                          crop=crop)
    except NumericError as exc:
        ids_x = [s.id for s in batch_x]
        ids_u = [s.id for s in batch_u]
        raise NumericError(
            f"aborting at step {step} (labeled={ids_x}, unlabeled={ids_u}): "
            f"{exc}") from exc


def _step_body(pair, state, batch_x, batch_u, config, step, *, crop):
    dtype = pair.student.dtype

    ax = substream(config.seed, "aug_x", step)
    weak_x = _weak_batch(batch_x, ax, crop=crop, ignore=config.ignore,
                         with_labels=True)
    x_imgs = np.stack([img for img, _ in weak_x]).astype(dtype, copy=False)
    x_labs = np.stack([lab for _, lab in weak_x])
    logits_x = pair.student.forward(T.Tensor(x_imgs))
    l_x_t = supervised_loss(T.softmax_channels(logits_x), x_labs,
                            ignore=config.ignore)

    if config.mode == "supervised":
        l_x = float(l_x_t.data)
        if not math.isfinite(l_x):
            raise NumericError(f"non-finite supervised loss: l_x={l_x}")
        l_x_t.backward()
        sgd_step(pair.student.params, state)
        for p in pair.student.params:
            p.zero_grad()
        mirror_student(pair)
        return make_breakdown(l_x, 0.0, config.lambda_u, [], 0.0, 0.0), []

    b = len(batch_u)
    au = substream(config.seed, "aug_u", step)
    weak_u = [img for img, _ in _weak_batch(batch_u, au, crop=crop,
                                            ignore=config.ignore,
                                            with_labels=False)]

    with T.no_grad():
        u_stack = np.stack(weak_u).astype(dtype, copy=False)
        p_s = T.softmax_channels(pair.student.forward(T.Tensor(u_stack))).data
        p_t = T.softmax_channels(pair.teacher.forward(T.Tensor(u_stack))).data
    reports = [evaluate_hardness(p_t[i], p_s[i], config.tau)
               for i in range(b)]

    # Branch I: intensity ops drawn sequentially, applied poolable.
    ops_list = [sample_intensity_ops(au) for _ in range(b)]
    if config.mode == "standard_cr":
        coeffs = [1.0] * b
    else:
        coeffs = [blend_coefficient(r.gamma, config.blend_direction)
                  for r in reports]

    def build_branch_i(args):
        weak, ops, coeff = args
        return adaptive_blend(apply_intensity_ops(weak, ops), weak, coeff)

    branch_i = _parallel_map(build_branch_i,
                             list(zip(weak_u, ops_list, coeffs)))

    # Branch C: CutMix over the same weak views and teacher maps.
    cm = substream(config.seed, "cutmix", step)
    partners = None
    override = None
    weights = None
    if config.mode == "standard_cr":
        partners = [int(v) for v in cm.permutation(b)]
        override = 0.5
        weights = [1.0] * b
    teacher_maps = [p_t[i] for i in range(b)]
    mixed_imgs, mixed_maps, _fired = adaptive_cutmix(
        weak_u, teacher_maps, reports, cm, trigger=config.cutmix_trigger,
        mean_gamma_override=override, partners=partners)

    both = np.stack(list(branch_i) + list(mixed_imgs)).astype(dtype,
                                                              copy=False)
    probs = T.softmax_channels(pair.student.forward(T.Tensor(both)))
    l_u_t, stats = adaptive_unsup_loss(
        T.slice0(probs, 0, b), p_t, T.slice0(probs, b, 2 * b), mixed_maps,
        reports, config.tau, weights=weights)

    total = T.add(l_x_t, T.scale_by(l_u_t, config.lambda_u))
    l_x, l_u = float(l_x_t.data), float(l_u_t.data)
    if not math.isfinite(float(total.data)):
        raise NumericError(f"non-finite total loss: l_x={l_x}, l_u={l_u}")
    total.backward()
    sgd_step(pair.student.params, state)
    for p in pair.student.params:
        p.zero_grad()
    ema_update(pair)
    breakdown = make_breakdown(l_x, l_u, config.lambda_u,
                               stats.per_instance_weights,
                               stats.confident_fraction_I,
                               stats.confident_fraction_C)
    return breakdown, reports


# ------------------------------------------------------------ evaluation --

def evaluate_miou(net, ids, manifest, *, ignore=255, chunk=16):
    """Mean IoU over full (un-augmented) images; returns (mIoU, per-class).

    Classes that appear in neither prediction nor truth anywhere in the
    set are excluded from the mean; their per-class entry is NaN.
    """
    if not ids:
        raise ArgumentError("no evaluation ids given")
    k = manifest.k
    conf = np.zeros((k, k), dtype=np.int64)
    with T.no_grad():
        for lo in range(0, len(ids), chunk):
            samples = [load_sample(manifest, sid)
                       for sid in ids[lo:lo + chunk]]
            imgs = np.stack([s.image for s in samples])
            imgs = imgs.astype(net.dtype if hasattr(net, "dtype")
                               else np.float32, copy=False)
            logits = net.forward(T.Tensor(imgs))
            preds = np.argmax(logits.data, axis=1)
            for s, p in zip(samples, preds):
                t = s.label.astype(np.int64)
                valid = t != ignore
                flat = t[valid] * k + p[valid]
                conf += np.bincount(flat.ravel(),
                                    minlength=k * k).reshape(k, k)
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - np.diag(conf)
    present = union > 0
    per_class = np.full(k, np.nan)
    per_class[present] = inter[present] / union[present]
    return float(per_class[present].mean()), per_class


# ------------------------------------------------------------- full runs --

def _eval_net(pair, config):
    return pair.teacher if config.eval_model == "teacher" else pair.student


def run(config, manifest):
    """Train per config over the manifest; write CSVs and checkpoints.

    Outputs under config.out_dir: metrics.csv (one row per step plus an
    initial evaluation row), hardness.csv (one row per unlabeled instance
    per step), checkpoint_best.bin, checkpoint_final.bin.  Identical
    config and dataset reproduce the files byte for byte.
    """
    config.validate()
    if not manifest.labeled:
        raise ConfigError("manifest has no labeled ids; run split first")
    if not manifest.unlabeled:
        raise ConfigError("manifest has no unlabeled ids")
    if not manifest.val:
        raise ConfigError("manifest has no validation ids")

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dtype = np.dtype(config.dtype)
    pair = init_pair(manifest.k, config.seed, alpha=config.alpha,
                     dtype=dtype)
    n_u = len(manifest.unlabeled)
    spe = -(-n_u // config.batch_size)
    total_steps = max(1, config.epochs * spe)
    state = init_optimizer(pair.student.params, config.base_lr, total_steps,
                           momentum=config.momentum,
                           poly_power=config.poly_power)

    rows = []
    hardness_rows = []
    miou0, _ = evaluate_miou(_eval_net(pair, config), manifest.val, manifest,
                             ignore=config.ignore)
    rows.append(MetricsRow(step=0, epoch=0, lr=current_lr(state),
                           val_miou=miou0))
    best = miou0
    save_checkpoint(out / "checkpoint_best.bin", pair, state)

    step = 0
    for epoch in range(1, config.epochs + 1):
        order = substream(config.seed, "batch_u", epoch).permutation(n_u)
        for s in range(spe):
            step += 1
            bx = load_batch(manifest, manifest.labeled,
                            substream(config.seed, "batch_x", step),
                            batch=config.batch_size)
            if config.mode == "supervised":
                bu = []
            else:
                lo = s * config.batch_size
                u_ids = [manifest.unlabeled[int(order[(lo + j) % n_u])]
                         for j in range(config.batch_size)]
                bu = [load_sample(manifest, sid) for sid in u_ids]
            lr_used = current_lr(state)
            breakdown, reports = train_step(pair, state, bx, bu, config,
                                            step, crop=manifest.crop)
            gammas = [r.gamma for r in reports]
            rows.append(MetricsRow(
                step=step, epoch=epoch, l_x=breakdown.l_x,
                l_u=breakdown.l_u,
                mean_gamma=float(np.mean(gammas)) if gammas else None,
                std_gamma=float(np.std(gammas)) if gammas else None,
                lr=lr_used))
            for sample, r in zip(bu, reports):
                hardness_rows.append(",".join(
                    [str(step), sample.id] +
                    [repr(float(v)) for v in (r.gamma, r.rho_s, r.rho_t,
                                              r.wiou_st, r.wiou_ts)]))
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            miou, _ = evaluate_miou(_eval_net(pair, config), manifest.val,
                                    manifest, ignore=config.ignore)
            rows[-1].val_miou = miou
            if miou > best:
                best = miou
                save_checkpoint(out / "checkpoint_best.bin", pair, state)

    save_checkpoint(out / "checkpoint_final.bin", pair, state)
    final_student, _ = evaluate_miou(pair.student, manifest.val, manifest,
                                     ignore=config.ignore)
    final_teacher, _ = evaluate_miou(pair.teacher, manifest.val, manifest,
                                     ignore=config.ignore)

    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        fh.write(",".join(METRICS_HEADER) + "\n")
        for row in rows:
            fh.write(row.to_csv() + "\n")
    hardness_path = out / "hardness.csv"
    with open(hardness_path, "w", newline="") as fh:
        fh.write(",".join(HARDNESS_HEADER) + "\n")
        for line in hardness_rows:
            fh.write(line + "\n")

    return RunResult(
        out_dir=str(out), total_steps=step, best_val_miou=best,
        final_val_miou_student=final_student,
        final_val_miou_teacher=final_teacher,
        metrics_path=str(metrics_path), hardness_path=str(hardness_path))
