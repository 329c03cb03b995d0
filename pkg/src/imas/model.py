"""Encoder-decoder segmentation net and the student/teacher pair.

The network is deliberately small: four encoder convs taking channels
3 -> 16 -> 32 -> 64 -> 64 with two stride-2 downsamples, then two
nearest-upsample+conv refinement stages mirroring the downsamples, and a
1x1 classification head. Plain conv+ReLU throughout —
no normalization layers, so the teacher's EMA weights are an exact convex
trail of student weights with no statistics to keep in sync.

The teacher never receives gradients: its forwards run under ``no_grad`` and
its parameters are updated only by ``ema_update`` (or by an explicit mirror
copy in purely-supervised training).
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError
from .streams import substream

# (out_ch, in_ch, kernel, pad, stride, upsample_before)
_PLAN = (
    (16, 3, 3, 1, 1, 1),
    (32, 16, 3, 1, 2, 1),
    (64, 32, 3, 1, 2, 1),
    (64, 64, 3, 1, 1, 1),
    (32, 64, 3, 1, 1, 2),
    (16, 32, 3, 1, 1, 2),
)

CHECKPOINT_MAGIC = b"IMAS"
CHECKPOINT_VERSION = 1


class SegNet:
    """Fixed-topology fully-convolutional net producing [K,H,W] logits."""

    def __init__(self, num_classes, dtype=np.float32):
        if num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {num_classes}")
        self.num_classes = int(num_classes)
        self.dtype = np.dtype(dtype)
        self._layers = list(_PLAN) + [(self.num_classes, 16, 1, 0, 1, 1)]
        self.weights = []
        self.biases = []
        for out_ch, in_ch, k, _pad, _stride, _up in self._layers:
            self.weights.append(T.Tensor(
                np.zeros((out_ch, in_ch, k, k), dtype=self.dtype),
                requires_grad=True))
            self.biases.append(T.Tensor(
                np.zeros(out_ch, dtype=self.dtype), requires_grad=True))

    @property
    def params(self):
        """Flat parameter list in layer order: w0, b0, w1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def param_count(self):
        return sum(p.data.size for p in self.params)

    def init_he(self, rng):
        """He-normal weights (fan-in), zero biases."""
        for w, b in zip(self.weights, self.biases):
            fan_in = w.data[0].size
            std = np.sqrt(2.0 / fan_in)
            w.data[...] = rng.standard_normal(w.data.shape) * std
            b.data[...] = 0.0

    def forward(self, x, train_mode=False):
        """Logits for a [3,H,W] image or [B,3,H,W] batch; H,W divisible by 4."""
        h, w = x.shape[-2], x.shape[-1]
        if h % 4 or w % 4:
            raise DimensionError(
                f"spatial dims must be divisible by 4, got {h}x{w}")
        del train_mode  # no stochastic layers; flag kept for interface parity
        out = x
        for (ws, bs, spec) in zip(self.weights, self.biases, self._layers):
            _oc, _ic, _k, pad, stride, up = spec
            if up > 1:
                out = T.upsample_nearest(out, up)
            out = T.conv2d(out, ws, bs, pad=pad, stride=stride)
            if spec is not self._layers[-1]:
                out = T.relu(out)
        return out

    def set_params_from(self, other):
        if len(other.params) != len(self.params):
            raise ConfigError("parameter structure mismatch")
        for dst, src in zip(self.params, other.params):
            if dst.data.shape != src.data.shape:
                raise ConfigError("parameter structure mismatch")
            dst.data[...] = src.data


@dataclass
class ModelPair:
    """Student (trainable) and teacher (EMA shadow) with coupling factor."""

    student: SegNet
    teacher: SegNet
    alpha: float = 0.996


def init_pair(num_classes, seed, alpha=0.996, dtype=np.float32):
    """Seeded student, teacher starting as its exact copy."""
    if not 0 < alpha < 1:
        raise ConfigError(f"alpha must lie in (0,1), got {alpha}")
    student = SegNet(num_classes, dtype=dtype)
    student.init_he(substream(seed, "init"))
    teacher = SegNet(num_classes, dtype=dtype)
    teacher.set_params_from(student)
    return ModelPair(student=student, teacher=teacher, alpha=float(alpha))


def ema_update(pair):
    """theta_t <- alpha * theta_t + (1 - alpha) * theta_s, elementwise."""
    sp, tp = pair.student.params, pair.teacher.params
    if len(sp) != len(tp):
        raise ConfigError("student/teacher structure mismatch")
    a = pair.alpha
    for s, t in zip(sp, tp):
        if s.data.shape != t.data.shape:
            raise ConfigError("student/teacher structure mismatch")
        t.data *= a
        t.data += (1.0 - a) * s.data
    return pair.teacher


def mirror_student(pair):
    """Copy student weights into the teacher (supervised-mode coupling)."""
    pair.teacher.set_params_from(pair.student)
    return pair.teacher


# -- checkpoints -------------------------------------------------------------
#
# Little-endian binary layout:
#   magic "IMAS" | version u32 | num_classes u32 | per-net param count u64
#   student params f32 (layer order, C-order raveled) | teacher params f32
#   step_count u64 | total_steps u64 | base_lr f64 | momentum f64 | poly_power f64
#
# Optimizer velocity is not stored; a resumed run restarts momentum from zero.

def save_checkpoint(path, pair, opt_state):
    count = pair.student.param_count()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIQ", CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                             pair.student.num_classes, count))
        for net in (pair.student, pair.teacher):
            for p in net.params:
                fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        fh.write(struct.pack("<QQddd", opt_state.step_count,
                             opt_state.total_steps, opt_state.base_lr,
                             opt_state.momentum, opt_state.poly_power))


def load_checkpoint(path, alpha=0.996, dtype=np.float32):
    """Rebuild a ModelPair + OptimizerState from a checkpoint file."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(struct.calcsize("<4sIIQ"))
            magic, version, k, count = struct.unpack("<4sIIQ", head)
            if magic != CHECKPOINT_MAGIC:
                raise DataError(f"{path}: not a checkpoint (bad magic {magic!r})")
            if version != CHECKPOINT_VERSION:
                raise DataError(f"{path}: unsupported checkpoint version {version}")
            pair = ModelPair(SegNet(k, dtype=dtype), SegNet(k, dtype=dtype),
                             alpha=float(alpha))
            if pair.student.param_count() != count:
                raise DataError(
                    f"{path}: stores {count} parameters per net, expected "
                    f"{pair.student.param_count()} for K={k}")
            for net in (pair.student, pair.teacher):
                for p in net.params:
                    raw = fh.read(4 * p.data.size)
                    if len(raw) != 4 * p.data.size:
                        raise DataError(f"{path}: truncated parameter block")
                    p.data[...] = np.frombuffer(raw, dtype="<f4").reshape(p.data.shape)
            tail = fh.read(struct.calcsize("<QQddd"))
            if len(tail) != struct.calcsize("<QQddd"):
                raise DataError(f"{path}: truncated optimizer block")
            step, total, base_lr, momentum, poly = struct.unpack("<QQddd", tail)
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    opt = T.init_optimizer(pair.student.params, base_lr=base_lr,
                           total_steps=total, momentum=momentum,
                           poly_power=poly)
    opt.step_count = step
    return pair, opt
