"""Minimal reverse-mode autodiff over numpy arrays.

Just enough machinery for a small convolutional segmentation network:
tensors wrap a numpy buffer plus an optional gradient buffer, every op
returns a fresh tensor carrying a backward closure, and ``Tensor.backward``
replays the closures in reverse topological order. The graph is rebuilt on
every forward pass and garbage-collected with its tensors — there is no
retained tape and no higher-order differentiation.

Default precision is float32; pass float64 arrays to run the identical code
path at double precision (the gradient-check tests do). Reductions always
accumulate in float64 before casting back, which keeps finite-difference
checks meaningful at float32.

Setting ``IMAS_CHECK_FINITE=1`` makes every op assert that its output is
finite (too slow for the training hot path, used by tests); ``softmax_channels``
checks its input unconditionally because non-finite logits are the canonical
way a diverging run announces itself.
"""

import contextlib
import os
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ArgumentError, DimensionError, NumericError

_grad_enabled = True
_CHECK_FINITE = os.environ.get("IMAS_CHECK_FINITE", "0") == "1"

LOG_CLAMP = 1e-12


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (teacher forwards, eval)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    """A dense array with an optional gradient and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            raise ArgumentError("wrap raw arrays, not tensors")
        self.data = np.asarray(data, dtype=dtype)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- bookkeeping ------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, grad={self.grad is not None})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- backward ---------------------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise ArgumentError("backward() starts from a scalar loss")
        order, seen = [], set()
        stack = [(self, iter(self._parents))]
        seen.add(id(self))
        while stack:
            node, it = stack[-1]
            advanced = False
            for p in it:
                if id(p) not in seen and p.requires_grad:
                    seen.add(id(p))
                    stack.append((p, iter(p._parents)))
                    advanced = True
                    break
            if not advanced:
                order.append(node)
                stack.pop()
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)
                node._backward = None  # free closures as we go


def _result(data, parents, backward):
    """Wire up an op output; skips the graph when grads are off/unneeded."""
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericError("operation produced non-finite values")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# -- network ops -----------------------------------------------------------

def conv2d(x, w, b, pad=1, stride=1):
    """Batched 2-d cross-correlation; accepts [C,H,W] or [B,C,H,W] input."""
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d wants NCHW input and OIHW weights, "
                             f"got {x.shape} and {w.shape}")
    k = w.shape[2]
    if k != w.shape[3] or k % 2 == 0:
        raise DimensionError(f"square odd kernels only, got {w.shape}")
    if xd.shape[1] != w.shape[1]:
        raise DimensionError(f"input has {xd.shape[1]} channels, "
                             f"weights expect {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise DimensionError(f"bias shape {b.shape} vs {w.shape[0]} filters")
    if pad < 0 or stride < 1:
        raise ArgumentError("pad must be >= 0 and stride >= 1")
    for dim in (xd.shape[2], xd.shape[3]):
        # floor output size, standard conv semantics; the window must fit once
        if dim + 2 * pad < k:
            raise DimensionError(
                f"spatial size {dim} too small for k={k} with pad={pad}")
    y = kernels.conv2d_forward(xd, w.data, b.data, pad, stride)
    if squeeze:
        y = y[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        gx, gw, gb = kernels.conv2d_backward(xd, w.data, np.ascontiguousarray(g4),
                                             pad, stride)
        if x.requires_grad:
            x._accumulate(gx[0] if squeeze else gx)
        if w.requires_grad:
            w._accumulate(gw)
        if b.requires_grad:
            b._accumulate(gb)

    return _result(y, (x, w, b), backward)


def relu(x):
    y = np.maximum(x.data, 0)

    def backward(g):
        x._accumulate(g * (x.data > 0))

    return _result(y, (x,), backward)


def upsample_nearest(x, factor):
    """Replicate each pixel factor x factor; gradient sums over each block."""
    if not isinstance(factor, int) or factor < 1:
        raise ArgumentError(f"upsample factor must be a positive integer, got {factor}")
    if factor == 1:
        y = x.data.copy()

        def backward_id(g):
            x._accumulate(g)

        return _result(y, (x,), backward_id)
    y = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def backward(g):
        lead = g.shape[:-2]
        h, w = x.data.shape[-2], x.data.shape[-1]
        gr = g.reshape(lead + (h, factor, w, factor)).sum(axis=(-3, -1))
        x._accumulate(gr)

    return _result(y, (x,), backward)


def softmax_channels(x):
    """Per-pixel softmax over the channel axis of [K,H,W] or [B,K,H,W]."""
    ax = x.data.ndim - 3
    if x.data.ndim not in (3, 4) or x.data.shape[ax] < 2:
        raise DimensionError(f"softmax_channels wants [K>=2,H,W] maps, got {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("non-finite logits")
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=ax, keepdims=True)
        x._accumulate(s * (g - dot))

    return _result(s, (x,), backward)


# -- pointwise / reduction ops ----------------------------------------------

def add(x, y):
    if x.shape != y.shape:
        raise DimensionError(f"add shape mismatch: {x.shape} vs {y.shape}")
    out = x.data + y.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g)
        if y.requires_grad:
            y._accumulate(g)

    return _result(out, (x, y), backward)


def scale_by(x, c):
    """Multiply by a constant scalar or broadcastable array (no grad into c)."""
    c = np.asarray(c, dtype=x.dtype)
    out = x.data * c
    if out.shape != x.data.shape:
        raise DimensionError(
            f"scale factor of shape {c.shape} would broadcast {x.shape} up")

    def backward(g):
        x._accumulate(g * c)

    return _result(out, (x,), backward)


def log_clamped(x):
    """log(max(x, 1e-12)); zero gradient where the clamp is active."""
    clamped = np.maximum(x.data, LOG_CLAMP)
    out = np.log(clamped)

    def backward(g):
        gx = g / clamped
        gx[x.data < LOG_CLAMP] = 0.0
        x._accumulate(gx)

    return _result(out, (x,), backward)


def gather_class(p, index):
    """Pick one channel per pixel: out[..., h, w] = p[..., index[h,w], h, w].

    ``index`` is an integer array matching p's spatial (and batch) dims and
    must hold valid class ids — callers mask ignore pixels out beforehand.
    """
    idx = np.asarray(index)
    ax = p.data.ndim - 3
    if idx.shape != p.data.shape[:ax] + p.data.shape[ax + 1:]:
        raise DimensionError(f"index shape {idx.shape} does not match {p.shape}")
    k = p.data.shape[ax]
    if idx.min() < 0 or idx.max() >= k:
        raise ArgumentError(f"class ids must lie in [0,{k}), got "
                            f"[{idx.min()},{idx.max()}]")
    expanded = np.expand_dims(idx, ax)
    out = np.take_along_axis(p.data, expanded, axis=ax).squeeze(ax)

    def backward(g):
        gp = np.zeros_like(p.data)
        np.put_along_axis(gp, expanded, np.expand_dims(g, ax), axis=ax)
        p._accumulate(gp)

    return _result(out, (p,), backward)


def sum_all(x):
    out = np.asarray(np.sum(x.data, dtype=np.float64), dtype=x.dtype)

    def backward(g):
        x._accumulate(np.broadcast_to(g, x.data.shape))

    return _result(out, (x,), backward)


def sum_hw(x):
    """Sum over the two trailing spatial axes."""
    out = np.sum(x.data, axis=(-2, -1), dtype=np.float64).astype(x.dtype)

    def backward(g):
        x._accumulate(np.broadcast_to(g[..., None, None], x.data.shape))

    return _result(out, (x,), backward)


def concat0(tensors):
    """Concatenate along axis 0 (gradient splits back)."""
    if not tensors:
        raise ArgumentError("nothing to concatenate")
    sizes = [t.shape[0] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=0)

    def backward(g):
        start = 0
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                t._accumulate(g[start:start + n])
            start += n

    return _result(out, tuple(tensors), backward)


def slice0(x, start, stop):
    """Slice along axis 0 (gradient scatters back into place)."""
    out = x.data[start:stop].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        x._accumulate(gx)

    return _result(out, (x,), backward)


def stack0(tensors):
    """Stack equal-shaped tensors into a new leading axis."""
    out = np.stack([t.data for t in tensors], axis=0)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(g[i])

    return _result(out, tuple(tensors), backward)


def cross_entropy_pixel(pred, target, pixel):
    """Cross entropy at one pixel of a [K,H,W] probability map.

    ``target`` is either a class id (hard label; the ignore id 255 makes the
    pixel contribute exactly zero) or a length-K distribution. Probabilities
    are clamped at 1e-12 inside the log.
    """
    if pred.data.ndim != 3:
        raise DimensionError(f"expected a [K,H,W] map, got {pred.shape}")
    i, j = pixel
    k = pred.shape[0]
    col = pred.data[:, i, j]
    soft = not np.isscalar(target) and np.asarray(target).ndim == 1
    if soft:
        t = np.asarray(target, dtype=np.float64)
        if t.shape != (k,):
            raise DimensionError(f"soft target length {t.shape} vs {k} classes")
    else:
        cls = int(target)
        if cls == 255:
            return Tensor(np.zeros((), dtype=pred.dtype))
        if not 0 <= cls < k:
            raise ArgumentError(f"target class {cls} outside [0,{k})")
        t = np.zeros(k)
        t[cls] = 1.0
    clamped = np.maximum(col.astype(np.float64), LOG_CLAMP)
    val = -np.sum(t * np.log(clamped))

    def backward(g):
        gp = np.zeros_like(pred.data)
        gcol = -t / clamped
        gcol[col < LOG_CLAMP] = 0.0
        gp[:, i, j] = (gcol * float(g)).astype(pred.dtype)
        pred._accumulate(gp)

    return _result(np.asarray(val, dtype=pred.dtype), (pred,), backward)


# -- optimizer ---------------------------------------------------------------

@dataclass
class OptimizerState:
    """SGD-with-momentum state plus the polynomial LR schedule."""

    velocity: list = field(repr=False)
    step_count: int = 0
    base_lr: float = 0.01
    total_steps: int = 1
    momentum: float = 0.9
    poly_power: float = 0.9


def init_optimizer(params, base_lr, total_steps, momentum=0.9, poly_power=0.9):
    if base_lr < 0:
        raise ArgumentError(f"base_lr must be >= 0, got {base_lr}")
    if total_steps < 1:
        raise ArgumentError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= momentum < 1:
        raise ArgumentError(f"momentum must lie in [0,1), got {momentum}")
    if poly_power <= 0:
        raise ArgumentError(f"poly_power must be positive, got {poly_power}")
    return OptimizerState(
        velocity=[np.zeros_like(p.data) for p in params],
        step_count=0, base_lr=float(base_lr), total_steps=int(total_steps),
        momentum=float(momentum), poly_power=float(poly_power))


def current_lr(state):
    frac = 1.0 - state.step_count / state.total_steps
    return state.base_lr * frac ** state.poly_power


def sgd_step(params, state, grads=None):
    """v <- m*v + g ; p <- p - lr*v, with lr on the polynomial decay schedule."""
    if state.step_count >= state.total_steps:
        raise ArgumentError("schedule exhausted: step_count == total_steps")
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params) or len(params) != len(state.velocity):
        raise DimensionError("params / grads / velocity lists disagree in length")
    lr = current_lr(state)
    for p, g, v in zip(params, grads, state.velocity):
        if g is None:
            raise ArgumentError("missing gradient; run backward() first")
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient shape {g.shape} vs param {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient; aborting the step")
        v *= state.momentum
        v += g
        p.data -= (lr * v).astype(p.data.dtype, copy=False)
    state.step_count += 1
    return state
