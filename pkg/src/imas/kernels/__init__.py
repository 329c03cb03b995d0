"""Convolution kernel backends.

Two interchangeable implementations of the conv2d forward/backward pair:

* ``_conv_cy`` — Cython + BLAS, built at install time when a toolchain is
  available (the fast path, roughly 1.1–1.5x the numpy one on the shapes
  this package trains at);
* ``_conv_np`` — pure numpy im2col, always available.

Selection happens once at import, controlled by the ``IMAS_KERNELS``
environment variable: ``auto`` (default — compiled if importable),
``cython`` (require the extension, raise if missing), or ``numpy``.
``BACKEND`` records the choice. All other modules call through the
wrappers below, which also normalize dtype/contiguity so the Cython
fused-type dispatch always sees matching C-contiguous arrays.
"""

import os

import numpy as np

_choice = os.environ.get("IMAS_KERNELS", "auto").strip().lower()
if _choice not in ("auto", "cython", "numpy"):
    raise ImportError(
        f"IMAS_KERNELS={_choice!r} not understood (use auto, cython, or numpy)")

_impl = None
BACKEND = None
if _choice in ("auto", "cython"):
    try:
        from . import _conv_cy as _impl
        BACKEND = "cython"
    except ImportError:
        if _choice == "cython":
            raise ImportError(
                "IMAS_KERNELS=cython but the compiled extension is not "
                "importable; reinstall with a C toolchain or use auto/numpy")
if _impl is None:
    from . import _conv_np as _impl
    BACKEND = "numpy"


def _as4d(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    if a.ndim != 4:
        raise ValueError(f"expected a 4-d NCHW array, got shape {a.shape}")
    return a


def conv2d_forward(x, w, b, pad, stride):
    """Cross-correlate a [B,Cin,H,W] batch with [Cout,Cin,k,k] weights."""
    dtype = x.dtype
    x = _as4d(x, dtype)
    w = _as4d(w, dtype)
    b = np.ascontiguousarray(b, dtype=dtype)
    return _impl.conv2d_forward(x, w, b, int(pad), int(stride))


def conv2d_backward(x, w, gout, pad, stride):
    """Gradients of conv2d_forward w.r.t. (input, weight, bias)."""
    dtype = x.dtype
    x = _as4d(x, dtype)
    w = _as4d(w, dtype)
    gout = _as4d(gout, dtype)
    return _impl.conv2d_backward(x, w, gout, int(pad), int(stride))
