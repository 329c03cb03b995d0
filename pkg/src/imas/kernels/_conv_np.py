"""Pure-numpy convolution kernels (im2col + BLAS matmul).

This is the fallback backend; `imas.kernels` prefers the compiled Cython
twin when it is importable. Both implement the same contract:

    conv2d_forward(x, w, b, pad, stride)  -> y
    conv2d_backward(x, w, gout, pad, stride) -> (gx, gw, gb)

with NCHW batched arrays, square odd kernels, and symmetric zero padding.
"""

import numpy as np


def _im2col(x, k, pad, stride):
    # x: [B,C,H,W] -> cols [C*k*k, B*Ho*Wo], plus output spatial dims
    B, C, H, W = x.shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    if pad:
        xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:pad + H, pad:pad + W] = x
    else:
        xp = x
    cols = np.empty((C, k, k, B, Ho, Wo), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            patch = xp[:, :, ki:ki + stride * Ho:stride, kj:kj + stride * Wo:stride]
            cols[:, ki, kj] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(C * k * k, B * Ho * Wo), Ho, Wo


def conv2d_forward(x, w, b, pad, stride):
    B = x.shape[0]
    Cout = w.shape[0]
    k = w.shape[2]
    cols, Ho, Wo = _im2col(x, k, pad, stride)
    out = w.reshape(Cout, -1) @ cols          # [Cout, B*Ho*Wo]
    out += b[:, None]
    return out.reshape(Cout, B, Ho, Wo).transpose(1, 0, 2, 3).copy()


def conv2d_backward(x, w, gout, pad, stride):
    B, C, H, W = x.shape
    Cout = w.shape[0]
    k = w.shape[2]
    Ho, Wo = gout.shape[2], gout.shape[3]
    g = gout.transpose(1, 0, 2, 3).reshape(Cout, -1)
    cols, _, _ = _im2col(x, k, pad, stride)
    gw = (g @ cols.T).reshape(w.shape)
    gb = g.sum(axis=1)
    gcols = (w.reshape(Cout, -1).T @ g).reshape(C, k, k, B, Ho, Wo)
    gxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            gxp[:, :, ki:ki + stride * Ho:stride, kj:kj + stride * Wo:stride] += \
                gcols[:, ki, kj].transpose(1, 0, 2, 3)
    gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
    return np.ascontiguousarray(gx), gw, gb
