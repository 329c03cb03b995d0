# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels: C pack/unpack feeding BLAS sgemm/dgemm.

Same contract as the numpy twin (see _conv_np.py). The packing step writes
im2col columns with memcpy over contiguous row spans where stride allows,
and the matmuls go straight to the BLAS exposed by scipy, so the only
Python-level work per call is allocating the output buffers.
"""

import numpy as np

from libc.string cimport memcpy, memset
from scipy.linalg.cython_blas cimport dgemm, sgemm

ctypedef fused real:
    float
    double


cdef void _gemm_rm(bint ta, bint tb, real* A, real* B, real* C,
                   int m, int k, int n, int lda, int ldb,
                   real alpha, real beta) noexcept nogil:
    # Row-major C[m,n] = alpha*op(A)@op(B) + beta*C via Fortran C^T = op(B)^T op(A)^T.
    # ta/tb: nonzero transposes that operand.
    cdef char cta = 84 if ta else 78   # 'T' / 'N'
    cdef char ctb = 84 if tb else 78
    if real is float:
        sgemm(&ctb, &cta, &n, &m, &k, &alpha, B, &ldb, A, &lda, &beta, C, &n)
    else:
        dgemm(&ctb, &cta, &n, &m, &k, &alpha, B, &ldb, A, &lda, &beta, C, &n)


cdef void _pack_cols(const real* x, real* cols, Py_ssize_t B, Py_ssize_t C,
                     Py_ssize_t H, Py_ssize_t W, Py_ssize_t k, int pad, int stride,
                     Py_ssize_t Ho, Py_ssize_t Wo) noexcept nogil:
    # cols layout: [C*k*k, B*Ho*Wo] row-major
    cdef Py_ssize_t N = B * Ho * Wo
    cdef Py_ssize_t ci, ki, kj, bi, y, xo, iy, x0, x1, ix0
    cdef real* dst
    cdef const real* src
    for ci in range(C):
        for ki in range(k):
            for kj in range(k):
                dst = cols + ((ci * k + ki) * k + kj) * N
                for bi in range(B):
                    src = x + (bi * C + ci) * H * W
                    for y in range(Ho):
                        iy = y * stride + ki - pad
                        if iy < 0 or iy >= H:
                            memset(dst, 0, Wo * sizeof(real))
                            dst += Wo
                            continue
                        # valid xo range: 0 <= xo*stride + kj - pad < W
                        x0 = 0
                        if kj < pad:
                            x0 = (pad - kj + stride - 1) // stride
                        x1 = (W - 1 - kj + pad) // stride + 1
                        if x1 > Wo:
                            x1 = Wo
                        if x0 > 0:
                            memset(dst, 0, x0 * sizeof(real))
                        if x1 < Wo:
                            memset(dst + x1, 0, (Wo - x1) * sizeof(real))
                        ix0 = x0 * stride + kj - pad
                        if stride == 1:
                            memcpy(dst + x0, src + iy * W + ix0, (x1 - x0) * sizeof(real))
                        else:
                            for xo in range(x0, x1):
                                dst[xo] = src[iy * W + ix0 + (xo - x0) * stride]
                        dst += Wo


cdef void _unpack_add(const real* cols, real* gx, Py_ssize_t B, Py_ssize_t C,
                      Py_ssize_t H, Py_ssize_t W, Py_ssize_t k, int pad, int stride,
                      Py_ssize_t Ho, Py_ssize_t Wo) noexcept nogil:
    # col2im: gx[b,c,iy,ix] += cols[(c,ki,kj),(b,y,xo)]
    cdef Py_ssize_t N = B * Ho * Wo
    cdef Py_ssize_t ci, ki, kj, bi, y, xo, iy, x0, x1, ix0
    cdef const real* srcr
    cdef real* dstp
    for ci in range(C):
        for ki in range(k):
            for kj in range(k):
                srcr = cols + ((ci * k + ki) * k + kj) * N
                for bi in range(B):
                    dstp = gx + (bi * C + ci) * H * W
                    for y in range(Ho):
                        iy = y * stride + ki - pad
                        if iy < 0 or iy >= H:
                            srcr += Wo
                            continue
                        x0 = 0
                        if kj < pad:
                            x0 = (pad - kj + stride - 1) // stride
                        x1 = (W - 1 - kj + pad) // stride + 1
                        if x1 > Wo:
                            x1 = Wo
                        ix0 = x0 * stride + kj - pad
                        if stride == 1:
                            for xo in range(x0, x1):
                                dstp[iy * W + ix0 + xo - x0] += srcr[xo]
                        else:
                            for xo in range(x0, x1):
                                dstp[iy * W + ix0 + (xo - x0) * stride] += srcr[xo]
                        srcr += Wo


def conv2d_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w, real[::1] b,
                   int pad, int stride):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Cout = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    cdef Py_ssize_t N = B * Ho * Wo, K = C * k * k, HW = Ho * Wo
    dtype = np.float32 if real is float else np.float64
    cols_np = np.empty(K * N, dtype=dtype)
    tmp_np = np.empty(Cout * N, dtype=dtype)
    out_np = np.empty((B, Cout, Ho, Wo), dtype=dtype)
    cdef real[::1] cols = cols_np, tmp = tmp_np
    cdef real[:, :, :, ::1] out = out_np
    cdef Py_ssize_t co, bi, i
    cdef real bv
    cdef real* dst
    cdef const real* src
    with nogil:
        _pack_cols(&x[0, 0, 0, 0], &cols[0], B, C, H, W, k, pad, stride, Ho, Wo)
        _gemm_rm(0, 0, &w[0, 0, 0, 0], &cols[0], &tmp[0],
                 <int>Cout, <int>K, <int>N, <int>K, <int>N, <real>1.0, <real>0.0)
        # tmp is [Cout, B*HW]; transpose to [B, Cout, HW] fused with the bias add
        for co in range(Cout):
            bv = b[co]
            for bi in range(B):
                src = &tmp[0] + (co * B + bi) * HW
                dst = &out[0, 0, 0, 0] + (bi * Cout + co) * HW
                for i in range(HW):
                    dst[i] = src[i] + bv
    return out_np


def conv2d_backward(real[:, :, :, ::1] x, real[:, :, :, ::1] w,
                    real[:, :, :, ::1] gout, int pad, int stride):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Cout = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t Ho = gout.shape[2], Wo = gout.shape[3]
    cdef Py_ssize_t N = B * Ho * Wo, K = C * k * k, HW = Ho * Wo
    dtype = np.float32 if real is float else np.float64
    cols_np = np.empty(K * N, dtype=dtype)
    gmat_np = np.empty(Cout * N, dtype=dtype)
    gcols_np = np.empty(K * N, dtype=dtype)
    gx_np = np.zeros((B, C, H, W), dtype=dtype)
    gw_np = np.empty((Cout, C, k, k), dtype=dtype)
    gb_np = np.empty(Cout, dtype=dtype)
    cdef real[::1] cols = cols_np, gmat = gmat_np, gcols = gcols_np
    cdef real[:, :, :, ::1] gx = gx_np, gw = gw_np
    cdef real[::1] gb = gb_np
    cdef Py_ssize_t co, bi, i
    cdef real acc
    cdef real* dst
    cdef const real* src
    with nogil:
        # transpose gout [B,Cout,Ho,Wo] -> [Cout, B*HW]; bias grad along the way
        for co in range(Cout):
            acc = 0
            for bi in range(B):
                src = &gout[0, 0, 0, 0] + (bi * Cout + co) * HW
                dst = &gmat[0] + (co * B + bi) * HW
                memcpy(dst, src, HW * sizeof(real))
                for i in range(HW):
                    acc += src[i]
            gb[co] = acc
        _pack_cols(&x[0, 0, 0, 0], &cols[0], B, C, H, W, k, pad, stride, Ho, Wo)
        # gw [Cout,K] = gmat [Cout,N] @ cols^T [N,K]
        _gemm_rm(0, 1, &gmat[0], &cols[0], &gw[0, 0, 0, 0],
                 <int>Cout, <int>N, <int>K, <int>N, <int>N, <real>1.0, <real>0.0)
        # gcols [K,N] = w^T [K,Cout] @ gmat [Cout,N]
        _gemm_rm(1, 0, &w[0, 0, 0, 0], &gmat[0], &gcols[0],
                 <int>K, <int>Cout, <int>N, <int>K, <int>N, <real>1.0, <real>0.0)
        _unpack_add(&gcols[0], &gx[0, 0, 0, 0], B, C, H, W, k, pad, stride, Ho, Wo)
    return gx_np, gw_np, gb_np
