# cython: language_level=3
"""Compiled im2col / col2im / 2x2 max-pool kernels on NHWC arrays."""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def im2col(floating[:, :, :, ::1] xp, int kh, int kw, int stride, int ho, int wo):
    cdef Py_ssize_t B = xp.shape[0], C = xp.shape[3]
    cdef Py_ssize_t b, i, j, ki, kj, c, row, col
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((B * ho * wo, kh * kw * C), dtype=dtype)
    cdef floating[:, ::1] cols = out
    with nogil:
        for b in range(B):
            for i in range(ho):
                for j in range(wo):
                    row = (b * ho + i) * wo + j
                    col = 0
                    for ki in range(kh):
                        for kj in range(kw):
                            for c in range(C):
                                cols[row, col] = xp[b, i * stride + ki, j * stride + kj, c]
                                col = col + 1
    return out


def col2im(floating[:, ::1] cols, int B, int hp, int wp, int C, int kh, int kw, int stride, int ho, int wo):
    cdef Py_ssize_t b, i, j, ki, kj, c, row, col
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((B, hp, wp, C), dtype=dtype)
    cdef floating[:, :, :, ::1] g = out
    with nogil:
        for b in range(B):
            for i in range(ho):
                for j in range(wo):
                    row = (b * ho + i) * wo + j
                    col = 0
                    for ki in range(kh):
                        for kj in range(kw):
                            for c in range(C):
                                g[b, i * stride + ki, j * stride + kj, c] += cols[row, col]
                                col = col + 1
    return out


def maxpool2x2_fwd(floating[:, :, :, ::1] x):
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1] // 2, W = x.shape[2] // 2, C = x.shape[3]
    cdef Py_ssize_t b, i, j, c, k, best_k
    cdef floating best, v
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((B, H, W, C), dtype=dtype)
    arg = np.empty((B, H, W, C), dtype=np.int8)
    cdef floating[:, :, :, ::1] o = out
    cdef cnp.int8_t[:, :, :, ::1] a = arg
    with nogil:
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    for c in range(C):
                        best = x[b, 2 * i, 2 * j, c]
                        best_k = 0
                        for k in range(1, 4):
                            v = x[b, 2 * i + k // 2, 2 * j + k % 2, c]
                            if v > best:
                                best = v
                                best_k = k
                        o[b, i, j, c] = best
                        a[b, i, j, c] = <cnp.int8_t>best_k
    return out, arg


def maxpool2x2_bwd(floating[:, :, :, ::1] grad, cnp.int8_t[:, :, :, ::1] arg, int h, int w):
    cdef Py_ssize_t B = grad.shape[0], H = grad.shape[1], W = grad.shape[2], C = grad.shape[3]
    cdef Py_ssize_t b, i, j, c, k
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((B, h, w, C), dtype=dtype)
    cdef floating[:, :, :, ::1] g = out
    with nogil:
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    for c in range(C):
                        k = arg[b, i, j, c]
                        g[b, 2 * i + k // 2, 2 * j + k % 2, c] = grad[b, i, j, c]
    return out
