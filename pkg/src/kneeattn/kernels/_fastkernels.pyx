# cython: language_level=3
"""Compiled convolution and pooling kernels.

Direct loops over typed memoryviews, parallelized with OpenMP where each
output cell is owned by exactly one thread, so results are deterministic
regardless of thread count. Contracts match kernels.pykernels.
"""

import numpy as np

cimport numpy as cnp
from cython.parallel cimport prange

cnp.import_array()


cdef inline Py_ssize_t _ceil_div(Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    return (a + b - 1) // b


def conv2d_forward(x, w, bias, int stride, bint same):
    cdef double[:, :, :, ::1] xv = x
    cdef double[:, :, :, ::1] wv = w
    cdef double[::1] bv = bias
    cdef Py_ssize_t B = xv.shape[0], H = xv.shape[1], W = xv.shape[2], Cin = xv.shape[3]
    cdef Py_ssize_t k = wv.shape[0], Cout = wv.shape[3]
    cdef Py_ssize_t OH, OW, pt, pl
    if same:
        OH = _ceil_div(H, stride)
        OW = _ceil_div(W, stride)
        pt = max((OH - 1) * stride + k - H, 0) // 2
        pl = max((OW - 1) * stride + k - W, 0) // 2
    else:
        OH = (H - k) // stride + 1
        OW = (W - k) // stride + 1
        pt = pl = 0

    y = np.empty((B, OH, OW, Cout))
    cdef double[:, :, :, ::1] yv = y
    cdef Py_ssize_t bo, b, oh, ow, kh, kw, ih, iw, ci, co
    cdef double xval

    for bo in prange(B * OH, nogil=True, schedule="static"):
        b = bo // OH
        oh = bo % OH
        for ow in range(OW):
            for co in range(Cout):
                yv[b, oh, ow, co] = bv[co]
            for kh in range(k):
                ih = oh * stride + kh - pt
                if ih < 0 or ih >= H:
                    continue
                for kw in range(k):
                    iw = ow * stride + kw - pl
                    if iw < 0 or iw >= W:
                        continue
                    for ci in range(Cin):
                        xval = xv[b, ih, iw, ci]
                        for co in range(Cout):
                            yv[b, oh, ow, co] = yv[b, oh, ow, co] + xval * wv[kh, kw, ci, co]
    return y


def conv2d_backward(x, w, gy, int stride, bint same):
    cdef double[:, :, :, ::1] xv = x
    cdef double[:, :, :, ::1] wv = w
    cdef double[:, :, :, ::1] gyv = gy
    cdef Py_ssize_t B = xv.shape[0], H = xv.shape[1], W = xv.shape[2], Cin = xv.shape[3]
    cdef Py_ssize_t k = wv.shape[0], Cout = wv.shape[3]
    cdef Py_ssize_t OH = gyv.shape[1], OW = gyv.shape[2]
    cdef Py_ssize_t pt = 0, pl = 0
    if same:
        pt = max((OH - 1) * stride + k - H, 0) // 2
        pl = max((OW - 1) * stride + k - W, 0) // 2

    gx = np.zeros((B, H, W, Cin))
    gw = np.zeros((k, k, Cin, Cout))
    gb = gy.sum(axis=(0, 1, 2))
    cdef double[:, :, :, ::1] gxv = gx
    cdef double[:, :, :, ::1] gwv = gw

    cdef Py_ssize_t b, oh, ow, kh, kw, ih, iw, ci, co, kki
    cdef double acc, xval

    # one thread per batch item: every gx cell is written by a single thread
    for b in prange(B, nogil=True, schedule="static"):
        for oh in range(OH):
            for kh in range(k):
                ih = oh * stride + kh - pt
                if ih < 0 or ih >= H:
                    continue
                for ow in range(OW):
                    for kw in range(k):
                        iw = ow * stride + kw - pl
                        if iw < 0 or iw >= W:
                            continue
                        for ci in range(Cin):
                            acc = 0.0
                            for co in range(Cout):
                                acc = acc + wv[kh, kw, ci, co] * gyv[b, oh, ow, co]
                            gxv[b, ih, iw, ci] += acc

    # one thread per (kh, kw, cin) row of the weight gradient
    for kki in prange(k * k * Cin, nogil=True, schedule="static"):
        kh = kki // (k * Cin)
        kw = (kki // Cin) % k
        ci = kki % Cin
        for b in range(B):
            for oh in range(OH):
                ih = oh * stride + kh - pt
                if ih < 0 or ih >= H:
                    continue
                for ow in range(OW):
                    iw = ow * stride + kw - pl
                    if iw < 0 or iw >= W:
                        continue
                    xval = xv[b, ih, iw, ci]
                    for co in range(Cout):
                        gwv[kh, kw, ci, co] += xval * gyv[b, oh, ow, co]
    return gx, gw, gb


def maxpool2d_forward(x, int k, int stride):
    cdef double[:, :, :, ::1] xv = x
    cdef Py_ssize_t B = xv.shape[0], H = xv.shape[1], W = xv.shape[2], C = xv.shape[3]
    cdef Py_ssize_t OH = (H - k) // stride + 1
    cdef Py_ssize_t OW = (W - k) // stride + 1

    y = np.empty((B, OH, OW, C))
    arg = np.empty((B, OH, OW, C), dtype=np.int64)
    cdef double[:, :, :, ::1] yv = y
    cdef cnp.int64_t[:, :, :, ::1] av = arg
    cdef Py_ssize_t bo, b, oh, ow, c, kh, kw
    cdef double best, v
    cdef Py_ssize_t besti

    for bo in prange(B * OH, nogil=True, schedule="static"):
        b = bo // OH
        oh = bo % OH
        for ow in range(OW):
            for c in range(C):
                best = xv[b, oh * stride, ow * stride, c]
                besti = 0
                for kh in range(k):
                    for kw in range(k):
                        v = xv[b, oh * stride + kh, ow * stride + kw, c]
                        if v > best:  # strict: first occurrence wins ties
                            best = v
                            besti = kh * k + kw
                yv[b, oh, ow, c] = best
                av[b, oh, ow, c] = besti
    return y, arg


def maxpool2d_backward(gy, arg, x_shape, int k, int stride):
    cdef double[:, :, :, ::1] gyv = gy
    cdef cnp.int64_t[:, :, :, ::1] av = arg
    cdef Py_ssize_t B = gyv.shape[0], OH = gyv.shape[1], OW = gyv.shape[2], C = gyv.shape[3]

    gx = np.zeros(x_shape)
    cdef double[:, :, :, ::1] gxv = gx
    cdef Py_ssize_t b, oh, ow, c
    cdef cnp.int64_t a

    for b in prange(B, nogil=True, schedule="static"):
        for oh in range(OH):
            for ow in range(OW):
                for c in range(C):
                    a = av[b, oh, ow, c]
                    gxv[b, oh * stride + a // k, ow * stride + a % k, c] += gyv[b, oh, ow, c]
    return gx
