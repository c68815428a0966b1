# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled implementations of the hot kernels (convolution, max pooling).

Same contracts as _kernels_np: NCHW float64, explicit per-side padding,
zero padding for convolution, -inf for pooling, first-maximum tie routing.

Convolution loops are ordered (n, co, ci, tap, rows, cols) with the padding
bounds hoisted out of the two innermost loops, so the hot loops run over
contiguous output/input rows without branches.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND_NAME = "native"


cdef inline int _lo(int pad, int tap, int stride) nogil:
    cdef int d = pad - tap
    if d <= 0:
        return 0
    return (d + stride - 1) // stride


cdef inline int _hi(int extent, int pad, int tap, int stride, int out) nogil:
    # C division truncates toward zero: a negative numerator must yield an
    # empty range, not index 0
    cdef int num = extent - 1 + pad - tap
    if num < 0:
        return -1
    cdef int h = num // stride
    if h < out - 1:
        return h
    return out - 1


def conv2d_forward(cnp.ndarray[double, ndim=4] x,
                   cnp.ndarray[double, ndim=4] w,
                   cnp.ndarray[double, ndim=1] b,
                   int stride, pads):
    cdef int pt = pads[0], pb = pads[1], pl = pads[2], pr = pads[3]
    cdef int n = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef int cout = w.shape[0], k = w.shape[2]
    cdef int oh = (h + pt + pb - k) // stride + 1
    cdef int ow = (wd + pl + pr - k) // stride + 1
    cdef cnp.ndarray[double, ndim=4] y = np.empty((n, cout, oh, ow), dtype=np.float64)
    cdef double[:, :, :, ::1] xv = x
    cdef double[:, :, :, ::1] wv = w
    cdef double[::1] bv = b
    cdef double[:, :, :, ::1] yv = y
    cdef int ni, co, ci, i, j, oy, ox, iy, ibase
    cdef int oy_lo, oy_hi, ox_lo, ox_hi
    cdef double wtap, bias
    for ni in range(n):
        for co in range(cout):
            bias = bv[co]
            for oy in range(oh):
                for ox in range(ow):
                    yv[ni, co, oy, ox] = bias
            for ci in range(cin):
                for i in range(k):
                    oy_lo = _lo(pt, i, stride)
                    oy_hi = _hi(h, pt, i, stride, oh)
                    for j in range(k):
                        wtap = wv[co, ci, i, j]
                        if wtap == 0.0:
                            continue
                        ox_lo = _lo(pl, j, stride)
                        ox_hi = _hi(wd, pl, j, stride, ow)
                        for oy in range(oy_lo, oy_hi + 1):
                            iy = oy * stride - pt + i
                            ibase = -pl + j
                            for ox in range(ox_lo, ox_hi + 1):
                                yv[ni, co, oy, ox] += wtap * \
                                    xv[ni, ci, iy, ox * stride + ibase]
    return y


def conv2d_backward(cnp.ndarray[double, ndim=4] x,
                    cnp.ndarray[double, ndim=4] w,
                    int stride, pads,
                    cnp.ndarray[double, ndim=4] gy):
    cdef int pt = pads[0], pl = pads[2]
    cdef int n = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef int cout = w.shape[0], k = w.shape[2]
    cdef int oh = gy.shape[2], ow = gy.shape[3]
    cdef cnp.ndarray[double, ndim=4] gx = np.zeros((n, cin, h, wd), dtype=np.float64)
    cdef cnp.ndarray[double, ndim=4] gw = np.zeros((cout, cin, k, k), dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] gb = np.zeros(cout, dtype=np.float64)
    cdef double[:, :, :, ::1] xv = x
    cdef double[:, :, :, ::1] wv = w
    cdef double[:, :, :, ::1] gyv = gy
    cdef double[:, :, :, ::1] gxv = gx
    cdef double[:, :, :, ::1] gwv = gw
    cdef double[::1] gbv = gb
    cdef int ni, co, ci, i, j, oy, ox, iy, ibase
    cdef int oy_lo, oy_hi, ox_lo, ox_hi
    cdef double wtap, gval, acc, bacc
    for ni in range(n):
        for co in range(cout):
            bacc = 0.0
            for oy in range(oh):
                for ox in range(ow):
                    bacc += gyv[ni, co, oy, ox]
            gbv[co] += bacc
            for ci in range(cin):
                for i in range(k):
                    oy_lo = _lo(pt, i, stride)
                    oy_hi = _hi(h, pt, i, stride, oh)
                    for j in range(k):
                        wtap = wv[co, ci, i, j]
                        ox_lo = _lo(pl, j, stride)
                        ox_hi = _hi(wd, pl, j, stride, ow)
                        acc = 0.0
                        for oy in range(oy_lo, oy_hi + 1):
                            iy = oy * stride - pt + i
                            ibase = -pl + j
                            for ox in range(ox_lo, ox_hi + 1):
                                gval = gyv[ni, co, oy, ox]
                                acc += gval * xv[ni, ci, iy, ox * stride + ibase]
                                gxv[ni, ci, iy, ox * stride + ibase] += gval * wtap
                        gwv[co, ci, i, j] += acc
    return gx, gw, gb


def maxpool_forward(cnp.ndarray[double, ndim=4] x, int k, int stride, pads):
    cdef int pt = pads[0], pb = pads[1], pl = pads[2], pr = pads[3]
    cdef int n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef int oh = (h + pt + pb - k) // stride + 1
    cdef int ow = (wd + pl + pr - k) // stride + 1
    cdef cnp.ndarray[double, ndim=4] y = np.empty((n, c, oh, ow), dtype=np.float64)
    cdef cnp.ndarray[cnp.int32_t, ndim=4] arg = np.empty((n, c, oh, ow), dtype=np.int32)
    cdef double[:, :, :, ::1] xv = x
    cdef double[:, :, :, ::1] yv = y
    cdef cnp.int32_t[:, :, :, ::1] argv = arg
    cdef int ni, ci, oy, ox, i, j, iy, ix, best_idx
    cdef double best, v
    for ni in range(n):
        for ci in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    best = 0.0
                    best_idx = -1
                    for i in range(k):
                        iy = oy * stride - pt + i
                        if iy < 0 or iy >= h:
                            continue
                        for j in range(k):
                            ix = ox * stride - pl + j
                            if ix < 0 or ix >= wd:
                                continue
                            v = xv[ni, ci, iy, ix]
                            if best_idx < 0 or v > best:
                                best = v
                                best_idx = i * k + j
                    yv[ni, ci, oy, ox] = best
                    argv[ni, ci, oy, ox] = best_idx
    return y, arg


def maxpool_backward(x_shape, int k, int stride, pads,
                     cnp.ndarray[cnp.int32_t, ndim=4] arg,
                     cnp.ndarray[double, ndim=4] gy):
    cdef int pt = pads[0], pl = pads[2]
    cdef int n = x_shape[0], c = x_shape[1], h = x_shape[2], wd = x_shape[3]
    cdef int oh = gy.shape[2], ow = gy.shape[3]
    cdef cnp.ndarray[double, ndim=4] gx = np.zeros((n, c, h, wd), dtype=np.float64)
    cdef double[:, :, :, ::1] gxv = gx
    cdef double[:, :, :, ::1] gyv = gy
    cdef cnp.int32_t[:, :, :, ::1] argv = arg
    cdef int ni, ci, oy, ox, a, iy, ix
    for ni in range(n):
        for ci in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    a = argv[ni, ci, oy, ox]
                    iy = oy * stride - pt + a // k
                    ix = ox * stride - pl + a % k
                    gxv[ni, ci, iy, ix] += gyv[ni, ci, oy, ox]
    return gx
