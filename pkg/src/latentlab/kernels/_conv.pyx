# cython: boundscheck=False, wraparound=False, cdivision=True
"""Direct-loop conv kernels, float32 and float64.

Single-threaded on purpose: results must be deterministic and independent of
batch composition, so every output element is one fixed-order accumulation.
"""

import numpy as np

ctypedef fused floating:
    float
    double


def conv2d_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
                   int stride, int padding):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t o = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t ow = (wd + 2 * padding - kw) // stride + 1
    if floating is float:
        out_arr = np.zeros((b, o, oh, ow), dtype=np.float32)
    else:
        out_arr = np.zeros((b, o, oh, ow), dtype=np.float64)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t bi, oc, i, j, ci, u, v, ii, jj, i0, j0
    cdef floating acc
    with nogil:
        for bi in range(b):
            for oc in range(o):
                for i in range(oh):
                    i0 = i * stride - padding
                    for j in range(ow):
                        j0 = j * stride - padding
                        acc = 0
                        for ci in range(c):
                            for u in range(kh):
                                ii = i0 + u
                                if ii < 0 or ii >= h:
                                    continue
                                for v in range(kw):
                                    jj = j0 + v
                                    if 0 <= jj < wd:
                                        acc = acc + x[bi, ci, ii, jj] * w[oc, ci, u, v]
                        out[bi, oc, i, j] = acc
    return out_arr


def conv2d_backward_input(floating[:, :, :, ::1] grad, floating[:, :, :, ::1] w,
                          int stride, int padding, int height, int width):
    cdef Py_ssize_t b = grad.shape[0], o = grad.shape[1]
    cdef Py_ssize_t oh = grad.shape[2], ow = grad.shape[3]
    cdef Py_ssize_t c = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    if floating is float:
        gx_arr = np.zeros((b, c, height, width), dtype=np.float32)
    else:
        gx_arr = np.zeros((b, c, height, width), dtype=np.float64)
    cdef floating[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t bi, oc, i, j, ci, u, v, ii, jj, i0, j0
    cdef floating g
    with nogil:
        for bi in range(b):
            for oc in range(o):
                for i in range(oh):
                    i0 = i * stride - padding
                    for j in range(ow):
                        j0 = j * stride - padding
                        g = grad[bi, oc, i, j]
                        for ci in range(c):
                            for u in range(kh):
                                ii = i0 + u
                                if ii < 0 or ii >= height:
                                    continue
                                for v in range(kw):
                                    jj = j0 + v
                                    if 0 <= jj < width:
                                        gx[bi, ci, ii, jj] += g * w[oc, ci, u, v]
    return gx_arr


def conv2d_backward_weight(floating[:, :, :, ::1] grad, floating[:, :, :, ::1] x,
                           int kh, int kw, int stride, int padding):
    cdef Py_ssize_t b = grad.shape[0], o = grad.shape[1]
    cdef Py_ssize_t oh = grad.shape[2], ow = grad.shape[3]
    cdef Py_ssize_t c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    if floating is float:
        gw_arr = np.zeros((o, c, kh, kw), dtype=np.float32)
    else:
        gw_arr = np.zeros((o, c, kh, kw), dtype=np.float64)
    cdef floating[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t bi, oc, i, j, ci, u, v, ii, jj, i0, j0
    cdef floating g
    with nogil:
        for bi in range(b):
            for oc in range(o):
                for i in range(oh):
                    i0 = i * stride - padding
                    for j in range(ow):
                        j0 = j * stride - padding
                        g = grad[bi, oc, i, j]
                        for ci in range(c):
                            for u in range(kh):
                                ii = i0 + u
                                if ii < 0 or ii >= h:
                                    continue
                                for v in range(kw):
                                    jj = j0 + v
                                    if 0 <= jj < wd:
                                        gw[oc, ci, u, v] += g * x[bi, ci, ii, jj]
    return gw_arr
