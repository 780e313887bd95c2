"""Pure numpy conv kernels (im2col + per-image GEMM).

Fallback for environments without the compiled extension.  Forward and
backward-input are computed with one GEMM per image so that results do not
depend on how images are batched together.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _im2col(x, kh, kw, stride, padding):
    b, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    sb, sc, sh, sw = x.strides
    view = as_strided(
        x,
        shape=(b, c, kh, kw, oh, ow),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride),
    )
    return view.reshape(b, c * kh * kw, oh * ow), oh, ow


def conv2d_forward(x, w, stride, padding):
    o, c, kh, kw = w.shape
    cols, oh, ow = _im2col(x, kh, kw, stride, padding)
    out = np.matmul(w.reshape(o, -1), cols)
    return out.reshape(x.shape[0], o, oh, ow)


def conv2d_backward_input(grad, w, stride, padding, height, width):
    b, o, oh, ow = grad.shape
    _, c, kh, kw = w.shape
    gcols = np.matmul(w.reshape(o, -1).T, grad.reshape(b, o, oh * ow))
    gcols = gcols.reshape(b, c, kh, kw, oh, ow)
    hp, wp = height + 2 * padding, width + 2 * padding
    gx = np.zeros((b, c, hp, wp), dtype=grad.dtype)
    for u in range(kh):
        for v in range(kw):
            gx[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride] += gcols[:, :, u, v]
    if padding:
        gx = gx[:, :, padding : padding + height, padding : padding + width]
    return np.ascontiguousarray(gx)


def conv2d_backward_weight(grad, x, kh, kw, stride, padding):
    b, o, oh, ow = grad.shape
    cols, _, _ = _im2col(x, kh, kw, stride, padding)
    gw = np.matmul(grad.reshape(b, o, oh * ow), cols.transpose(0, 2, 1)).sum(axis=0)
    return gw.reshape(o, x.shape[1], kh, kw)
