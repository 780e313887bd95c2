"""Reverse-mode autodiff over numpy arrays.

A Tape records primitive operations in execution order while it is the
ambient context; backward() replays the list in reverse, so each node is
visited exactly once and no topological sort is needed.  Tensors default to
float32; verification code passes float64 arrays through unchanged.

Forward results are checked for finiteness after every primitive.  matmul is
computed with einsum and conv2d with per-image kernels so that a row's value
never depends on which other rows share the batch.
"""

import threading

import numpy as np

from . import kernels
from .errors import DetachedTape, NonFiniteResult, NotScalarLoss, ShapeMismatch

_local = threading.local()


def _tape_stack():
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """An ndarray plus grad bookkeeping.  Hash/eq are identity based."""

    __slots__ = ("data", "requires_grad", "tape", "node")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                arr = data
            else:
                arr = np.asarray(data, dtype=np.float32)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.tape = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def reshape(self, shape):
        return reshape(self, shape)

    def sum(self):
        return tensor_sum(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_const_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_const_like(other, self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive ops; context manager sets the ambient tape."""

    def __init__(self):
        self._ops = []
        self._closed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()
        return False

    def __len__(self):
        return len(self._ops)

    def reset(self):
        """Drop all recorded ops; pending losses become detached."""
        self._ops.clear()
        self._closed = True

    def backward(self, loss, wrt=None):
        if loss.tape is not self:
            raise DetachedTape("loss was not recorded on this tape")
        return backward(loss, wrt=wrt)


def _const_like(value, ref):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=ref.data.dtype))


def _record(out_data, inputs, backward_fn, name):
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteResult(f"{name} produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.tape = None
    out.node = None
    if out.requires_grad:
        tape = _active_tape()
        if tape is not None and not tape._closed:
            node = _Node(out, inputs, backward_fn)
            tape._ops.append(node)
            out.tape = tape
            out.node = node
    return out


def backward(loss, wrt=None):
    """Replay the loss's tape in reverse; return {leaf tensor: grad tensor}.

    Every requires_grad leaf that was used on the tape appears in the map;
    leaves with no path to the loss get exact zeros.  With wrt, only those
    leaves are tracked and gradients irrelevant to them are never computed.
    """
    if not isinstance(loss, Tensor):
        raise NotScalarLoss("backward needs a Tensor loss")
    if loss.data.shape != ():
        raise NotScalarLoss(f"loss must be a scalar, got shape {loss.data.shape}")
    tape = loss.tape
    if tape is None or tape._closed:
        raise DetachedTape("loss has no live tape (not recorded, or tape was reset)")

    relevant = None
    if wrt is not None:
        wrt = list(wrt)
        relevant = {id(t) for t in wrt}
        for node in tape._ops:
            if any(id(t) in relevant for t in node.inputs):
                relevant.add(id(node.out))

    grads = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for node in reversed(tape._ops):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        want = tuple(
            t.requires_grad and (relevant is None or id(t) in relevant)
            for t in node.inputs
        )
        if not any(want):
            continue
        for t, gt in zip(node.inputs, node.backward(g, want)):
            if gt is None:
                continue
            acc = grads.get(id(t))
            grads[id(t)] = gt if acc is None else acc + gt

    if wrt is None:
        leaves, seen = [], set()
        for node in tape._ops:
            for t in node.inputs:
                if t.node is None and t.requires_grad and id(t) not in seen:
                    seen.add(id(t))
                    leaves.append(t)
    else:
        leaves = wrt
    result = {}
    for t in leaves:
        g = grads.get(id(t))
        result[t] = Tensor(g if g is not None else np.zeros_like(t.data))
    return result


def _promote(a, b):
    dt = np.result_type(a.data.dtype, b.data.dtype)
    if a.data.dtype != dt:
        a = _cast(a, dt) if a.requires_grad else Tensor(a.data.astype(dt))
    if b.data.dtype != dt:
        b = _cast(b, dt) if b.requires_grad else Tensor(b.data.astype(dt))
    return a, b


def _cast(x, dt):
    def back(g, want):
        return (g.astype(x.data.dtype),)

    return _record(x.data.astype(dt), (x,), back, "cast")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(a, b, name):
    if not isinstance(a, Tensor):
        a = _const_like(a, b)
    if not isinstance(b, Tensor):
        b = _const_like(b, a)
    a, b = _promote(a, b)
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeMismatch(f"{name}: shapes {a.data.shape} and {b.data.shape} do not broadcast")
    return a, b


def add(a, b):
    a, b = _binary(a, b, "add")

    def back(g, want):
        ga = _unbroadcast(g, a.data.shape) if want[0] else None
        gb = _unbroadcast(g, b.data.shape) if want[1] else None
        return ga, gb

    return _record(a.data + b.data, (a, b), back, "add")


def sub(a, b):
    a, b = _binary(a, b, "sub")

    def back(g, want):
        ga = _unbroadcast(g, a.data.shape) if want[0] else None
        gb = _unbroadcast(-g, b.data.shape) if want[1] else None
        return ga, gb

    return _record(a.data - b.data, (a, b), back, "sub")


def mul(a, b):
    a, b = _binary(a, b, "mul")

    def back(g, want):
        ga = _unbroadcast(g * b.data, a.data.shape) if want[0] else None
        gb = _unbroadcast(g * a.data, b.data.shape) if want[1] else None
        return ga, gb

    return _record(a.data * b.data, (a, b), back, "mul")


def div(a, b):
    a, b = _binary(a, b, "div")

    def back(g, want):
        ga = _unbroadcast(g / b.data, a.data.shape) if want[0] else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape) if want[1] else None
        return ga, gb

    return _record(a.data / b.data, (a, b), back, "div")


def matmul(a, b):
    """2-D by 2-D product, row-stable (einsum, not BLAS)."""
    a, b = _promote(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")

    def back(g, want):
        ga = np.einsum("mn,cn->mc", g, b.data) if want[0] else None
        gb = np.einsum("mc,mn->cn", a.data, g) if want[1] else None
        return ga, gb

    return _record(np.einsum("mc,cn->mn", a.data, b.data), (a, b), back, "matmul")


def conv2d(x, w, stride=1, padding=0):
    """Cross-correlation, NCHW by OCHW, zero padding, stride 1 or 2."""
    if stride not in (1, 2):
        raise ShapeMismatch(f"conv2d: stride must be 1 or 2, got {stride}")
    if padding < 0:
        raise ShapeMismatch("conv2d: padding must be >= 0")
    x, w = _promote(x, w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatch(f"conv2d: need 4-d input and kernel, got {x.data.shape}, {w.data.shape}")
    bsz, c, h, wd = x.data.shape
    o, cw, kh, kw = w.data.shape
    if cw != c:
        raise ShapeMismatch(f"conv2d: channel mismatch, input {c} vs kernel {cw}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeMismatch("conv2d: kernel larger than padded input")
    stride_, padding_ = int(stride), int(padding)

    def back(g, want):
        gx = kernels.conv2d_backward_input(g, w.data, stride_, padding_, h, wd) if want[0] else None
        gw = kernels.conv2d_backward_weight(g, x.data, kh, kw, stride_, padding_) if want[1] else None
        return gx, gw

    return _record(kernels.conv2d_forward(x.data, w.data, stride_, padding_), (x, w), back, "conv2d")


def relu(x):
    def back(g, want):
        return (g * (x.data > 0),)

    return _record(np.maximum(x.data, 0), (x,), back, "relu")


def global_avg_pool(x):
    """(B, C, H, W) -> (B, C) spatial mean."""
    if x.data.ndim != 4:
        raise ShapeMismatch(f"global_avg_pool: need 4-d input, got {x.data.shape}")
    area = x.data.shape[2] * x.data.shape[3]

    def back(g, want):
        return (np.broadcast_to((g / area)[:, :, None, None], x.data.shape),)

    return _record(x.data.mean(axis=(2, 3)), (x,), back, "global_avg_pool")


def affine_channel(x, scale, shift):
    """Per-channel y = x * scale + shift on NCHW; the frozen-norm form."""
    if x.data.ndim != 4:
        raise ShapeMismatch(f"affine_channel: need 4-d input, got {x.data.shape}")
    c = x.data.shape[1]
    if scale.data.shape != (c,) or shift.data.shape != (c,):
        raise ShapeMismatch(
            f"affine_channel: scale/shift must be ({c},), got {scale.data.shape}, {shift.data.shape}"
        )

    def back(g, want):
        gx = g * scale.data[None, :, None, None] if want[0] else None
        gs = np.einsum("bchw,bchw->c", g, x.data) if want[1] else None
        gb = g.sum(axis=(0, 2, 3)) if want[2] else None
        return gx, gs, gb

    out = x.data * scale.data[None, :, None, None] + shift.data[None, :, None, None]
    return _record(out, (x, scale, shift), back, "affine_channel")


def flatten(x):
    """(B, ...) -> (B, features)."""
    if x.data.ndim < 2:
        raise ShapeMismatch(f"flatten: need at least 2-d input, got {x.data.shape}")
    b = x.data.shape[0]
    return reshape(x, (b, -1))


def reshape(x, shape):
    old = x.data.shape

    def back(g, want):
        return (g.reshape(old),)

    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {old} as {shape}")
    return _record(out, (x,), back, "reshape")


def take_rows(x, idx):
    """Select rows by unique indices; backward scatters into zeros."""
    idx = np.asarray(idx, dtype=np.intp)

    def back(g, want):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _record(x.data[idx], (x,), back, "take_rows")


def tensor_sum(x):
    def back(g, want):
        return (np.broadcast_to(g, x.data.shape),)

    return _record(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), back, "sum")


def _rows(z, y, name):
    zd = z.data
    if zd.ndim == 1:
        zd = zd[None, :]
    elif zd.ndim != 2:
        raise ShapeMismatch(f"{name}: logits must be 1-d or 2-d, got {z.data.shape}")
    yd = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=zd.dtype)
    if yd.ndim == 1:
        yd = yd[None, :]
    if yd.shape != zd.shape:
        raise ShapeMismatch(f"{name}: labels shape {yd.shape} does not match logits {zd.shape}")
    if zd.shape[1] < 2:
        raise ShapeMismatch(f"{name}: need at least 2 classes, got {zd.shape[1]}")
    return zd, yd


def softmax_cross_entropy(z, y, reduction="mean"):
    """SCE against one-hot rows, log-sum-exp shifted.  y gets no gradient.

    reduction: "mean" | "sum" | "none"; 1-d logits always give a scalar.
    """
    zd, yd = _rows(z, y, "softmax_cross_entropy")
    one_d = z.data.ndim == 1
    if reduction not in ("mean", "sum", "none"):
        raise ValueError(f"unknown reduction {reduction!r}")
    m = zd.max(axis=1, keepdims=True)
    s = zd - m
    e = np.exp(s)
    tot = e.sum(axis=1, keepdims=True)
    rows = np.log(tot)[:, 0] - (s * yd).sum(axis=1)
    n = zd.shape[0]

    if one_d:
        out = np.asarray(rows[0], dtype=zd.dtype)
    elif reduction == "none":
        out = rows
    elif reduction == "sum":
        out = np.asarray(rows.sum(), dtype=zd.dtype)
    else:
        out = np.asarray(rows.mean(), dtype=zd.dtype)

    def back(g, want):
        p = e / tot
        delta = p - yd
        if one_d:
            gz = (delta * g).reshape(z.data.shape)
        elif reduction == "none":
            gz = delta * g[:, None]
        elif reduction == "sum":
            gz = delta * g
        else:
            gz = delta * (g / n)
        return (gz,)

    return _record(out, (z,), back, "softmax_cross_entropy")


def dl_margin_op(z, y):
    """sigma = true logit minus the best logit among the other classes.

    The max is taken with the true slot masked out, so a dominant true logit
    cannot stand in for the runner-up.  Differentiable through both slots.
    """
    zd, yd = _rows(z, y, "dl_margin")
    one_d = z.data.ndim == 1
    true_val = (zd * yd).sum(axis=1)
    masked = np.where(yd != 0, -np.inf, zd)
    j = masked.argmax(axis=1)
    n = zd.shape[0]
    sigma = true_val - masked[np.arange(n), j]
    out = np.asarray(sigma[0], dtype=zd.dtype) if one_d else sigma

    def back(g, want):
        e = np.zeros_like(zd)
        e[np.arange(n), j] = 1
        gz = (yd - e) * (np.asarray(g).reshape(-1, 1) if not one_d else g)
        return (gz.reshape(z.data.shape),)

    return _record(out, (z,), back, "dl_margin")


def finite_diff_gradient(f, x, h=1e-3):
    """Central-difference gradient of a scalar function, float64 throughout."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        g[idx] = (float(f(xp)) - float(f(xm))) / (2 * h)
    return g
