"""Shared test helpers: finite-difference gradcheck and scalar oracles."""

import math

import numpy as np

from latentlab.tensor import Tape, Tensor, backward, finite_diff_gradient

# Central differences with h=1e-3 at float64 carry ~1e-7 truncation noise,
# hence the absolute floor under the 1e-4 relative criterion.
REL_TOL = 1e-4
ABS_FLOOR = 1e-6


def assert_close_to_fd(got, fd, context=""):
    got = np.asarray(got)
    fd = np.asarray(fd)
    diff = np.abs(got - fd)
    allow = np.maximum(REL_TOL * np.maximum(np.abs(got), np.abs(fd)), ABS_FLOOR)
    if not np.all(diff <= allow):
        worst = np.unravel_index(np.argmax(diff - allow), diff.shape)
        raise AssertionError(
            f"gradcheck failed {context} at {worst}: got {got[worst]!r}, fd {fd[worst]!r}"
        )


def check_grads(make_loss, arrays, h=1e-3, context=""):
    """Backprop vs central differences for a scalar-valued builder.

    make_loss takes one Tensor per input array and returns a scalar Tensor.
    All checking is done in float64.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape():
        loss = make_loss(*tensors)
    grads = backward(loss)
    for i, t in enumerate(tensors):
        def f(a, i=i):
            vals = list(arrays)
            vals[i] = a
            with Tape():
                return make_loss(*[Tensor(v) for v in vals]).item()

        fd = finite_diff_gradient(f, arrays[i], h=h)
        assert_close_to_fd(grads[t].data, fd, context=f"{context} input {i}")


def sce_scalar(z, true_idx):
    """Independent scalar softmax cross-entropy, math-library arithmetic."""
    z = [float(v) for v in z]
    m = max(z)
    total = sum(math.exp(v - m) for v in z)
    return math.log(total) - (z[true_idx] - m)


def margin_scalar(z, true_idx):
    """Independent margin: true logit minus best other logit."""
    z = [float(v) for v in z]
    others = [v for i, v in enumerate(z) if i != true_idx]
    return z[true_idx] - max(others)


def onehot(k, n, dtype=np.float64):
    e = np.zeros(n, dtype=dtype)
    e[k] = 1
    return e
