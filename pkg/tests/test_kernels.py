"""Backend parity: the compiled conv must match the pure fallback."""

import numpy as np
import pytest

from latentlab import kernels
from latentlab.tensor import Tape, Tensor, backward
from latentlab import tensor as T

from util import check_grads

pytestmark = pytest.mark.skipif(
    "compiled" not in kernels.available_backends(),
    reason="compiled extension not built",
)


def cases(rng, n):
    for _ in range(n):
        b = int(rng.integers(1, 4))
        cin = int(rng.integers(1, 4))
        cout = int(rng.integers(1, 4))
        k = int(rng.choice([1, 3]))
        stride = int(rng.choice([1, 2]))
        pad = int(rng.integers(0, 2))
        h = int(rng.integers(k + 1, 10))
        w = int(rng.integers(k + 1, 10))
        x = rng.normal(size=(b, cin, h, w))
        wgt = rng.normal(size=(cout, cin, k, k))
        yield x, wgt, stride, pad


def run_conv(backend, x, w, stride, pad, dtype):
    old = kernels.backend()
    kernels.set_backend(backend)
    try:
        with Tape():
            xt = Tensor(x.astype(dtype), requires_grad=True)
            wt = Tensor(w.astype(dtype), requires_grad=True)
            out = T.conv2d(xt, wt, stride=stride, padding=pad)
            loss = T.tensor_sum(T.mul(out, out))
            grads = backward(loss)
        return out.data, grads[xt].data, grads[wt].data
    finally:
        kernels.set_backend(old)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_forward_and_backward_parity(dtype):
    rng = np.random.default_rng(2024)
    tol = 1e-5 if dtype == np.float32 else 1e-12
    for x, w, stride, pad in cases(rng, 25):
        outs = {}
        for backend in ("pure", "compiled"):
            outs[backend] = run_conv(backend, x, w, stride, pad, dtype)
        for a, b in zip(outs["pure"], outs["compiled"]):
            assert np.abs(a - b).max() <= tol * max(1.0, np.abs(a).max())


def test_compiled_gradcheck():
    kernels.set_backend("compiled")
    try:
        rng = np.random.default_rng(5)
        for x, w, stride, pad in cases(rng, 5):
            check_grads(
                lambda xt, wt, s=stride, p=pad: T.tensor_sum(T.conv2d(xt, wt, stride=s, padding=p)),
                [x, w],
            )
    finally:
        kernels.set_backend(kernels.default_backend())


def test_batch_row_stability():
    # one image's conv result must not depend on its batch companions
    rng = np.random.default_rng(77)
    x = rng.normal(size=(5, 3, 9, 9))
    w = rng.normal(size=(4, 3, 3, 3))
    for backend in kernels.available_backends():
        kernels.set_backend(backend)
        try:
            full = kernels.conv2d_forward(x, w, 1, 1)
            solo = kernels.conv2d_forward(x[2:3], w, 1, 1)
            assert np.array_equal(full[2:3], solo)
        finally:
            kernels.set_backend(kernels.default_backend())
