"""Conv kernel dispatch: compiled extension when available, numpy otherwise.

The backend is chosen once at import.  Set LATENTLAB_PURE_KERNELS=1 to force
the numpy path; tests and the benchmark switch explicitly via set_backend().
"""

import os

import numpy as np

from . import pure

_IMPLS = {"pure": pure}

try:
    from . import _conv
    _IMPLS["compiled"] = _conv
except ImportError:
    _conv = None

if os.environ.get("LATENTLAB_PURE_KERNELS") == "1" or _conv is None:
    _active = "pure"
else:
    _active = "compiled"


def available_backends():
    return sorted(_IMPLS)


def default_backend():
    """Backend the import-time policy would pick."""
    if os.environ.get("LATENTLAB_PURE_KERNELS") == "1" or _conv is None:
        return "pure"
    return "compiled"


def backend():
    return _active


def set_backend(name):
    global _active
    if name not in _IMPLS:
        raise ValueError(f"unknown kernel backend {name!r}; have {available_backends()}")
    _active = name


def _prep(*arrays):
    return [np.ascontiguousarray(a) for a in arrays]


def conv2d_forward(x, w, stride, padding):
    x, w = _prep(x, w)
    return _IMPLS[_active].conv2d_forward(x, w, stride, padding)


def conv2d_backward_input(grad, w, stride, padding, height, width):
    grad, w = _prep(grad, w)
    return _IMPLS[_active].conv2d_backward_input(grad, w, stride, padding, height, width)


def conv2d_backward_weight(grad, x, kh, kw, stride, padding):
    grad, x = _prep(grad, x)
    return _IMPLS[_active].conv2d_backward_weight(grad, x, kh, kw, stride, padding)
