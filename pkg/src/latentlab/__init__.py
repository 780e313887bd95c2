"""latentlab: latent-feature adversarial attacks on small convnets."""

__version__ = "0.1.0"

from . import errors, kernels
from .tensor import Tape, Tensor, backward, finite_diff_gradient
