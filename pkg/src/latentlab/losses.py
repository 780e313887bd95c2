"""Attack objectives: SCE, difference-of-logits margin, scaled surrogates.

All functions accept (K,) logits (scalar result) or (B, K) logits (per-row
result); callers sum rows when they need a scalar loss.  The margin sigma is
differentiated through by default; detach_margin=True freezes it to a
constant for ablations.
"""

import numpy as np

from . import tensor as T
from .errors import (
    DegenerateMargin,
    InvalidConfig,
    MissingHead,
    NotOneHot,
    ShapeMismatch,
    TargetIsTruth,
)
from .tensor import Tensor

MARGIN_EPS = 1e-12


def onehot(k, n, dtype=np.float32):
    if not 0 <= k < n:
        raise NotOneHot(f"class {k} out of range 0..{n - 1}")
    e = np.zeros(n, dtype=dtype)
    e[k] = 1
    return e


def _check_onehot(y, name):
    arr = np.asarray(y.data if isinstance(y, Tensor) else y)
    rows = arr[None, :] if arr.ndim == 1 else arr
    ok = np.all((rows == 0) | (rows == 1)) and np.all(rows.sum(axis=-1) == 1)
    if not ok:
        raise NotOneHot(f"{name}: labels must be one-hot rows")
    return arr


def sce(z, y, reduction="mean"):
    """Softmax cross-entropy against one-hot labels."""
    _check_onehot(y, "sce")
    return T.softmax_cross_entropy(z, y, reduction=reduction)


def dl_margin(z, y):
    """sigma = true logit - max over the *other* logits (true slot masked).

    sigma <= 0 iff the argmax is not the true class, or is tied with it.
    """
    _check_onehot(y, "dl_margin")
    return T.dl_margin_op(z, y)


def _margin_factor(z, y, detach_margin):
    sigma = dl_margin(z, y)
    if np.any(np.abs(sigma.data) <= MARGIN_EPS):
        raise DegenerateMargin("margin is zero within 1e-12; surrogate undefined")
    if detach_margin:
        sigma = sigma.detach()
    if z.data.ndim == 2:
        sigma = T.reshape(sigma, (z.data.shape[0], 1))
    return sigma


def surrogate(z, y, temperature=1.0, detach_margin=False):
    """SCE of logits scaled by 1/(t*sigma); invariant to positive rescaling
    of z up to the temperature."""
    sigma = _margin_factor(z, y, detach_margin)
    scaled = T.div(T.div(z, sigma), temperature)
    return sce(scaled, y, reduction="none")


def surrogate_targeted(z, y, target, temperature=1.0, detach_margin=False):
    """Negated SCE towards the target class; sigma still comes from y."""
    yarr = _check_onehot(y, "surrogate_targeted")
    k = z.data.shape[-1]
    tgt = onehot(int(target), k, dtype=z.data.dtype)
    true_idx = np.argmax(yarr, axis=-1)
    if np.any(true_idx == int(target)):
        raise TargetIsTruth(f"target {target} equals the true class")
    sigma = _margin_factor(z, y, detach_margin)
    scaled = T.div(T.div(z, sigma), temperature)
    rows = sce(scaled, np.broadcast_to(tgt, z.data.shape), reduction="none")
    return -rows


def latent_combined(z_out, z_lat, y, beta, temperature=1.0, detach_margin=False,
                    target=None, surrogate_scaling=True):
    """Algorithm objective: SCE of (beta * z_o / sigma_o + (1-beta) * z_l / sigma_l) / t.

    beta may be a scalar or a per-row vector; rows at beta == 1 never touch
    z_lat (their latent branch is multiplied out exactly, and with scalar
    beta == 1 the latent term is never even built).  surrogate_scaling=False
    drops both sigma divisions, giving the raw mixed-logits objective.
    """
    beta_arr = np.asarray(beta, dtype=z_out.data.dtype)
    if np.any(beta_arr < 0) or np.any(beta_arr > 1):
        raise InvalidConfig(f"beta must lie in [0, 1], got {beta}")
    two_d = z_out.data.ndim == 2

    if surrogate_scaling:
        sigma_o = _margin_factor(z_out, y, detach_margin)
        zo = T.div(z_out, sigma_o)
    else:
        zo = z_out

    pure_output = beta_arr.ndim == 0 and beta_arr == 1
    if not pure_output and np.all(beta_arr == 1):
        pure_output = True
    if pure_output:
        combined = zo
    else:
        if z_lat is None:
            raise InvalidConfig("latent_combined: beta < 1 needs latent logits")
        if z_lat.data.shape != z_out.data.shape:
            raise ShapeMismatch(
                f"latent logits {z_lat.data.shape} do not match output logits {z_out.data.shape}"
            )
        if surrogate_scaling:
            sigma_l = dl_margin(z_lat, y)
            active = (beta_arr < 1) if beta_arr.ndim else np.full(sigma_l.data.shape, beta_arr < 1)
            active = np.broadcast_to(active, sigma_l.data.shape).astype(z_out.data.dtype)
            if np.any((np.abs(sigma_l.data) <= MARGIN_EPS) & (active > 0)):
                raise DegenerateMargin("latent margin is zero within 1e-12 on an active row")
            if detach_margin:
                sigma_l = sigma_l.detach()
            # inactive rows divide by exactly 1 so no stray inf/nan can appear
            safe = sigma_l * active + (1.0 - active)
            if two_d:
                safe = T.reshape(safe, (z_out.data.shape[0], 1))
            zl = T.div(z_lat, safe)
        else:
            zl = z_lat
        b = beta_arr if beta_arr.ndim == 0 else beta_arr.reshape(-1, 1)
        # two-product form: a row at beta == 1 is exactly zo + 0
        combined = T.mul(zo, b) + T.mul(zl, 1.0 - b)

    combined = T.div(combined, temperature)
    if target is None:
        return sce(combined, y, reduction="none")
    yarr = _check_onehot(y, "latent_combined")
    k = z_out.data.shape[-1]
    tgt = onehot(int(target), k, dtype=z_out.data.dtype)
    if np.any(np.argmax(yarr, axis=-1) == int(target)):
        raise TargetIsTruth(f"target {target} equals the true class")
    return -sce(combined, np.broadcast_to(tgt, z_out.data.shape), reduction="none")


def latent_weighted_logits(taps, logits, heads, weights):
    """Convex combination of per-layer head logits; layer N is the output
    logits themselves (identity head).  weights has one entry per layer."""
    n = len(taps) + 1
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise InvalidConfig(f"need {n} layer weights, got shape {w.shape}")
    if np.any(w < 0) or np.any(w > 1) or abs(w.sum() - 1.0) > 1e-9:
        raise InvalidConfig("layer weights must lie in [0,1] and sum to 1 within 1e-9")
    out = None
    for l in range(1, n):
        if w[l - 1] == 0:
            continue
        if heads is None or l not in heads:
            raise MissingHead(f"weight on layer {l} but no head for it")
        term = T.mul(heads[l](taps[l - 1]), float(w[l - 1]))
        out = term if out is None else out + term
    if w[n - 1] != 0:
        term = T.mul(logits, float(w[n - 1])) if w[n - 1] != 1.0 else logits
        out = term if out is None else out + term
    return out
