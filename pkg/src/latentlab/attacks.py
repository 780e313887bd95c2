"""L-inf white-box attacks: FGSM/BIM/MIM/PGD baselines and the
latent-guided multi-run engine.

Attacks run batched over images.  The conv/matmul kernels are
batch-composition stable, so each image's trajectory is bitwise identical
whether it runs alone, in a batch, or in a compacted active set; per-image
randomness comes from its own generator stream (seed XOR image index).
A run of I iterations evaluates the margin at iterates 0..I-1 and returns
the I-th unchecked, so one run costs at most I forward passes.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import losses as L
from . import tensor as T
from .errors import InvalidConfig, MissingHead, TargetIsTruth
from .models import head_logits
from .tensor import Tape, Tensor, backward


@dataclass
class Tactics:
    """Feature switches for the engine; all on reproduces the full attack."""

    latent: bool = True
    surrogate: bool = True
    schedule: bool = True
    multi_target: bool = True


@dataclass
class AttackConfig:
    eps: float = 8 / 255
    iters: int = 100
    runs: int = 6                 # beta grid size per target slot
    nu: float = 0.75
    temperature: float = 1.0
    layer: int | None = None      # tap feeding the latent head
    alpha: float = 2 / 255        # constant step when the schedule is off
    mim_decay: float = 1.0
    random_start: bool = True
    seed: int = 0
    detach_margin: bool = False
    strict_momentum_init: bool = False
    tactics: Tactics = field(default_factory=Tactics)

    def validate(self):
        if not 0 < self.eps <= 1:
            raise InvalidConfig(f"eps must be in (0, 1], got {self.eps}")
        if self.iters < 1:
            raise InvalidConfig(f"iters must be >= 1, got {self.iters}")
        if self.runs < 1:
            raise InvalidConfig(f"runs must be >= 1, got {self.runs}")
        if not 0 < self.nu <= 1:
            raise InvalidConfig(f"nu must be in (0, 1], got {self.nu}")
        if self.temperature <= 0:
            raise InvalidConfig(f"temperature must be positive, got {self.temperature}")
        if self.alpha <= 0:
            raise InvalidConfig(f"alpha must be positive, got {self.alpha}")
        if self.mim_decay < 0:
            raise InvalidConfig(f"mim_decay must be >= 0, got {self.mim_decay}")
        if self.layer is not None and self.layer < 1:
            raise InvalidConfig(f"layer must be >= 1, got {self.layer}")

    def step_sizes(self):
        """Per-iteration step: decaying 2*eps*(1 - i/I), or the constant."""
        if self.tactics.schedule:
            return [2 * self.eps * (1 - i / self.iters) for i in range(self.iters)]
        return [self.alpha] * self.iters

    def beta_grid(self):
        """Mixing weights tried per target slot, centre first.

        beta weighs the *output* logits: {j/runs : j = 0..runs-1}, so the
        grid leans latent and never contains the pure-output 1.0 (that is
        what the per-iteration disabling rule is for).  With the latent
        tactic off the grid collapses to the single pure-output run.
        """
        if not self.tactics.latent:
            return [1.0]
        grid = [j / self.runs for j in range(self.runs)]
        # round the distance so j/B and (B-j)/B tie despite float residue
        return sorted(grid, key=lambda b: (round(abs(b - 0.5), 12), b))

    def run_budget(self, num_classes):
        """Worst-case forward passes per image across all stages."""
        slots = num_classes if self.tactics.multi_target else 1
        return self.iters * len(self.beta_grid()) * slots


@dataclass
class RunTrace:
    """Per-row bookkeeping for one attack run over a batch."""

    candidates: np.ndarray            # (B, C, H, W) returned iterates
    forwards: np.ndarray              # (B,) model passes consumed
    margins: np.ndarray               # (B, I) output margin at each evaluated iterate
    first_hit: np.ndarray             # (B,) iteration with margin <= 0, else -1
    latent_margins: np.ndarray | None = None
    betas: np.ndarray | None = None   # (B, I) mixing weight actually used
    iterates: list | None = None


def project(x, x0, eps):
    """Clamp into the eps box around x0 intersected with [0, 1]."""
    lo = np.maximum(0.0, x0 - eps)
    hi = np.minimum(1.0, x0 + eps)
    return np.clip(x, lo, hi)


def make_rngs(seed, indices):
    """One generator per image, keyed by dataset position."""
    return [np.random.default_rng(seed ^ int(j)) for j in indices]


def _grad_and_margin(model, xhat, y):
    """One forward/backward on the plain output objective."""
    with Tape():
        xt = Tensor(xhat, requires_grad=True)
        z = model.forward(xt)
        sig = L.dl_margin(z, y).data
        loss = L.sce(z, y, reduction="sum")
        g = backward(loss, wrt=[xt])[xt].data
    return g, sig


def fgsm(model, x, y, eps):
    """Single signed gradient step of size eps."""
    x0 = np.array(x, copy=True)
    g, sig = _grad_and_margin(model, x0, y)
    cand = project(x0 + eps * np.sign(g), x0, eps)
    b = x0.shape[0]
    margins = sig.reshape(b, 1).astype(np.float64)
    first = np.where(sig <= 0, 0, -1)
    return RunTrace(cand, np.ones(b, dtype=int), margins, first)


def bim(model, x, y, eps, iters, alpha, record_iterates=False):
    """Iterated signed steps from the clean image, no restart."""
    x0 = np.array(x, copy=True)
    b = x0.shape[0]
    xhat = x0.copy()
    margins = np.full((b, iters), np.nan)
    first = np.full(b, -1, dtype=int)
    iterates = [] if record_iterates else None
    for i in range(iters):
        if record_iterates:
            iterates.append(xhat.copy())
        g, sig = _grad_and_margin(model, xhat, y)
        margins[:, i] = sig
        first[(sig <= 0) & (first < 0)] = i
        xhat = project(xhat + alpha * np.sign(g), x0, eps)
    return RunTrace(xhat, np.full(b, iters, dtype=int), margins, first, iterates=iterates)


def mim(model, x, y, eps, iters, alpha, decay=1.0, record_iterates=False):
    """Momentum-accumulated signed steps; gradients L1-normalised per image."""
    x0 = np.array(x, copy=True)
    b = x0.shape[0]
    xhat = x0.copy()
    acc = np.zeros_like(x0)
    margins = np.full((b, iters), np.nan)
    first = np.full(b, -1, dtype=int)
    iterates = [] if record_iterates else None
    for i in range(iters):
        if record_iterates:
            iterates.append(xhat.copy())
        g, sig = _grad_and_margin(model, xhat, y)
        margins[:, i] = sig
        first[(sig <= 0) & (first < 0)] = i
        flat = np.abs(g).reshape(b, -1).mean(axis=1).reshape(b, 1, 1, 1)
        acc = decay * acc + g / np.maximum(flat, np.finfo(g.dtype).tiny)
        xhat = project(xhat + alpha * np.sign(acc), x0, eps)
    return RunTrace(xhat, np.full(b, iters, dtype=int), margins, first, iterates=iterates)


def pgd(model, x, y, eps, iters, alpha, rngs=None, random_start=True,
        record_iterates=False):
    """Projected signed gradient ascent with uniform restart."""
    x0 = np.array(x, copy=True)
    b = x0.shape[0]
    if random_start:
        if rngs is None:
            raise InvalidConfig("pgd with random_start needs per-image rngs")
        u = np.stack([r.uniform(-eps, eps, x0.shape[1:]) for r in rngs])
        xhat = project(x0 + u.astype(x0.dtype), x0, eps)
    else:
        xhat = x0.copy()
    margins = np.full((b, iters), np.nan)
    first = np.full(b, -1, dtype=int)
    iterates = [] if record_iterates else None
    for i in range(iters):
        if record_iterates:
            iterates.append(xhat.copy())
        g, sig = _grad_and_margin(model, xhat, y)
        margins[:, i] = sig
        first[(sig <= 0) & (first < 0)] = i
        xhat = project(xhat + alpha * np.sign(g), x0, eps)
    return RunTrace(xhat, np.full(b, iters, dtype=int), margins, first, iterates=iterates)


def lafeat(model, x, y, cfg, beta=1.0, head=None, layer=None, target=None,
           rngs=None, record_iterates=False):
    """One run of the latent-guided engine at a fixed mixing weight.

    Rows whose output margin drops to zero return their current iterate
    immediately and leave the batch; remaining state is compacted, which
    the batch-stable kernels make bitwise harmless.  Momentum accumulates
    in a projected buffer; the step out of it is the expanded form
    nu*mu + (1-nu)*(2*xhat - prev), which at nu=1 collapses exactly to the
    projected-gradient iterate.  The schedule tactic owns the whole
    optimizer recipe: turning it off forces both the constant step and
    nu=1, which is what makes the all-tactics-off engine coincide with
    plain PGD bit for bit.
    """
    cfg.validate()
    tac = cfg.tactics
    use_latent = tac.latent and beta < 1
    if use_latent and (head is None or layer is None):
        raise MissingHead("latent run needs a head and its tap layer")

    x0 = np.array(x, copy=True)
    b = x0.shape[0]
    y = np.asarray(y, dtype=x0.dtype)
    if target is not None and np.any(np.argmax(y, axis=1) == int(target)):
        raise TargetIsTruth(f"target {target} is the true class of a batch row")
    if rngs is None:
        rngs = make_rngs(cfg.seed, range(b))
    if cfg.random_start:
        u = np.stack([r.uniform(-cfg.eps, cfg.eps, x0.shape[1:]) for r in rngs])
        xhat = project(x0 + u.astype(x0.dtype), x0, cfg.eps)
    else:
        xhat = x0.copy()
    mu = np.zeros_like(xhat) if cfg.strict_momentum_init else xhat.copy()
    prev = xhat.copy()
    alphas = cfg.step_sizes()
    nu = cfg.nu if tac.schedule else 1.0

    alive = np.arange(b)
    xa, ya = x0, y
    candidates = xhat.copy()
    forwards = np.zeros(b, dtype=int)
    first = np.full(b, -1, dtype=int)
    margins = np.full((b, cfg.iters), np.nan)
    lat_margins = np.full((b, cfg.iters), np.nan) if use_latent else None
    betas = np.full((b, cfg.iters), np.nan)
    iterates = [] if record_iterates else None

    for i in range(cfg.iters):
        if record_iterates:
            iterates.append((alive.copy(), xhat.copy()))
        with Tape():
            xt = Tensor(xhat, requires_grad=True)
            z_o, taps = model.forward_with_taps(xt)
            sig_o = L.dl_margin(z_o, ya).data
            forwards[alive] += 1
            margins[alive, i] = sig_o

            done = sig_o <= 0
            if done.any():
                hit = alive[done]
                candidates[hit] = xhat[done]
                first[hit] = i
            keep = ~done
            if not keep.any():
                alive = alive[keep]
                break

            if use_latent:
                z_l = head_logits(head, taps[layer - 1])
                sig_l = L.dl_margin(z_l, ya).data
                lat_margins[alive, i] = sig_l
                # a broken head stops steering: those rows fall back to 1
                beta_rows = np.where(sig_l <= 0, 1.0, beta)
            else:
                z_l = None
                beta_rows = np.ones(alive.size)
            betas[alive, i] = beta_rows

            idx = np.flatnonzero(keep)
            loss_rows = L.latent_combined(
                T.take_rows(z_o, idx),
                T.take_rows(z_l, idx) if use_latent else None,
                ya[keep],
                beta_rows[keep],
                temperature=cfg.temperature,
                detach_margin=cfg.detach_margin,
                target=target,
                surrogate_scaling=tac.surrogate,
            )
            g = backward(T.tensor_sum(loss_rows), wrt=[xt])[xt].data

        g, xhat, mu, prev = g[keep], xhat[keep], mu[keep], prev[keep]
        xa, ya, alive = xa[keep], ya[keep], alive[keep]

        mu = project(mu + alphas[i] * np.sign(g), xa, cfg.eps)
        xnew = project(nu * mu + (1 - nu) * (2 * xhat - prev), xa, cfg.eps)
        prev, xhat = xhat, xnew

    if alive.size:
        candidates[alive] = xhat
    return RunTrace(candidates, forwards, margins, first,
                    latent_margins=lat_margins, betas=betas, iterates=iterates)


@dataclass
class ImageOutcome:
    """Everything the harness needs to score one attacked image."""

    index: int
    label: int
    candidate: np.ndarray | None
    forwards: int = 0
    success: bool = False
    mode: str = "none"                # clean | margin | reeval | none
    first_success_forwards: int = -1
    runs_used: int = 0
    margin_chunks: list = field(default_factory=list)


def _predict(model, x):
    with Tape():
        z = model.forward(Tensor(x))
    return np.argmax(z.data, axis=1)


def attack_dataset(model, x, labels, cfg, heads=None, collect_margins=False):
    """Two-stage attack over a dataset.

    Stage one sweeps the beta grid untargeted; stage two (multi-target)
    sweeps targets in ascending class order, full grid per target.  Images
    stop at their first success; images the clean model already gets wrong
    are recorded as such without spending any attack budget.  Re-evaluation
    of still-unresolved candidates happens once at the end, outside the
    per-image forward budget.
    """
    cfg.validate()
    tac = cfg.tactics
    x = np.asarray(x)
    labels = np.asarray(labels, dtype=int)
    n = x.shape[0]
    k = model.num_classes
    y = np.eye(k, dtype=x.dtype)[labels]

    head = None
    if tac.latent:
        if cfg.layer is None:
            raise InvalidConfig("latent tactic needs cfg.layer")
        if heads is None or cfg.layer not in heads:
            raise MissingHead(f"no head for layer {cfg.layer}")
        head = heads[cfg.layer]

    outcomes = [ImageOutcome(index=j, label=int(labels[j]), candidate=None)
                for j in range(n)]
    rngs = make_rngs(cfg.seed, range(n))

    fc_start = model.forward_count
    clean_pred = _predict(model, x)
    fc_clean = model.forward_count
    open_set = []
    for j in range(n):
        if clean_pred[j] != labels[j]:
            outcomes[j].success = True
            outcomes[j].mode = "clean"
            outcomes[j].first_success_forwards = 0
            outcomes[j].candidate = x[j].copy()
        else:
            open_set.append(j)

    grid = cfg.beta_grid()
    plan = [(None, b) for b in grid]
    if tac.multi_target:
        plan += [(t, b) for t in range(k) for b in grid]

    for target, beta in plan:
        rows = [j for j in open_set
                if not outcomes[j].success
                and (target is None or labels[j] != target)]
        if not rows:
            continue
        trace = lafeat(
            model, x[rows], y[rows], cfg, beta=beta, head=head,
            layer=cfg.layer, target=target, rngs=[rngs[j] for j in rows],
        )
        for p, j in enumerate(rows):
            o = outcomes[j]
            used = int(trace.forwards[p])
            before = o.forwards
            o.forwards += used
            o.runs_used += 1
            if collect_margins:
                o.margin_chunks.append(trace.margins[p, :used].copy())
            if trace.first_hit[p] >= 0:
                o.success = True
                o.mode = "margin"
                o.candidate = trace.candidates[p].copy()
                o.first_success_forwards = before + int(trace.first_hit[p]) + 1
            else:
                o.candidate = trace.candidates[p].copy()

    fc_runs = model.forward_count
    pending = [o for o in outcomes if not o.success and o.candidate is not None]
    if pending:
        cand = np.stack([o.candidate for o in pending])
        pred = _predict(model, cand)
        for o, p in zip(pending, pred):
            if p != o.label:
                o.success = True
                o.mode = "reeval"
                o.first_success_forwards = o.forwards
    stats = {
        "clean_eval_forwards": fc_clean - fc_start,
        "attack_forwards": fc_runs - fc_clean,
        "reeval_forwards": model.forward_count - fc_runs,
        "reported_forwards": sum(o.forwards for o in outcomes),
        "budget_per_image": cfg.run_budget(k),
    }
    return outcomes, stats


def attack_image(model, x_one, label, cfg, heads=None, image_index=0):
    """Batch-of-one convenience wrapper around attack_dataset."""
    x = np.asarray(x_one)[None]
    cfg_one = replace(cfg, seed=cfg.seed ^ int(image_index))
    outcomes, stats = attack_dataset(model, x, np.array([label]), cfg_one, heads=heads)
    return outcomes[0], stats
