"""Evaluation harness: benchmark tables, curves, sweeps, and the tactic lattice.

Every attack is scored through the same outcome accounting (clean screen,
margin hits during the run, one re-evaluation of surviving candidates at the
end), so numbers in different tables are directly comparable.  CSV output is
deterministically formatted; wall-clock timings and configuration go to a
JSON manifest next to the CSV, never into the CSV itself.
"""

import json
import time
from dataclasses import replace

import numpy as np

from . import attacks as A
from . import losses as L
from .attacks import AttackConfig, ImageOutcome, Tactics, attack_dataset, make_rngs
from .errors import EmptyDataset, InvalidConfig, MissingHead
from .tensor import Tape, Tensor


def evaluate(model, x, labels, batch_size=256):
    """Clean accuracy and mean cross-entropy over a dataset."""
    x = np.asarray(x)
    labels = np.asarray(labels, dtype=int)
    n = x.shape[0]
    if n == 0:
        raise EmptyDataset("evaluate needs at least one example")
    eye = np.eye(model.num_classes, dtype=x.dtype)
    hits = 0
    loss_sum = 0.0
    for s in range(0, n, batch_size):
        xb = x[s:s + batch_size]
        yb = eye[labels[s:s + batch_size]]
        with Tape():
            z = model.forward(Tensor(xb))
            loss_sum += float(L.sce(z, yb, reduction="sum").data)
        hits += int(np.sum(np.argmax(z.data, axis=1) == labels[s:s + batch_size]))
    return {"accuracy": hits / n, "loss": loss_sum / n, "count": n}


def summarize(outcomes):
    """Collapse per-image outcomes into one table row.

    median_first is taken over images the attack itself broke (margin or
    re-eval), not over images the clean model already missed; -1 when the
    attack broke nothing.
    """
    n = len(outcomes)
    broken = sum(o.success for o in outcomes)
    attacked = [o.first_success_forwards for o in outcomes
                if o.success and o.mode != "clean"]
    return {
        "count": n,
        "broken": broken,
        "robust_acc": 1.0 - broken / n,
        "mean_forwards": sum(o.forwards for o in outcomes) / n,
        "median_first": float(np.median(attacked)) if attacked else -1.0,
    }


def _single_run_outcomes(model, x, labels, runner):
    """Score a one-shot attack with the same accounting as attack_dataset.

    runner(x_subset, y_subset, rngs) -> RunTrace over the clean-correct rows.
    Re-evaluation of candidates that never hit the margin is charged at the
    image's total spent forwards, mirroring the engine.
    """
    x = np.asarray(x)
    labels = np.asarray(labels, dtype=int)
    n = x.shape[0]
    eye = np.eye(model.num_classes, dtype=x.dtype)
    outcomes = [ImageOutcome(index=j, label=int(labels[j]), candidate=None)
                for j in range(n)]
    clean = A._predict(model, x)
    rows = []
    for j in range(n):
        if clean[j] != labels[j]:
            outcomes[j].success = True
            outcomes[j].mode = "clean"
            outcomes[j].first_success_forwards = 0
            outcomes[j].candidate = x[j].copy()
        else:
            rows.append(j)
    if rows:
        trace = runner(x[rows], eye[labels[rows]], rows)
        for p, j in enumerate(rows):
            o = outcomes[j]
            o.forwards = int(trace.forwards[p])
            o.runs_used = 1
            o.candidate = trace.candidates[p].copy()
            used = o.forwards
            o.margin_chunks.append(trace.margins[p, :used].copy())
            if trace.first_hit[p] >= 0:
                o.success = True
                o.mode = "margin"
                o.first_success_forwards = int(trace.first_hit[p]) + 1
        pending = [o for o in outcomes if not o.success and o.candidate is not None]
        if pending:
            pred = A._predict(model, np.stack([o.candidate for o in pending]))
            for o, p in zip(pending, pred):
                if p != o.label:
                    o.success = True
                    o.mode = "reeval"
                    o.first_success_forwards = o.forwards
    return outcomes


BASELINES = ("fgsm", "bim", "mim", "pgd")


def _baseline_runner(model, name, cfg, alpha):
    if name == "fgsm":
        return lambda xs, ys, idx: A.fgsm(model, xs, ys, cfg.eps)
    if name == "bim":
        return lambda xs, ys, idx: A.bim(model, xs, ys, cfg.eps, cfg.iters, alpha)
    if name == "mim":
        return lambda xs, ys, idx: A.mim(
            model, xs, ys, cfg.eps, cfg.iters, alpha, decay=cfg.mim_decay)
    if name == "pgd":
        return lambda xs, ys, idx: A.pgd(
            model, xs, ys, cfg.eps, cfg.iters, alpha,
            rngs=make_rngs(cfg.seed, idx), random_start=cfg.random_start)
    raise InvalidConfig(f"unknown attack {name!r}")


def attack_outcomes(model, x, labels, name, cfg, heads=None, baseline_alpha=None):
    """Outcomes for one named attack under shared accounting.

    Baselines run once for cfg.iters at step baseline_alpha (default eps/4);
    the full engine runs its two-stage multi-run plan.  Per-image random
    streams are keyed by dataset position for every attack, so rows are
    comparable across tables and subset choice does not move any image.
    """
    if name == "lafeat":
        out, _ = attack_dataset(model, x, labels, cfg, heads=heads,
                                collect_margins=True)
        return out
    alpha = cfg.eps / 4 if baseline_alpha is None else baseline_alpha
    runner = _baseline_runner(model, name, cfg, alpha)
    return _single_run_outcomes(model, x, labels, runner)


def run_benchmark(model, x, labels, cfg, heads=None,
                  attacks=BASELINES + ("lafeat",), baseline_alpha=None):
    """Compare attacks on one dataset.

    Returns (rows, meta): rows carry the comparable numbers, meta carries
    wall-clock seconds per attack and the resolved baseline step, which
    belong in the manifest rather than the CSV.
    """
    rows = []
    runtimes = {}
    for name in attacks:
        t0 = time.perf_counter()
        outcomes = attack_outcomes(model, x, labels, name, cfg, heads=heads,
                                   baseline_alpha=baseline_alpha)
        runtimes[name] = time.perf_counter() - t0
        rows.append({"attack": name, **summarize(outcomes)})
    acc = {r["attack"]: r["robust_acc"] for r in rows}
    for r in rows:
        r["delta_vs_pgd"] = r["robust_acc"] - acc["pgd"] if "pgd" in acc else 0.0
    meta = {
        "runtime_s": runtimes,
        "baseline_alpha": cfg.eps / 4 if baseline_alpha is None else baseline_alpha,
    }
    return rows, meta


def _first_success(o):
    """Forward count at which this image fell, or None if it never did.

    Re-eval successes are charged at the image's full spend: nothing was
    known to be broken until the budget had been consumed.
    """
    if not o.success:
        return None
    if o.mode == "clean":
        return 0
    return o.first_success_forwards


def convergence_curve(outcomes):
    """Accuracy as a step function of per-image forwards spent.

    Point (f, a): after every image has spent up to f forwards, a fraction
    a still stands.  The first point is (0, clean accuracy).
    """
    n = len(outcomes)
    firsts = sorted(f for f in (_first_success(o) for o in outcomes) if f is not None)
    xs = [0]
    ys = [1.0 - sum(f == 0 for f in firsts) / n]
    for f in firsts:
        if f == 0:
            continue
        if f == xs[-1]:
            ys[-1] -= 1 / n
        else:
            xs.append(f)
            ys.append(ys[-1] - 1 / n)
    budget = max((o.forwards for o in outcomes), default=0)
    if budget > xs[-1]:
        xs.append(budget)
        ys.append(ys[-1])
    return np.array(xs, dtype=int), np.array(ys)


def convergence_curves(model, x, labels, cfg, heads=None,
                       attacks=("pgd", "lafeat"), baseline_alpha=None):
    """Per-attack accuracy-vs-forwards step curves on a shared dataset."""
    curves = {}
    for name in attacks:
        outcomes = attack_outcomes(model, x, labels, name, cfg, heads=heads,
                                   baseline_alpha=baseline_alpha)
        xs, ys = convergence_curve(outcomes)
        curves[name] = {"forwards": xs, "accuracy": ys}
    return curves


def beta_sweep(model, x, labels, cfg, heads, points=None):
    """Robust accuracy at fixed mixing weights, one untargeted run each.

    Sweeps beta over an even grid including both endpoints.  Each row
    reports the weight under both bookkeeping conventions: beta_out is the
    share of the output logits (the engine's convention), beta_latent the
    share of the latent logits, so beta_latent = 1 - beta_out.
    """
    if cfg.layer is None:
        raise InvalidConfig("beta_sweep needs cfg.layer")
    if heads is None or cfg.layer not in heads:
        raise MissingHead(f"no head for layer {cfg.layer}")
    head = heads[cfg.layer]
    p = cfg.runs if points is None else points
    if p < 2:
        raise InvalidConfig(f"beta_sweep needs at least 2 points, got {p}")
    swept = replace(cfg, tactics=replace(cfg.tactics, latent=True))
    rows = []
    for j in range(p + 1):
        beta = j / p
        runner = lambda xs, ys, idx, b=beta: A.lafeat(
            model, xs, ys, swept, beta=b, head=head, layer=swept.layer,
            rngs=make_rngs(swept.seed, idx))
        outcomes = _single_run_outcomes(model, x, labels, runner)
        rows.append({"beta_out": beta, "beta_latent": 1.0 - beta,
                     **summarize(outcomes)})
    return rows


TACTIC_NAMES = ("latent", "surrogate", "schedule", "multi_target")


def _tactics_from_bits(bits):
    return Tactics(**{name: bool(bits >> i & 1)
                      for i, name in enumerate(TACTIC_NAMES)})


def ablation_lattice(model, x, labels, cfg, heads=None):
    """Run every subset of the four tactics; also score each lattice edge.

    Returns (rows, edges).  Row 0 is the empty subset, which by
    construction runs the engine as plain PGD at the constant step; the
    full subset is row 15.  Edges connect each subset to its supersets one
    tactic away and carry the change in broken images, so the marginal
    value of each tactic can be read off directly.
    """
    rows = []
    for bits in range(16):
        tac = _tactics_from_bits(bits)
        sub = replace(cfg, tactics=tac)
        outcomes, _ = attack_dataset(model, x, labels, sub,
                                     heads=heads if tac.latent else None)
        row = {"id": bits}
        row.update({name: int(bits >> i & 1) for i, name in enumerate(TACTIC_NAMES)})
        row.update(summarize(outcomes))
        rows.append(row)
    edges = []
    for bits in range(16):
        for i, name in enumerate(TACTIC_NAMES):
            if bits >> i & 1:
                continue
            hi = bits | 1 << i
            edges.append({
                "from_id": bits,
                "to_id": hi,
                "tactic": name,
                "delta_broken": rows[hi]["broken"] - rows[bits]["broken"],
                "delta_robust_acc": rows[hi]["robust_acc"] - rows[bits]["robust_acc"],
            })
    return rows, edges


def strongest_tactic(edges):
    """Tactic with the largest mean broken-count gain across its 8 edges."""
    gains = {name: [] for name in TACTIC_NAMES}
    for e in edges:
        gains[e["tactic"]].append(e["delta_broken"])
    means = {name: sum(g) / len(g) for name, g in gains.items()}
    best = max(means.items(), key=lambda kv: (kv[1], kv[0]))
    return best[0], means


def activation_dump(model, x, layer, top_k=8):
    """Mean activation per channel of one tap over natural inputs.

    Rows are ranked by mean magnitude; top_k limits the output (0 keeps
    every channel).
    """
    if not 1 <= layer <= model.num_layers - 1:
        raise InvalidConfig(
            f"layer must be in [1, {model.num_layers - 1}], got {layer}")
    x = np.asarray(x)
    if x.shape[0] == 0:
        raise EmptyDataset("activation_dump needs at least one example")
    with Tape():
        _, taps = model.forward_with_taps(Tensor(x))
    act = taps[layer - 1].data
    mean = act.mean(axis=(0, 2, 3))
    std = act.std(axis=(0, 2, 3))
    order = sorted(range(mean.size), key=lambda c: (-abs(mean[c]), c))
    if top_k:
        order = order[:top_k]
    return [{"rank": r, "channel": c,
             "mean_activation": float(mean[c]), "std_activation": float(std[c])}
            for r, c in enumerate(order)]


def format_cell(v):
    """One CSV cell: ints verbatim, floats via repr (shortest round-trip)."""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    """Deterministic CSV: fixed column order, repr floats, LF line ends."""
    lines = [",".join(header)]
    for row in rows:
        if isinstance(row, dict):
            row = [row[h] for h in header]
        lines.append(",".join(format_cell(v) for v in row))
    with open(path, "w", newline="") as f:
        f.write("\n".join(lines) + "\n")


def write_manifest(path, payload):
    """JSON sidecar for a CSV: config, seeds, versions, wall-clock times."""
    from . import __version__
    from .kernels import backend
    body = {"latentlab_version": __version__,
            "kernel_backend": backend(),
            **payload}
    with open(path, "w") as f:
        json.dump(body, f, sort_keys=True, indent=2, default=_json_default)
        f.write("\n")


def _json_default(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"cannot serialise {type(v).__name__}")


def config_payload(cfg):
    """AttackConfig as manifest-ready plain data."""
    tac = cfg.tactics
    return {
        "eps": cfg.eps, "iters": cfg.iters, "runs": cfg.runs, "nu": cfg.nu,
        "temperature": cfg.temperature, "layer": cfg.layer, "alpha": cfg.alpha,
        "mim_decay": cfg.mim_decay, "random_start": cfg.random_start,
        "seed": cfg.seed, "detach_margin": cfg.detach_margin,
        "tactics": {name: getattr(tac, name) for name in TACTIC_NAMES},
    }
