"""Command line front end.

Heavy imports happen inside main() so that LATENTLAB_THREADS can cap the
BLAS thread pools before numpy comes up.  Exit codes: 0 on success, 1 for
operational failures (bad files, invalid configuration), 2 for usage
errors (argparse's own convention).
"""

import argparse
import os
import sys


def _thread_env():
    n = os.environ.get("LATENTLAB_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


def ratio(text):
    """Float argument that also accepts a/b fractions, e.g. 8/255."""
    try:
        if "/" in text:
            num, den = text.split("/", 1)
            value = float(num) / float(den)
        else:
            value = float(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"bad number {text!r}: {exc}")
    return value


def int_list(text):
    try:
        return tuple(int(t) for t in text.split(",") if t)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad integer list {text!r}: {exc}")


def load_dataset(spec):
    """Parse a dataset spec string.

    synth:<kind>:<count>:<classes>:<CxHxW>[:<seed>] builds a synthetic set;
    idx:<images>:<labels> reads a pair of IDX files.
    """
    from .data import load_idx, synth_dataset
    from .errors import InvalidConfig

    parts = spec.split(":")
    if parts[0] == "synth" and len(parts) in (5, 6):
        kind, count, classes, shape = parts[1], parts[2], parts[3], parts[4]
        seed = int(parts[5]) if len(parts) == 6 else 0
        dims = tuple(int(v) for v in shape.split("x"))
        if len(dims) != 3:
            raise InvalidConfig(f"shape must be CxHxW, got {shape!r}")
        return synth_dataset(kind, int(count), int(classes), dims, seed=seed)
    if parts[0] == "idx" and len(parts) == 3:
        return load_idx(parts[1], parts[2])
    raise InvalidConfig(
        f"bad dataset spec {spec!r}; want synth:kind:count:classes:CxHxW[:seed]"
        " or idx:images:labels")


def _add_data_model(p, model_required=True):
    p.add_argument("--data", required=True, help="dataset spec string")
    p.add_argument("--model", required=model_required, help="weight file (.lft)")


def _add_attack_args(p):
    p.add_argument("--eps", type=ratio, default=8 / 255)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--runs", type=int, default=6)
    p.add_argument("--nu", type=float, default=0.75)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--alpha", type=ratio, default=2 / 255,
                   help="constant step used when the schedule tactic is off")
    p.add_argument("--baseline-alpha", type=ratio, default=None,
                   help="step for iterated baselines (default eps/4)")
    p.add_argument("--mim-decay", type=float, default=1.0)
    p.add_argument("--layer", type=int, default=None, help="tap layer for the latent head")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-random-start", action="store_true")
    p.add_argument("--tactics", default="latent,surrogate,schedule,multi_target",
                   help="comma list from latent,surrogate,schedule,multi_target;"
                        " 'none' disables all")


def _attack_config(args):
    from .attacks import AttackConfig, Tactics
    from .errors import InvalidConfig

    names = () if args.tactics == "none" else tuple(
        t for t in args.tactics.split(",") if t)
    valid = {"latent", "surrogate", "schedule", "multi_target"}
    bad = set(names) - valid
    if bad:
        raise InvalidConfig(f"unknown tactics {sorted(bad)}; choose from {sorted(valid)}")
    tac = Tactics(**{name: name in names for name in valid})
    cfg = AttackConfig(
        eps=args.eps, iters=args.iters, runs=args.runs, nu=args.nu,
        temperature=args.temperature, layer=args.layer, alpha=args.alpha,
        mim_decay=args.mim_decay, random_start=not args.no_random_start,
        seed=args.seed, tactics=tac,
    )
    cfg.validate()
    return cfg


def _default_layer(cfg, heads):
    # a file holding exactly one probe head names the tap implicitly
    if cfg.layer is None and cfg.tactics.latent and heads and len(heads) == 1:
        from dataclasses import replace
        return replace(cfg, layer=next(iter(heads)))
    return cfg


def _manifest(args, out, extra):
    from .reports import write_manifest

    body = {"command": args.command, "dataset": args.data,
            "model": getattr(args, "model", None)}
    body.update(extra)
    write_manifest(out + ".manifest.json", body)


def _print_history(history, stream=sys.stdout):
    for row in history:
        cells = []
        for key, value in row.items():
            if isinstance(value, float):
                cells.append(f"{key} {value:.4f}")
            elif isinstance(value, dict):
                inner = " ".join(f"{k}={v:.3f}" for k, v in sorted(value.items()))
                cells.append(f"{key} [{inner}]")
            else:
                cells.append(f"{key} {value}")
        print("  ".join(cells), file=stream)


def cmd_train_model(args):
    from .models import build_resnet_small
    from .serialize import save_model
    from .training import TrainConfig, train_adversarial, train_natural

    ds = load_dataset(args.data)
    model = build_resnet_small(args.blocks, list(args.widths), ds.num_classes,
                               ds.input_shape, seed=args.model_seed)
    base = dict(
        batch_size=args.batch_size, lr=args.lr,
        lr_decay_epochs=args.lr_decay_epochs,
        lr_decay_factor=args.lr_decay_factor,
        weight_decay=args.weight_decay, momentum=args.momentum,
        clip_norm=args.clip_norm, seed=args.seed,
    )
    heads = None
    if args.adversarial:
        if args.warmup_epochs:
            warm = TrainConfig(epochs=args.warmup_epochs, **base)
            _print_history(train_natural(model, ds, warm))
        cfg = TrainConfig(
            epochs=args.epochs, adv_eps=args.adv_eps, adv_alpha=args.adv_alpha,
            adv_iters=args.adv_iters, latent_heads_on=args.latent_heads, **base)
        trained_heads, history = train_adversarial(model, ds, cfg)
        if args.latent_heads:
            heads = trained_heads
    else:
        cfg = TrainConfig(epochs=args.epochs, **base)
        history = train_natural(model, ds, cfg)
    _print_history(history)
    save_model(args.out, model, heads=heads)
    print(f"saved {args.out}")
    return 0


def cmd_train_heads(args):
    from .serialize import load_model, save_model
    from .training import TrainConfig, train_heads

    model, _ = load_model(args.model)
    ds = load_dataset(args.data)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                      lr=args.lr, seed=args.seed)
    layers = list(args.layers) if args.layers else None
    heads, history = train_heads(model, ds, cfg, layers=layers,
                                 head_seed=args.head_seed)
    _print_history(history)
    save_model(args.out, model, heads=heads)
    print(f"saved {args.out}")
    return 0


def cmd_select_layer(args):
    from .serialize import load_model
    from .training import select_layer
    from .errors import MissingHead

    model, heads = load_model(args.model)
    if not heads:
        raise MissingHead(f"{args.model} carries no probe heads")
    ds = load_dataset(args.data)
    layer, scores = select_layer(model, heads, ds, seed=args.seed)
    for l in sorted(scores):
        print(f"layer {l}  surviving {scores[l]:.4f}")
    print(f"selected {layer}")
    return 0


def cmd_attack(args):
    import time

    from .attacks import attack_dataset
    from .reports import config_payload, summarize, write_csv
    from .serialize import load_model

    model, heads = load_model(args.model)
    ds = load_dataset(args.data)
    cfg = _default_layer(_attack_config(args), heads)
    t0 = time.perf_counter()
    outcomes, stats = attack_dataset(model, ds.images, ds.labels, cfg, heads=heads)
    runtime = time.perf_counter() - t0
    header = ["index", "label", "success", "mode", "forwards",
              "first_success_forwards", "runs_used"]
    write_csv(args.out, header,
              [[o.index, o.label, int(o.success), o.mode, o.forwards,
                o.first_success_forwards, o.runs_used] for o in outcomes])
    _manifest(args, args.out, {"config": config_payload(cfg), "stats": stats,
                               "runtime_s": runtime})
    row = summarize(outcomes)
    print(f"robust accuracy {row['robust_acc']:.4f}  broken {row['broken']}/{row['count']}")
    print(f"wrote {args.out}")
    return 0


def cmd_benchmark(args):
    from .reports import config_payload, run_benchmark, write_csv
    from .serialize import load_model

    model, heads = load_model(args.model)
    ds = load_dataset(args.data)
    cfg = _default_layer(_attack_config(args), heads)
    names = tuple(t for t in args.attacks.split(",") if t)
    rows, meta = run_benchmark(model, ds.images, ds.labels, cfg, heads=heads,
                               attacks=names, baseline_alpha=args.baseline_alpha)
    header = ["attack", "count", "broken", "robust_acc", "mean_forwards",
              "median_first", "delta_vs_pgd"]
    write_csv(args.out, header, rows)
    _manifest(args, args.out, {"config": config_payload(cfg), **meta})
    for r in rows:
        print(f"{r['attack']:>8}  robust {r['robust_acc']:.4f}  "
              f"broken {r['broken']}/{r['count']}")
    print(f"wrote {args.out}")
    return 0


def cmd_curves(args):
    from .reports import config_payload, convergence_curves, write_csv
    from .serialize import load_model

    model, heads = load_model(args.model)
    ds = load_dataset(args.data)
    cfg = _default_layer(_attack_config(args), heads)
    names = tuple(t for t in args.attacks.split(",") if t)
    curves = convergence_curves(model, ds.images, ds.labels, cfg, heads=heads,
                                attacks=names, baseline_alpha=args.baseline_alpha)
    rows = []
    for name in names:
        c = curves[name]
        rows += [[name, int(f), float(a)]
                 for f, a in zip(c["forwards"], c["accuracy"])]
    write_csv(args.out, ["attack", "forwards", "accuracy"], rows)
    _manifest(args, args.out, {"config": config_payload(cfg)})
    print(f"wrote {args.out}")
    return 0


def cmd_beta_sweep(args):
    from .reports import beta_sweep, config_payload, write_csv
    from .serialize import load_model

    model, heads = load_model(args.model)
    ds = load_dataset(args.data)
    cfg = _default_layer(_attack_config(args), heads)
    rows = beta_sweep(model, ds.images, ds.labels, cfg, heads, points=args.points)
    header = ["beta_out", "beta_latent", "count", "broken", "robust_acc",
              "mean_forwards", "median_first"]
    write_csv(args.out, header, rows)
    _manifest(args, args.out, {"config": config_payload(cfg), "points": args.points})
    print(f"wrote {args.out}")
    return 0


def cmd_ablate(args):
    from .reports import ablation_lattice, config_payload, strongest_tactic, write_csv
    from .serialize import load_model

    model, heads = load_model(args.model)
    ds = load_dataset(args.data)
    cfg = _default_layer(_attack_config(args), heads)
    rows, edges = ablation_lattice(model, ds.images, ds.labels, cfg, heads=heads)
    header = ["id", "latent", "surrogate", "schedule", "multi_target",
              "count", "broken", "robust_acc", "mean_forwards", "median_first"]
    write_csv(args.out, header, rows)
    root, ext = os.path.splitext(args.out)
    edges_out = f"{root}_edges{ext or '.csv'}"
    write_csv(edges_out, ["from_id", "to_id", "tactic", "delta_broken",
                          "delta_robust_acc"], edges)
    best, means = strongest_tactic(edges)
    _manifest(args, args.out, {"config": config_payload(cfg),
                               "strongest_tactic": best,
                               "mean_delta_broken": means,
                               "edges_csv": edges_out})
    print(f"strongest tactic: {best}")
    print(f"wrote {args.out} and {edges_out}")
    return 0


def cmd_activations(args):
    from .reports import activation_dump, write_csv
    from .serialize import load_model

    model, _ = load_model(args.model)
    ds = load_dataset(args.data)
    rows = activation_dump(model, ds.images, args.layer, top_k=args.top_k)
    write_csv(args.out, ["rank", "channel", "mean_activation", "std_activation"], rows)
    _manifest(args, args.out, {"layer": args.layer, "top_k": args.top_k})
    print(f"wrote {args.out}")
    return 0


def build_parser():
    ap = argparse.ArgumentParser(
        prog="latentlab",
        description="Train small convnets and attack them through latent taps.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-model", help="fit a backbone, optionally adversarially")
    _add_data_model(p, model_required=False)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--widths", type=int_list, default=(8, 16))
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--lr-decay-epochs", type=int_list, default=())
    p.add_argument("--lr-decay-factor", type=float, default=0.1)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--clip-norm", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model-seed", type=int, default=0)
    p.add_argument("--adversarial", action="store_true")
    p.add_argument("--warmup-epochs", type=int, default=0,
                   help="natural epochs before adversarial training starts")
    p.add_argument("--adv-eps", type=ratio, default=8 / 255)
    p.add_argument("--adv-alpha", type=ratio, default=2 / 255)
    p.add_argument("--adv-iters", type=int, default=7)
    p.add_argument("--latent-heads", action="store_true",
                   help="co-train probe heads during adversarial training")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_model)

    p = sub.add_parser("train-heads", help="fit probe heads on a frozen backbone")
    _add_data_model(p)
    p.add_argument("--layers", type=int_list, default=(),
                   help="tap layers (default: every intermediate layer)")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--head-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_heads)

    p = sub.add_parser("select-layer", help="rank taps by half-mixed attack strength")
    _add_data_model(p)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_select_layer)

    p = sub.add_parser("attack", help="run the full engine over a dataset")
    _add_data_model(p)
    _add_attack_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("benchmark", help="compare attacks on one dataset")
    _add_data_model(p)
    _add_attack_args(p)
    p.add_argument("--attacks", default="fgsm,bim,mim,pgd,lafeat")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("curves", help="accuracy versus forwards spent")
    _add_data_model(p)
    _add_attack_args(p)
    p.add_argument("--attacks", default="pgd,lafeat")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_curves)

    p = sub.add_parser("beta-sweep", help="robust accuracy across mixing weights")
    _add_data_model(p)
    _add_attack_args(p)
    p.add_argument("--points", type=int, default=None,
                   help="grid intervals (default: --runs)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_beta_sweep)

    p = sub.add_parser("ablate", help="run all 16 tactic subsets")
    _add_data_model(p)
    _add_attack_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("activations", help="dump per-channel tap statistics")
    _add_data_model(p)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--top-k", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_activations)

    return ap


def main(argv=None):
    _thread_env()
    args = build_parser().parse_args(argv)
    from .errors import Error

    try:
        return args.func(args)
    except (Error, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
