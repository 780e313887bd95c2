import json

import numpy as np
import pytest

import latentlab.reports as R
from latentlab.attacks import AttackConfig, ImageOutcome, Tactics
from latentlab.data import synth_dataset
from latentlab.errors import EmptyDataset, InvalidConfig, MissingHead
from latentlab.models import build_head, build_resnet_small
from latentlab.tensor import Tape, Tensor
from latentlab.training import TrainConfig, train_natural


@pytest.fixture(scope="module")
def rig():
    ds = synth_dataset("blobs", 160, 4, (1, 8, 8), seed=3)
    model = build_resnet_small(1, [6], 4, (1, 8, 8), seed=1)
    train_natural(model, ds, TrainConfig(epochs=3, batch_size=32, lr=0.05, seed=0))
    heads = {1: build_head(model, 1, seed=2)}
    eval_ds = synth_dataset("blobs", 36, 4, (1, 8, 8), seed=11)
    return model, heads, eval_ds


def small_cfg(**kw):
    base = dict(eps=0.08, iters=6, runs=3, layer=1, alpha=0.02, seed=0)
    base.update(kw)
    return AttackConfig(**base)


def test_evaluate_against_manual_forward(rig):
    model, _, ds = rig
    out = R.evaluate(model, ds.images, ds.labels, batch_size=7)
    with Tape():
        z = model.forward(Tensor(ds.images)).data
    acc = float(np.mean(np.argmax(z, axis=1) == ds.labels))
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(len(ds)), ds.labels].mean())
    assert out["count"] == len(ds)
    assert out["accuracy"] == pytest.approx(acc, abs=1e-12)
    assert out["loss"] == pytest.approx(loss, rel=1e-5)


def test_evaluate_empty_raises(rig):
    model, _, ds = rig
    with pytest.raises(EmptyDataset):
        R.evaluate(model, ds.images[:0], ds.labels[:0])


def test_summarize_median_skips_clean_rows():
    outs = [
        ImageOutcome(0, 0, None, success=True, mode="clean", first_success_forwards=0),
        ImageOutcome(1, 1, None, forwards=10, success=True, mode="margin",
                     first_success_forwards=4),
        ImageOutcome(2, 2, None, forwards=10, success=True, mode="reeval",
                     first_success_forwards=10),
        ImageOutcome(3, 3, None, forwards=10),
    ]
    row = R.summarize(outs)
    assert row["broken"] == 3
    assert row["robust_acc"] == pytest.approx(0.25)
    assert row["median_first"] == pytest.approx(7.0)   # median of {4, 10}
    assert row["mean_forwards"] == pytest.approx(30 / 4)


def test_summarize_median_minus_one_when_attack_broke_nothing():
    outs = [ImageOutcome(0, 0, None, success=True, mode="clean",
                         first_success_forwards=0),
            ImageOutcome(1, 1, None, forwards=5)]
    assert R.summarize(outs)["median_first"] == -1.0


def test_single_run_accounting(rig):
    model, _, ds = rig
    cfg = small_cfg()
    outs = R.attack_outcomes(model, ds.images, ds.labels, "pgd", cfg)
    assert len(outs) == len(ds)
    for o in outs:
        if o.mode == "clean":
            assert o.forwards == 0 and o.first_success_forwards == 0
        elif o.mode == "margin":
            # first hit lands inside the spent budget
            assert 1 <= o.first_success_forwards <= o.forwards
        elif o.mode == "reeval":
            assert o.first_success_forwards == o.forwards == cfg.iters
        else:
            assert not o.success and o.forwards == cfg.iters
        if o.mode in ("margin", "reeval", "none"):
            assert o.runs_used == 1


def test_benchmark_rows_and_delta(rig):
    model, heads, ds = rig
    rows, meta = R.run_benchmark(model, ds.images, ds.labels, small_cfg(),
                                 heads=heads)
    names = [r["attack"] for r in rows]
    assert names == ["fgsm", "bim", "mim", "pgd", "lafeat"]
    by = {r["attack"]: r for r in rows}
    assert by["pgd"]["delta_vs_pgd"] == 0.0
    for r in rows:
        assert r["delta_vs_pgd"] == pytest.approx(
            r["robust_acc"] - by["pgd"]["robust_acc"])
        assert 0.0 <= r["robust_acc"] <= 1.0
        assert "runtime_s" not in r
    assert set(meta["runtime_s"]) == set(names)
    assert meta["baseline_alpha"] == pytest.approx(0.02)


def test_benchmark_engine_no_weaker_than_single_pgd(rig):
    # the engine's first stage already contains a full-budget untargeted
    # run, so its broken count can only match or beat one pgd run
    model, heads, ds = rig
    rows, _ = R.run_benchmark(model, ds.images, ds.labels, small_cfg(),
                              heads=heads, attacks=("pgd", "lafeat"))
    by = {r["attack"]: r for r in rows}
    assert by["lafeat"]["broken"] >= by["pgd"]["broken"] - 0


def test_curve_starts_at_clean_accuracy_ends_at_robust(rig):
    model, heads, ds = rig
    cfg = small_cfg()
    clean = R.evaluate(model, ds.images, ds.labels)["accuracy"]
    curves = R.convergence_curves(model, ds.images, ds.labels, cfg, heads=heads)
    for name in ("pgd", "lafeat"):
        xs, ys = curves[name]["forwards"], curves[name]["accuracy"]
        assert xs[0] == 0
        assert ys[0] == pytest.approx(clean, abs=1e-12)
        assert np.all(np.diff(xs) > 0)
        assert np.all(np.diff(ys) <= 1e-15)
        outs = R.attack_outcomes(model, ds.images, ds.labels, name, cfg,
                                 heads=heads)
        assert ys[-1] == pytest.approx(R.summarize(outs)["robust_acc"], abs=1e-12)


def test_beta_sweep_dual_convention_labels(rig):
    model, heads, ds = rig
    rows = R.beta_sweep(model, ds.images[:16], ds.labels[:16], small_cfg(),
                        heads, points=4)
    assert len(rows) == 5
    assert rows[0]["beta_out"] == 0.0 and rows[-1]["beta_out"] == 1.0
    for r in rows:
        assert r["beta_out"] + r["beta_latent"] == pytest.approx(1.0, abs=1e-12)


def test_beta_sweep_needs_head(rig):
    model, _, ds = rig
    with pytest.raises(MissingHead):
        R.beta_sweep(model, ds.images, ds.labels, small_cfg(), {2: None})
    with pytest.raises(InvalidConfig):
        R.beta_sweep(model, ds.images, ds.labels, small_cfg(layer=None), None)


def test_lattice_shape_and_edge_consistency(rig):
    model, heads, ds = rig
    cfg = small_cfg(iters=4, runs=2)
    rows, edges = R.ablation_lattice(model, ds.images[:20], ds.labels[:20],
                                     cfg, heads=heads)
    assert [r["id"] for r in rows] == list(range(16))
    for r in rows:
        bits = (r["latent"], r["surrogate"], r["schedule"], r["multi_target"])
        assert r["id"] == sum(b << i for i, b in enumerate(bits))
    assert len(edges) == 32
    for e in edges:
        assert e["to_id"] > e["from_id"]
        assert bin(e["to_id"] ^ e["from_id"]).count("1") == 1
        assert e["delta_broken"] == rows[e["to_id"]]["broken"] - rows[e["from_id"]]["broken"]
    per_tactic = {}
    for e in edges:
        per_tactic.setdefault(e["tactic"], 0)
        per_tactic[e["tactic"]] += 1
    assert all(v == 8 for v in per_tactic.values())


def test_lattice_empty_subset_is_pgd(rig):
    model, heads, ds = rig
    cfg = small_cfg(iters=5, runs=2)
    rows, _ = R.ablation_lattice(model, ds.images[:24], ds.labels[:24],
                                 cfg, heads=heads)
    pgd_outs = R.attack_outcomes(model, ds.images[:24], ds.labels[:24], "pgd",
                                 cfg, baseline_alpha=cfg.alpha)
    pgd_row = R.summarize(pgd_outs)
    assert rows[0]["broken"] == pgd_row["broken"]
    assert rows[0]["robust_acc"] == pgd_row["robust_acc"]


def test_strongest_tactic_from_hand_built_edges():
    edges = []
    for name, deltas in (("latent", [3] * 8), ("surrogate", [1] * 8),
                         ("schedule", [0] * 8), ("multi_target", [2] * 8)):
        edges += [{"tactic": name, "delta_broken": d} for d in deltas]
    best, means = R.strongest_tactic(edges)
    assert best == "latent"
    assert means == {"latent": 3.0, "surrogate": 1.0, "schedule": 0.0,
                     "multi_target": 2.0}


def test_activation_dump_matches_manual_tap_means(rig):
    model, _, ds = rig
    x = ds.images[:10]
    rows = R.activation_dump(model, x, 1, top_k=0)
    with Tape():
        _, taps = model.forward_with_taps(Tensor(x))
    mean = taps[0].data.mean(axis=(0, 2, 3))
    assert len(rows) == mean.size
    mags = [abs(r["mean_activation"]) for r in rows]
    assert mags == sorted(mags, reverse=True)
    for r in rows:
        assert r["mean_activation"] == pytest.approx(float(mean[r["channel"]]),
                                                     abs=1e-7)
    top = R.activation_dump(model, x, 1, top_k=3)
    assert [r["channel"] for r in top] == [r["channel"] for r in rows[:3]]


def test_activation_dump_rejects_bad_layer(rig):
    model, _, ds = rig
    with pytest.raises(InvalidConfig):
        R.activation_dump(model, ds.images[:4], 0)
    with pytest.raises(InvalidConfig):
        R.activation_dump(model, ds.images[:4], model.num_layers)
    with pytest.raises(EmptyDataset):
        R.activation_dump(model, ds.images[:0], 1)


def test_write_csv_deterministic_bytes(tmp_path):
    header = ["name", "count", "value"]
    rows = [{"name": "a", "count": 3, "value": 1 / 3},
            ["b", np.int64(4), np.float64(0.1)]]
    p1, p2 = tmp_path / "one.csv", tmp_path / "two.csv"
    R.write_csv(p1, header, rows)
    R.write_csv(p2, header, rows)
    assert p1.read_bytes() == p2.read_bytes()
    text = p1.read_text()
    assert text.splitlines()[0] == "name,count,value"
    assert repr(1 / 3) in text
    assert text.endswith("\n")


def test_manifest_is_sorted_json_with_version(tmp_path):
    out = tmp_path / "table.csv.manifest.json"
    R.write_manifest(out, {"config": {"eps": np.float64(0.1)},
                           "seeds": {"model": 1}})
    body = json.loads(out.read_text())
    assert body["latentlab_version"]
    assert body["kernel_backend"] in ("pure", "compiled")
    assert body["config"]["eps"] == 0.1
    keys = list(body)
    assert keys == sorted(keys)
