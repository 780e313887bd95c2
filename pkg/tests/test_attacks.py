"""Baseline loops, the latent engine, and the two-stage orchestration."""

import numpy as np
import pytest

from latentlab import attacks as A
from latentlab.errors import InvalidConfig, MissingHead, TargetIsTruth
from latentlab.models import build_head, build_resnet_small


def toy(mseed=0):
    model = build_resnet_small(2, [4, 8], 5, (1, 8, 8), seed=mseed)
    heads = {1: build_head(model, 1, seed=100), 2: build_head(model, 2, seed=200)}
    return model, heads


def batch(dseed=0, n=6):
    rng = np.random.default_rng(dseed)
    x = rng.random((n, 1, 8, 8)).astype(np.float32)
    labels = rng.integers(0, 5, size=n)
    return x, labels, np.eye(5, dtype=np.float32)[labels]


def test_config_validation():
    for bad in (
        {"eps": 0.0},
        {"eps": 1.5},
        {"iters": 0},
        {"runs": 0},
        {"nu": 0.0},
        {"nu": 1.2},
        {"temperature": 0.0},
        {"alpha": -1.0},
        {"mim_decay": -0.1},
        {"layer": 0},
    ):
        with pytest.raises(InvalidConfig):
            A.AttackConfig(**bad).validate()
    A.AttackConfig().validate()


def test_step_schedule():
    cfg = A.AttackConfig(eps=0.1, iters=4)
    assert cfg.step_sizes() == pytest.approx([0.2, 0.15, 0.1, 0.05])
    flat = A.AttackConfig(eps=0.1, iters=4, alpha=0.03,
                          tactics=A.Tactics(schedule=False))
    assert flat.step_sizes() == [0.03] * 4


def test_beta_grid_centre_first():
    cfg = A.AttackConfig(runs=6)
    grid = cfg.beta_grid()
    assert sorted(grid) == pytest.approx([0.0, 1 / 6, 2 / 6, 3 / 6, 4 / 6, 5 / 6])
    assert grid == pytest.approx([0.5, 1 / 3, 2 / 3, 1 / 6, 5 / 6, 0.0])
    off = A.AttackConfig(runs=6, tactics=A.Tactics(latent=False))
    assert off.beta_grid() == [1.0]


def test_projection_invariants():
    rng = np.random.default_rng(0)
    for _ in range(200):
        x0 = rng.random((1, 2, 3, 3)).astype(np.float32)
        eps = float(rng.uniform(0.01, 0.5))
        pt = (x0 + rng.normal(scale=1.0, size=x0.shape)).astype(np.float32)
        p = A.project(pt, x0, eps)
        assert np.all(p >= 0) and np.all(p <= 1)
        assert np.abs(p - x0).max() <= eps + 1e-7
        assert np.array_equal(A.project(p, x0, eps), p)


def test_fgsm_is_one_pgd_step():
    model, _ = toy()
    x, _, y = batch()
    a = A.fgsm(model, x, y, 0.05)
    b = A.pgd(model, x, y, 0.05, 1, 0.05, random_start=False)
    assert np.abs(a.candidates - b.candidates).max() <= 1e-7
    assert a.forwards.sum() == x.shape[0]


def test_bim_tracks_pgd_without_restart():
    model, _ = toy()
    x, _, y = batch()
    a = A.bim(model, x, y, 0.05, 6, 0.01, record_iterates=True)
    b = A.pgd(model, x, y, 0.05, 6, 0.01, random_start=False, record_iterates=True)
    for xa, xb in zip(a.iterates, b.iterates):
        assert np.array_equal(xa, xb)
    assert np.array_equal(a.candidates, b.candidates)


def test_mim_decay_zero_is_bim():
    # with no accumulation the normalised gradient has the sign of the
    # raw gradient, so the iterates coincide exactly
    model, _ = toy()
    x, _, y = batch()
    a = A.mim(model, x, y, 0.05, 5, 0.01, decay=0.0)
    b = A.bim(model, x, y, 0.05, 5, 0.01)
    assert np.array_equal(a.candidates, b.candidates)


def test_engine_all_off_is_pgd():
    model, _ = toy()
    x, _, y = batch()
    off = A.Tactics(latent=False, surrogate=False, schedule=False, multi_target=False)
    cfg = A.AttackConfig(eps=8 / 255, iters=8, nu=1.0, alpha=2 / 255, tactics=off, seed=3)
    t_eng = A.lafeat(model, x, y, cfg, rngs=A.make_rngs(3, range(len(x))),
                     record_iterates=True)
    t_pgd = A.pgd(model, x, y, 8 / 255, 8, 2 / 255, rngs=A.make_rngs(3, range(len(x))),
                  random_start=True, record_iterates=True)
    for (alive, xh), px in zip(t_eng.iterates, t_pgd.iterates):
        assert np.array_equal(xh, px[alive])
    live = t_eng.first_hit < 0
    assert np.array_equal(t_eng.candidates[live], t_pgd.candidates[live])
    seen = ~np.isnan(t_eng.margins)
    assert np.array_equal(t_eng.margins[seen], t_pgd.margins[seen])


def test_engine_momentum_off_when_schedule_off():
    # the schedule tactic owns the optimizer recipe, so nu is ignored
    # whenever it is disabled: any nu must reproduce the nu=1 trajectory
    model, _ = toy()
    x, _, y = batch()
    off = A.Tactics(latent=False, surrogate=False, schedule=False, multi_target=False)
    cfg = A.AttackConfig(eps=8 / 255, iters=8, nu=0.75, alpha=2 / 255, tactics=off, seed=3)
    t_eng = A.lafeat(model, x, y, cfg, rngs=A.make_rngs(3, range(len(x))))
    t_pgd = A.pgd(model, x, y, 8 / 255, 8, 2 / 255, rngs=A.make_rngs(3, range(len(x))))
    live = t_eng.first_hit < 0
    assert np.array_equal(t_eng.candidates[live], t_pgd.candidates[live])


def test_engine_momentum_changes_trajectory():
    # with the schedule tactic on, nu=0.75 and nu=1.0 must disagree
    model, _ = toy()
    x, _, y = batch()
    sched = A.Tactics(latent=False, surrogate=False, schedule=True, multi_target=False)
    a = A.AttackConfig(eps=8 / 255, iters=8, nu=0.75, tactics=sched, seed=3)
    b = A.AttackConfig(eps=8 / 255, iters=8, nu=1.0, tactics=sched, seed=3)
    t_a = A.lafeat(model, x, y, a, rngs=A.make_rngs(3, range(len(x))))
    t_b = A.lafeat(model, x, y, b, rngs=A.make_rngs(3, range(len(x))))
    assert not np.array_equal(t_a.candidates, t_b.candidates)


def test_engine_latent_requires_head():
    model, _ = toy()
    x, _, y = batch()
    cfg = A.AttackConfig(iters=2)
    with pytest.raises(MissingHead):
        A.lafeat(model, x, y, cfg, beta=0.5)


def test_engine_target_equal_truth_rejected():
    model, heads = toy()
    x, labels, y = batch()
    cfg = A.AttackConfig(iters=2, tactics=A.Tactics(latent=False))
    with pytest.raises(TargetIsTruth):
        A.lafeat(model, x, y, cfg, target=int(labels[0]))


def test_solo_equals_batched():
    model, heads = toy()
    x, _, y = batch(dseed=0)
    cfg = A.AttackConfig(eps=0.1, iters=6, layer=2, seed=3)
    full = A.lafeat(model, x, y, cfg, beta=0.5, head=heads[2], layer=2,
                    rngs=A.make_rngs(3, range(len(x))))
    for j in (0, 3, 5):
        solo = A.lafeat(model, x[j:j + 1], y[j:j + 1], cfg, beta=0.5,
                        head=heads[2], layer=2, rngs=A.make_rngs(3, [j]))
        assert np.array_equal(full.candidates[j], solo.candidates[0])
        assert full.forwards[j] == solo.forwards[0]


def test_orchestration_modes_and_budget():
    model, heads = toy(mseed=0)
    rng = np.random.default_rng(5)
    x = rng.random((8, 1, 8, 8)).astype(np.float32)
    labels = rng.integers(0, 5, size=8)
    cfg = A.AttackConfig(eps=0.1, iters=8, runs=3, layer=2, seed=5)
    model.reset_forward_count()
    outcomes, stats = A.attack_dataset(model, x, labels, cfg, heads=heads)
    modes = {o.mode for o in outcomes}
    assert "clean" in modes and "margin" in modes
    assert stats["reported_forwards"] == stats["attack_forwards"]
    assert stats["budget_per_image"] == 8 * 3 * 5
    for o in outcomes:
        assert o.forwards <= stats["budget_per_image"]
        if o.mode == "clean":
            assert o.forwards == 0 and o.first_success_forwards == 0
        if o.mode == "margin":
            assert 0 < o.first_success_forwards <= o.forwards
        if o.mode == "none":
            assert not o.success and o.runs_used == 3 + 3 * 4
            assert o.forwards == stats["budget_per_image"]


def test_orchestration_is_reproducible():
    model, heads = toy()
    x, labels, _ = batch(dseed=5, n=4)
    cfg = A.AttackConfig(eps=0.1, iters=4, runs=2, layer=2, seed=11)
    a, _ = A.attack_dataset(model, x, labels, cfg, heads=heads)
    b, _ = A.attack_dataset(model, x, labels, cfg, heads=heads)
    for oa, ob in zip(a, b):
        assert oa.mode == ob.mode and oa.forwards == ob.forwards
        if oa.candidate is not None:
            assert np.array_equal(oa.candidate, ob.candidate)


def test_attack_image_matches_dataset_row():
    model, heads = toy(mseed=0)
    rng = np.random.default_rng(5)
    x = rng.random((8, 1, 8, 8)).astype(np.float32)
    labels = rng.integers(0, 5, size=8)
    cfg = A.AttackConfig(eps=0.1, iters=8, runs=3, layer=2, seed=5)
    outcomes, _ = A.attack_dataset(model, x, labels, cfg, heads=heads)
    for j in (4, 5):
        solo, _ = A.attack_image(model, x[j], int(labels[j]), cfg, heads=heads,
                                 image_index=j)
        assert solo.mode == outcomes[j].mode
        assert solo.forwards == outcomes[j].forwards
        if outcomes[j].candidate is not None:
            assert np.array_equal(solo.candidate, outcomes[j].candidate)


def test_multi_target_off_runs_only_stage_one():
    model, heads = toy()
    x, labels, _ = batch(dseed=5, n=4)
    cfg = A.AttackConfig(eps=0.05, iters=3, runs=4, layer=2, seed=7,
                         tactics=A.Tactics(multi_target=False))
    outcomes, stats = A.attack_dataset(model, x, labels, cfg, heads=heads)
    assert stats["budget_per_image"] == 3 * 4
    for o in outcomes:
        assert o.runs_used <= 4


def test_ball_and_range_fuzz():
    model, heads = toy()
    rng = np.random.default_rng(123)
    for trial in range(10):
        x = rng.random((3, 1, 8, 8)).astype(np.float32)
        labels = rng.integers(0, 5, size=3)
        eps = float(rng.choice([0.02, 0.1, 0.3]))
        cfg = A.AttackConfig(eps=eps, iters=4, runs=2, layer=1,
                             seed=int(rng.integers(1 << 16)))
        outcomes, _ = A.attack_dataset(model, x, labels, cfg, heads=heads)
        for o in outcomes:
            if o.mode == "clean" or o.candidate is None:
                continue
            d = np.abs(o.candidate - x[o.index])
            assert d.max() <= eps + 1e-7
            assert o.candidate.min() >= 0 and o.candidate.max() <= 1
