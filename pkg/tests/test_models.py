"""Residual backbone builder, taps, probe heads."""

import numpy as np
import pytest

from latentlab.errors import InvalidArchitecture, MissingHead, ShapeMismatch
from latentlab.models import (
    build_head,
    build_resnet_small,
    head_logits,
)
from latentlab.tensor import Tape, Tensor


def param_count_formula(blocks, widths, num_classes, in_channels):
    """Count written independently of the builder: walk the block plan."""
    total = in_channels * widths[0] * 9 + 2 * widths[0]  # stem conv + affine
    w_in = widths[0]
    for l, w in enumerate(widths):
        stride = 1 if l == 0 else 2
        total += w_in * w * 9 + 2 * w          # conv1 + affine
        total += w * w * 9 + 2 * w             # conv2 + affine
        if stride != 1 or w_in != w:
            total += w_in * w + 2 * w          # 1x1 projection + affine
        w_in = w
    total += widths[-1] * num_classes + num_classes
    return total


@pytest.mark.parametrize(
    "blocks,widths,k,shape",
    [(3, [16, 32, 64], 10, (3, 32, 32)), (2, [4, 8], 5, (1, 12, 12)), (1, [6], 3, (3, 16, 16))],
)
def test_param_count_matches_formula(blocks, widths, k, shape):
    model = build_resnet_small(blocks, widths, k, shape, seed=0)
    got = sum(p.data.size for p in model.parameters())
    assert got == param_count_formula(blocks, widths, k, shape[0])


def test_seed_determinism():
    x = np.random.default_rng(0).random((2, 3, 16, 16)).astype(np.float32)
    outs = []
    for seed in (7, 7, 8):
        model = build_resnet_small(2, [4, 8], 5, (3, 16, 16), seed=seed)
        with Tape():
            outs.append(model.forward(Tensor(x.copy())).data)
    assert np.array_equal(outs[0], outs[1])
    assert not np.array_equal(outs[0], outs[2])


def test_tap_shapes_and_layer_count():
    model = build_resnet_small(3, [16, 32, 64], 10, (3, 32, 32), seed=1)
    assert model.num_layers == 4
    x = Tensor(np.zeros((2, 3, 32, 32), dtype=np.float32))
    with Tape():
        logits, taps = model.forward_with_taps(x)
    assert logits.data.shape == (2, 10)
    assert [t.data.shape for t in taps] == [(2, 16, 32, 32), (2, 32, 16, 16), (2, 64, 8, 8)]


def test_forward_counter():
    model = build_resnet_small(1, [4], 3, (1, 8, 8), seed=0)
    assert model.forward_count == 0
    with Tape():
        model.forward(Tensor(np.zeros((3, 1, 8, 8), dtype=np.float32)))
        model.forward_with_taps(Tensor(np.zeros((2, 1, 8, 8), dtype=np.float32)))
    assert model.forward_count == 5
    model.reset_forward_count()
    assert model.forward_count == 0


def test_first_tap_is_local():
    # stem + two 3x3 convs in block 1 see at most 3 pixels out; a corner
    # poke must leave the far side of the first tap bitwise untouched.
    model = build_resnet_small(2, [4, 8], 5, (1, 12, 12), seed=3)
    rng = np.random.default_rng(9)
    x = rng.random((1, 1, 12, 12)).astype(np.float32)
    poked = x.copy()
    poked[0, 0, 0, 0] += 5.0
    with Tape():
        _, taps_a = model.forward_with_taps(Tensor(x))
    with Tape():
        logits_b, taps_b = model.forward_with_taps(Tensor(poked))
    a, b = taps_a[0].data, taps_b[0].data
    assert np.array_equal(a[:, :, 4:, :], b[:, :, 4:, :])
    assert np.array_equal(a[:, :, :, 4:], b[:, :, :, 4:])
    assert not np.array_equal(a[:, :, :4, :4], b[:, :, :4, :4])


def test_builder_rejects_bad_plans():
    with pytest.raises(InvalidArchitecture):
        build_resnet_small(0, [], 5, (3, 8, 8), seed=0)
    with pytest.raises(InvalidArchitecture):
        build_resnet_small(2, [4], 5, (3, 8, 8), seed=0)
    with pytest.raises(InvalidArchitecture):
        build_resnet_small(1, [4], 1, (3, 8, 8), seed=0)
    with pytest.raises(InvalidArchitecture):
        build_resnet_small(1, [0], 5, (3, 8, 8), seed=0)
    with pytest.raises(InvalidArchitecture):
        build_resnet_small(1, [4], 5, (3, 0, 8), seed=0)


def test_forward_rejects_wrong_shape():
    model = build_resnet_small(1, [4], 3, (3, 8, 8), seed=0)
    with pytest.raises(ShapeMismatch):
        with Tape():
            model.forward(Tensor(np.zeros((1, 3, 9, 9), dtype=np.float32)))


def test_head_matches_bruteforce():
    model = build_resnet_small(2, [4, 8], 5, (3, 8, 8), seed=2)
    head = build_head(model, 1, seed=11)
    x = np.random.default_rng(1).random((2, 3, 8, 8)).astype(np.float32)
    with Tape():
        _, taps = model.forward_with_taps(Tensor(x))
        got = head_logits(head, taps[0]).data
    tap = taps[0].data.astype(np.float64)
    phi = head.phi.data.astype(np.float64)
    eta = head.eta.data.astype(np.float64)
    for b in range(2):
        pooled = np.array([tap[b, c].mean() for c in range(tap.shape[1])])
        want = pooled @ phi + eta
        assert got[b] == pytest.approx(want, rel=1e-5)


def test_head_layer_range():
    model = build_resnet_small(2, [4, 8], 5, (3, 8, 8), seed=2)
    with pytest.raises(MissingHead):
        build_head(model, 0, seed=0)
    with pytest.raises(MissingHead):
        build_head(model, 3, seed=0)


def test_head_bias_starts_zero():
    model = build_resnet_small(2, [4, 8], 5, (3, 8, 8), seed=2)
    head = build_head(model, 2, seed=4)
    assert not np.any(head.eta.data)
    assert head.phi.data.shape == (8, 5)
