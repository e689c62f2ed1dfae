import math
import warnings

import numpy as np
import pytest
import torch

from motionslots.losses import (batch_motion_loss, brute_force_match, greedy_assign,
                                greedy_match, hungarian_match, motion_loss, recon_loss,
                                seg_cost_matrix, seg_loss, temporal_loss, total_loss)

EPS = 1e-8


def test_recon_loss():
    x = torch.rand(2, 3, 8, 8)
    assert recon_loss(x, x) == 0
    assert torch.isclose(recon_loss(x + 0.1, x), torch.tensor(0.01), rtol=1e-4)
    y = torch.rand_like(x)
    assert recon_loss(x, y) == recon_loss(y, x)
    with pytest.raises(ValueError):
        recon_loss(x, x[:, :2])


def test_seg_loss_examples():
    m = torch.tensor([1.0, 0.0, 1.0, 0.0])
    assert seg_loss(m, m.double()) <= 4 * EPS * 2
    assert math.isclose(float(seg_loss(torch.tensor([1.0, 0.0]), torch.tensor([0.5, 0.5]))),
                        2 * math.log(2), rel_tol=1e-6)
    assert math.isclose(float(seg_loss(torch.tensor([1.0], dtype=torch.float64),
                                       torch.tensor([0.0], dtype=torch.float64))),
                        -math.log(EPS), rel_tol=1e-9)


def test_seg_loss_nonnegative():
    g = torch.Generator().manual_seed(0)
    for _ in range(50):
        m = (torch.rand(20, generator=g) < 0.5).double()
        w = torch.rand(20, generator=g, dtype=torch.float64)
        assert seg_loss(m, w) >= 0


def test_cost_matrix_matches_seg_loss():
    g = torch.Generator().manual_seed(1)
    masks = (torch.rand(3, 12, generator=g) < 0.5).double()
    attn = torch.rand(12, 5, generator=g, dtype=torch.float64).softmax(-1)
    cost = seg_cost_matrix(masks, attn)
    for i in range(3):
        for k in range(5):
            assert torch.isclose(cost[i, k], seg_loss(masks[i], attn[:, k]), rtol=1e-12)


def test_greedy_examples():
    a = greedy_assign(np.zeros((0, 4)))
    assert a.pairs == [] and a.total_cost == 0.0
    a = greedy_assign([[0.1, 0.9], [0.2, 0.8]])
    assert a.pairs == [(0, 0), (1, 1)] and math.isclose(a.total_cost, 0.9)
    assert math.isclose(hungarian_match([[0.1, 0.9], [0.2, 0.8]]).total_cost, 0.9)
    a = greedy_assign([[1, 2], [1, 10]])
    assert a.pairs == [(0, 0), (1, 1)] and a.total_cost == 11
    assert hungarian_match([[1, 2], [1, 10]]).total_cost == 3


def test_greedy_tie_break_lowest_mask_then_slot():
    a = greedy_assign(np.ones((2, 3)))
    assert a.pairs == [(0, 0), (1, 1)]
    with pytest.raises(ValueError, match="3 motion masks"):
        greedy_assign(np.ones((3, 2)))


def test_hungarian_examples():
    assert hungarian_match([[4.0]]).pairs == [(0, 0)]
    cost = np.full((4, 4), 5.0)
    np.fill_diagonal(cost, 1.0)
    assert hungarian_match(cost).pairs == [(i, i) for i in range(4)]


def test_hungarian_beats_every_injection_on_5x8():
    rng = np.random.default_rng(0)
    for _ in range(5):
        cost = rng.random((5, 8))
        best = brute_force_match(cost)
        h = hungarian_match(cost)
        assert h.total_cost == best.total_cost
        # the oracle enumerates all 8*7*6*5*4 = 6720 injections
        assert math.perm(8, 5) == 6720


def test_greedy_equals_optimal_on_diagonally_dominant():
    rng = np.random.default_rng(1)
    for _ in range(50):
        c = rng.integers(1, 6)
        cost = rng.random((c, 8)) + 10.0
        cost[np.arange(c), rng.permutation(8)[:c]] = rng.random(c)
        assert math.isclose(greedy_assign(cost).total_cost, hungarian_match(cost).total_cost)


def test_motion_loss_examples():
    attn = torch.rand(4, 3).softmax(-1)
    assert motion_loss(torch.zeros(0, 4), attn) == 0
    m = torch.tensor([[1.0, 0.0, 0.0, 1.0]])
    attn = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    assert motion_loss(m, attn) < 1e-6


def test_motion_loss_hand_built_2x2():
    masks = torch.tensor([[1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]], dtype=torch.float64)
    attn = torch.tensor([[0.7, 0.2, 0.1], [0.6, 0.3, 0.1], [0.1, 0.2, 0.7], [0.3, 0.4, 0.3]],
                        dtype=torch.float64)
    # mask 0 -> slot 0 and mask 1 -> slot 2 are the globally cheapest pairs
    bce = lambda m, w: -sum(math.log(x) if y else math.log(1 - x) for y, x in zip(m, w))
    expected = bce([1, 1, 0, 0], [0.7, 0.6, 0.1, 0.3]) + bce([0, 0, 1, 0], [0.1, 0.1, 0.7, 0.3])
    assert greedy_match(masks, attn).pairs == [(0, 0), (1, 2)]
    assert math.isclose(float(motion_loss(masks, attn)), expected, rel_tol=1e-12)


def test_motion_loss_permutation_invariant():
    g = torch.Generator().manual_seed(2)
    for _ in range(20):
        masks = torch.zeros(3, 16, dtype=torch.float64)
        owner = torch.randint(0, 4, (16,), generator=g)
        for i in range(3):
            masks[i, owner == i] = 1
        masks = masks[masks.sum(1) > 0]
        attn = torch.rand(16, 5, generator=g, dtype=torch.float64).softmax(-1)
        perm = torch.randperm(masks.shape[0], generator=g)
        assert torch.isclose(motion_loss(masks, attn), motion_loss(masks[perm], attn), rtol=1e-12)


def test_batch_motion_loss_ignores_padding():
    attn = torch.rand(2, 3, 6, 4).softmax(-1)
    masks = torch.zeros(2, 3, 2, 6)
    counts = torch.zeros(2, 3, dtype=torch.long)
    masks[0, 1, 0, :3] = 1
    counts[0, 1] = 1
    masks[1, 2, 1, 4:] = 1  # beyond the count: padding, must be ignored
    expected = motion_loss(masks[0, 1, :1], attn[0, 1]) / 6
    assert torch.isclose(batch_motion_loss(attn, masks, counts), expected)


def test_temporal_loss_examples():
    s = torch.randn(4, 1, 5)
    assert temporal_loss(s).abs() < 1e-12
    d = torch.diag(torch.tensor([10.0, 10.0], dtype=torch.float64))
    assert temporal_loss(torch.stack([d, d])) < 1e-6
    swapped = torch.stack([d, d.flip(0)])
    assert math.isclose(float(temporal_loss(swapped)), 2.0, rel_tol=1e-6)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        assert temporal_loss(torch.randn(1, 3, 4)) == 0
        assert any("at least 2" in str(x.message) for x in w)


def test_temporal_loss_batched_mean_and_nonnegative():
    s = torch.randn(3, 4, 5, 6, dtype=torch.float64)
    per = torch.stack([temporal_loss(s[i]) for i in range(3)])
    assert torch.isclose(temporal_loss(s), per.mean())
    assert (per >= 0).all()


def test_temporal_loss_gradient_matches_finite_differences():
    torch.manual_seed(3)
    s = torch.randn(3, 4, 5, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(temporal_loss, (s,), eps=1e-6, atol=1e-8, rtol=1e-3)


def test_total_loss():
    one, two, four = torch.tensor(1.0), torch.tensor(2.0), torch.tensor(4.0)
    assert math.isclose(float(total_loss(one, two, four).total), 2.04, rel_tol=1e-7)
    assert total_loss(one, two, four, 0.0, 0.0).total == one
    z = torch.tensor(0.0)
    assert total_loss(z, z, z).total == 0
    parts = total_loss(one, two, four)
    d = parts.as_dict()
    assert d["lambda_motion"] == 0.5 and d["lambda_temporal"] == 0.01
