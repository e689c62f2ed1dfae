"""Training objectives: reconstruction, motion supervision via set matching,
temporal slot consistency, and their weighted sum."""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

SEG_EPS = 1e-8


@dataclass(frozen=True)
class Assignment:
    slot_for_mask: np.ndarray   # (C,) slot index matched to each mask
    matched: np.ndarray         # (C,) bool
    total_cost: float

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return [(i, int(s)) for i, s in enumerate(self.slot_for_mask) if self.matched[i]]


@dataclass
class LossBreakdown:
    recon: torch.Tensor
    motion: torch.Tensor
    temporal: torch.Tensor
    total: torch.Tensor
    lambda_motion: float
    lambda_temporal: float

    def as_dict(self) -> dict[str, float]:
        def f(x):
            return float(x.detach()) if torch.is_tensor(x) else float(x)
        return {"recon": f(self.recon), "motion": f(self.motion),
                "temporal": f(self.temporal), "total": f(self.total),
                "lambda_motion": self.lambda_motion, "lambda_temporal": self.lambda_temporal}


def recon_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return F.mse_loss(pred, target, reduction="mean")


def seg_loss(m: torch.Tensor, w: torch.Tensor, eps: float = SEG_EPS) -> torch.Tensor:
    """Summed binary cross-entropy; ``w`` and ``1 - w`` are clamped at ``eps``."""
    m = torch.as_tensor(m, dtype=w.dtype) if not torch.is_tensor(m) else m.to(w.dtype)
    return -(m * w.clamp_min(eps).log() + (1 - m) * (1 - w).clamp_min(eps).log()).sum(dim=-1)


def seg_cost_matrix(masks: torch.Tensor, attn: torch.Tensor, eps: float = SEG_EPS) -> torch.Tensor:
    """``cost[i, k] = seg_loss(masks[i], attn[:, k])`` for masks ``(C, N)``, attn ``(N, K)``."""
    masks = masks.to(attn.dtype)
    log_w = attn.clamp_min(eps).log()
    log_1mw = (1 - attn).clamp_min(eps).log()
    return -(masks @ log_w + (1 - masks) @ log_1mw)


def greedy_assign(cost) -> Assignment:
    """Repeatedly take the globally cheapest free (mask, slot) pair.

    Ties resolve to the lowest mask index, then the lowest slot index.
    """
    cost = np.asarray(cost, dtype=np.float64)
    c, k = cost.shape
    if c > k:
        raise ValueError(f"{c} motion masks cannot be matched to {k} slots; filter upstream")
    slot_for_mask = np.full(c, -1, dtype=np.int64)
    work = cost.copy()
    for _ in range(c):
        i, j = np.unravel_index(np.argmin(work), work.shape)
        slot_for_mask[i] = j
        work[i, :] = np.inf
        work[:, j] = np.inf
    total = math.fsum(cost[i, slot_for_mask[i]] for i in range(c))
    return Assignment(slot_for_mask, np.ones(c, dtype=bool), total)


def greedy_match(masks: torch.Tensor, attn: torch.Tensor) -> Assignment:
    """Greedy mask-to-slot assignment under the segmentation-loss cost."""
    if masks.shape[0] == 0:
        return Assignment(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=bool), 0.0)
    with torch.no_grad():
        cost = seg_cost_matrix(masks, attn).cpu().numpy()
    return greedy_assign(cost)


def hungarian_match(cost) -> Assignment:
    """Minimum-cost injective assignment of rows (masks) to columns (slots)."""
    cost = np.asarray(cost, dtype=np.float64)
    c, k = cost.shape
    if c > k:
        raise ValueError(f"{c} motion masks cannot be matched to {k} slots")
    rows, cols = linear_sum_assignment(cost)
    slot_for_mask = np.full(c, -1, dtype=np.int64)
    slot_for_mask[rows] = cols
    total = math.fsum(cost[i, slot_for_mask[i]] for i in range(c))
    return Assignment(slot_for_mask, np.ones(c, dtype=bool), total)


def brute_force_match(cost) -> Assignment:
    """Exhaustive search over all injections; only for small test instances.

    Candidates within rounding of the vectorized minimum are re-scored with an
    exact sum so the reported total is comparable bit-for-bit.
    """
    cost = np.asarray(cost, dtype=np.float64)
    c, k = cost.shape
    if c > k:
        raise ValueError(f"{c} motion masks cannot be matched to {k} slots")
    if c == 0:
        return Assignment(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=bool), 0.0)
    perms = np.array(list(itertools.permutations(range(k), c)), dtype=np.int64)
    totals = cost[np.arange(c), perms].sum(axis=1)
    slack = 1e-9 * max(1.0, float(np.abs(totals).max()))
    best, best_perm = math.inf, None
    for perm in perms[totals <= totals.min() + slack]:
        total = math.fsum(cost[i, perm[i]] for i in range(c))
        if total < best:
            best, best_perm = total, perm
    return Assignment(best_perm.copy(), np.ones(c, dtype=bool), best)


def motion_loss(masks: torch.Tensor, attn: torch.Tensor,
                assignment: Assignment | None = None) -> torch.Tensor:
    """Sum of BCE terms over masks matched to slots; unmatched slots are free.

    masks: ``(C, N)``; attn: ``(N, K)``. The assignment is a constant for the
    gradient.
    """
    if masks.shape[0] == 0:
        return attn.sum() * 0.0
    assignment = assignment or greedy_match(masks, attn)
    idx = torch.as_tensor(assignment.slot_for_mask, device=attn.device)
    chosen = attn[:, idx].transpose(0, 1)  # (C, N)
    keep = torch.as_tensor(assignment.matched, device=attn.device)
    return seg_loss(masks, chosen)[keep].sum()


def batch_motion_loss(attn: torch.Tensor, masks: torch.Tensor, counts: torch.Tensor) -> torch.Tensor:
    """Mean over frames of the per-frame motion loss.

    attn: ``(B, T, N, K)``; masks: ``(B, T, Cmax, N)`` zero-padded; counts ``(B, T)``.
    """
    b, t = attn.shape[:2]
    total = attn.sum() * 0.0
    for i in range(b):
        for j in range(t):
            c = int(counts[i, j])
            if c:
                total = total + motion_loss(masks[i, j, :c], attn[i, j])
    return total / (b * t)


def temporal_loss(slots: torch.Tensor) -> torch.Tensor:
    """``sum_t || I - softmax(S^t S^{t+1 T}) ||_F`` with a row-wise softmax.

    slots: ``(T, K, D)`` or ``(B, T, K, D)``; batched input is averaged over B.
    """
    batched = slots.dim() == 4
    if not batched:
        slots = slots[None]
    b, t, k, _ = slots.shape
    if t < 2:
        warnings.warn("temporal_loss needs at least 2 frames; returning 0", stacklevel=2)
        return slots.sum() * 0.0
    sim = torch.einsum("btkd,btld->btkl", slots[:, :-1], slots[:, 1:])
    eye = torch.eye(k, dtype=slots.dtype, device=slots.device)
    diff = eye - sim.softmax(dim=-1)
    # sqrt(x + tiny) keeps the gradient finite when the difference is exactly zero
    norms = (diff.pow(2).sum(dim=(-2, -1)) + 1e-30).sqrt()
    per_clip = norms.sum(dim=1)
    return per_clip.mean() if batched else per_clip[0]


def total_loss(recon: torch.Tensor, motion: torch.Tensor, temporal: torch.Tensor,
               lambda_motion: float = 0.5, lambda_temporal: float = 0.01) -> LossBreakdown:
    total = recon + lambda_motion * motion + lambda_temporal * temporal
    return LossBreakdown(recon, motion, temporal, total, lambda_motion, lambda_temporal)
