"""Segmentation metrics: attention-to-mask conversion, ARI / Fg.ARI, F-measure, mIoU.

Undefined values (e.g. Fg.ARI on a frame without foreground) are ``nan``, never 0,
and are excluded from averages.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass(frozen=True)
class SegmentationResult:
    labels_lowres: np.ndarray  # (h, w) slot id per feature cell
    labels: np.ndarray         # (H, W) nearest-neighbour upsampled


@dataclass
class MetricReport:
    fg_ari: float = math.nan
    ari: float = math.nan
    f_measure: float = math.nan
    miou: float = math.nan
    fg_ari_moving: float = math.nan
    fg_ari_static: float = math.nan
    num_frames: int = 0
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = asdict(self)
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.as_dict(), indent=1, sort_keys=True))

    def format(self) -> str:
        def f(v):
            return "undefined" if math.isnan(v) else f"{100 * v:.1f}"
        return (f"Fg.ARI {f(self.fg_ari)} (moving {f(self.fg_ari_moving)}, "
                f"static {f(self.fg_ari_static)}) | ARI {f(self.ari)} | "
                f"F {f(self.f_measure)} | mIoU {f(self.miou)} | frames {self.num_frames}")


def attention_to_masks(attn: np.ndarray, feature_shape: tuple[int, int],
                       frame_shape: tuple[int, int] | None = None) -> SegmentationResult:
    """Per-location argmax over slots (ties to the lowest slot), then upsampling.

    The slot-axis softmax applied before the argmax does not change it, so
    it is skipped.
    """
    attn = np.asarray(attn)
    h, w = feature_shape
    if attn.shape[0] != h * w:
        raise ValueError(f"attention has {attn.shape[0]} rows, expected {h * w}")
    low = np.argmax(attn, axis=1).reshape(h, w)
    if frame_shape is None:
        return SegmentationResult(low, low)
    fh, fw = frame_shape
    if fh % h or fw % w:
        raise ValueError(f"frame shape {frame_shape} not a multiple of {feature_shape}")
    up = np.repeat(np.repeat(low, fh // h, axis=0), fw // w, axis=1)
    return SegmentationResult(low, up)


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2.0


def contingency(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def ari(pred, gt) -> float:
    """Adjusted Rand index from the contingency table.

    When the expected and maximum index coincide the score is 1.0 for identical
    partitions and 0.0 otherwise.
    """
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.size == 0:
        raise ValueError("ari of empty labelings is undefined")
    if pred.shape != gt.shape:
        raise ValueError(f"label length mismatch: {pred.size} vs {gt.size}")
    table = contingency(pred, gt)
    n = pred.size
    index = _comb2(table).sum()
    sum_a = _comb2(table.sum(axis=1)).sum()
    sum_b = _comb2(table.sum(axis=0)).sum()
    pairs = n * (n - 1) / 2.0
    expected = sum_a * sum_b / pairs if pairs else 0.0
    max_index = (sum_a + sum_b) / 2.0
    if max_index == expected:
        same = (table > 0).sum(axis=0).max() == 1 and (table > 0).sum(axis=1).max() == 1
        return 1.0 if same else 0.0
    return float((index - expected) / (max_index - expected))


def fg_ari(pred, gt, ids: Iterable[int] | None = None) -> float:
    """ARI over ground-truth foreground pixels (gt != 0), optionally restricted
    to the instances in ``ids``. ``nan`` when no pixel qualifies."""
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    sel = gt != 0
    if ids is not None:
        sel &= np.isin(gt, np.fromiter(ids, dtype=np.int64))
    if not sel.any():
        return math.nan
    return ari(pred[sel], gt[sel])


def _matched_overlaps(pred: np.ndarray, gt: np.ndarray, pred_background: int | None):
    gt_ids = [i for i in np.unique(gt) if i != 0]
    pred_ids = [i for i in np.unique(pred) if i != pred_background]
    if not gt_ids:
        return None
    g = np.stack([gt == i for i in gt_ids]).reshape(len(gt_ids), -1).astype(np.int64)
    if not pred_ids:
        return len(gt_ids), [], g.sum(axis=1), None, None
    p = np.stack([pred == i for i in pred_ids]).reshape(len(pred_ids), -1).astype(np.int64)
    inter = g @ p.T
    union = g.sum(1)[:, None] + p.sum(1)[None, :] - inter
    iou = inter / np.maximum(union, 1)
    rows, cols = linear_sum_assignment(-iou)
    return len(gt_ids), list(zip(rows, cols)), g.sum(axis=1), p.sum(axis=1), (inter, iou)


def miou(pred, gt, pred_background: int | None = None) -> float:
    """Mean IoU over gt foreground segments under a Hungarian IoU matching;
    unmatched gt segments count as 0."""
    res = _matched_overlaps(np.asarray(pred), np.asarray(gt), pred_background)
    if res is None:
        return math.nan
    n_gt, pairs, _, _, mats = res
    if not pairs:
        return 0.0
    _, iou = mats
    return float(sum(iou[r, c] for r, c in pairs) / n_gt)


def f_measure(pred, gt, pred_background: int | None = None) -> float:
    """Mean over gt foreground segments of the matched pair's F1 (2PR / (P + R))."""
    res = _matched_overlaps(np.asarray(pred), np.asarray(gt), pred_background)
    if res is None:
        return math.nan
    n_gt, pairs, g_sizes, p_sizes, mats = res
    if not pairs:
        return 0.0
    inter, _ = mats
    total = 0.0
    for r, c in pairs:
        if inter[r, c] == 0:
            continue
        precision = inter[r, c] / p_sizes[c]
        recall = inter[r, c] / g_sizes[r]
        total += 2 * precision * recall / (precision + recall)
    return float(total / n_gt)


@dataclass
class MetricAccumulator:
    """Per-frame metrics averaged over frames, ignoring undefined values."""

    values: dict = field(default_factory=lambda: {k: [] for k in (
        "fg_ari", "ari", "f_measure", "miou", "fg_ari_moving", "fg_ari_static")})

    def add_frame(self, pred: np.ndarray, gt: np.ndarray, moving_ids=None, static_ids=None,
                  pred_background: int | None = None) -> None:
        v = self.values
        v["fg_ari"].append(fg_ari(pred, gt))
        v["ari"].append(ari(pred, gt))
        v["f_measure"].append(f_measure(pred, gt, pred_background))
        v["miou"].append(miou(pred, gt, pred_background))
        if moving_ids is not None:
            v["fg_ari_moving"].append(fg_ari(pred, gt, moving_ids) if moving_ids else math.nan)
        if static_ids is not None:
            v["fg_ari_static"].append(fg_ari(pred, gt, static_ids) if static_ids else math.nan)

    def report(self) -> MetricReport:
        def mean(xs):
            xs = [x for x in xs if not math.isnan(x)]
            return float(np.mean(xs)) if xs else math.nan
        r = MetricReport(num_frames=len(self.values["ari"]))
        for k, xs in self.values.items():
            setattr(r, k, mean(xs))
        return r
