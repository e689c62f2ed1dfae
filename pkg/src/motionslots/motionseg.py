"""Sparse, noisy motion-mask supervision and motion-segment post-processing."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .datagen import ClipSample, DatasetFormatError

_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True)
class MotionMask:
    mask: np.ndarray = field(repr=False)  # (H', W') bool
    confidence: float = 1.0
    source_frame: int = 0

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.dtype != bool:
            if not np.isin(m, (0, 1)).all():
                raise ValueError("motion mask must be binary")
            m = m.astype(bool)
            object.__setattr__(self, "mask", m)
        if not m.any():
            raise ValueError("motion mask must contain at least one positive pixel")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")


class MotionMaskSet:
    """Per-frame lists of pairwise-disjoint motion masks (frames may be empty)."""

    def __init__(self, frames: Sequence[Sequence[MotionMask]], shape: tuple[int, int]):
        self.frames = [list(f) for f in frames]
        self.shape = tuple(shape)
        for t, masks in enumerate(self.frames):
            acc = np.zeros(self.shape, dtype=bool)
            for m in masks:
                if m.mask.shape != self.shape:
                    raise ValueError(f"frame {t}: mask shape {m.mask.shape} != {self.shape}")
                if (acc & m.mask).any():
                    raise ValueError(f"frame {t}: motion masks overlap")
                acc |= m.mask

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, t: int) -> list[MotionMask]:
        return self.frames[t]

    @property
    def counts(self) -> list[int]:
        return [len(f) for f in self.frames]

    def check_slots(self, num_slots: int) -> None:
        worst = max(self.counts, default=0)
        if worst > num_slots:
            raise ValueError(f"{worst} motion masks in one frame exceed {num_slots} slots")

    def stacked(self, t: int) -> np.ndarray:
        """(C^t, H'*W') float array of the masks of frame t."""
        masks = self.frames[t]
        if not masks:
            return np.zeros((0, self.shape[0] * self.shape[1]), dtype=np.float32)
        return np.stack([m.mask.reshape(-1) for m in masks]).astype(np.float32)

    def label_map(self, t: int) -> np.ndarray:
        out = np.zeros(self.shape, dtype=np.int32)
        for j, m in enumerate(self.frames[t]):
            out[m.mask] = j + 1
        return out


@dataclass(frozen=True)
class DegradeConfig:
    drop_rate: float = 0.0
    # chance that a static object's mask is supervised too (1.0 = all objects)
    static_keep_rate: float = 0.0
    boundary_erosion: int = 0
    noise_flip_rate: float = 0.0
    # Beta(a, b) confidences; None gives confidence 1
    confidence_beta: tuple[float, float] | None = None

    def __post_init__(self):
        for name in ("drop_rate", "static_keep_rate", "noise_flip_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.boundary_erosion < 0:
            raise ValueError(f"boundary_erosion must be >= 0, got {self.boundary_erosion}")


class Segment(NamedTuple):
    mask: np.ndarray
    confidence: float
    magnitude: float


@dataclass(frozen=True)
class PostprocessParams:
    min_pixels: int = 100
    min_bbox_side: int = 10
    max_area_fraction: float = 0.6
    boundary_margin: int = 15
    max_components: int | None = 1
    conf_threshold: float = 0.25
    mag_threshold: float = 0.05

    @classmethod
    def permissive(cls) -> "PostprocessParams":
        return cls(min_pixels=0, min_bbox_side=0, max_area_fraction=1.0, boundary_margin=0,
                   max_components=None, conf_threshold=0.0, mag_threshold=0.0)


def connected_components(mask: np.ndarray) -> tuple[int, list[np.ndarray]]:
    """4-connected components, ordered by their first pixel in row-major order."""
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=_FOUR_CONNECTED)
    return n, [labels == i for i in range(1, n + 1)]


def _count_components(mask: np.ndarray) -> int:
    return ndimage.label(mask, structure=_FOUR_CONNECTED)[1]


def downsample_mask(mask: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Block-majority pooling; a block with exactly half positives is positive."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    th, tw = target
    if th <= 0 or tw <= 0 or h % th or w % tw:
        raise ValueError(f"mask shape {mask.shape} is not divisible by target {target}")
    bh, bw = h // th, w // tw
    counts = mask.reshape(th, bh, tw, bw).sum(axis=(1, 3))
    return 2 * counts >= bh * bw


def _keep(seg: Segment, image_shape: tuple[int, int], p: PostprocessParams) -> bool:
    h, w = image_shape
    m = np.asarray(seg.mask, dtype=bool)
    area = int(m.sum())
    if area == 0:
        return False
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    r0, r1, c0, c1 = rows[0], rows[-1], cols[0], cols[-1]
    if area < p.min_pixels or min(r1 - r0 + 1, c1 - c0 + 1) < p.min_bbox_side:
        return False
    if area > p.max_area_fraction * h * w:
        return False
    margin = p.boundary_margin
    if r0 < margin or c0 < margin or r1 > h - 1 - margin or c1 > w - 1 - margin:
        return False
    if p.max_components is not None and _count_components(m) > p.max_components:
        return False
    if seg.confidence < p.conf_threshold or seg.magnitude < p.mag_threshold:
        return False
    return True


def postprocess(masks: Iterable[Segment | tuple], image_shape: tuple[int, int],
                params: PostprocessParams | None = None) -> list[Segment]:
    """Drop segments that are too small, too large, near the border, fragmented,
    low-confidence or nearly static; survivors are returned unchanged, in order."""
    params = params or PostprocessParams()
    out = []
    for seg in masks:
        seg = seg if isinstance(seg, Segment) else Segment(*seg)
        if _keep(seg, image_shape, params):
            out.append(seg)
    return out


def normalized_flow_magnitude(flow: np.ndarray) -> np.ndarray:
    mag = np.hypot(flow[..., 0], flow[..., 1])
    peak = mag.max()
    return mag / peak if peak > 0 else np.zeros_like(mag)


def oracle_segments(clip: ClipSample, t: int, degrade: DegradeConfig,
                    rng: np.random.Generator) -> list[tuple[int, Segment]]:
    """Full-resolution degraded segments for frame t as ``(object_id, segment)``."""
    moving = clip.moving_ids[t]
    ids = sorted(set(np.unique(clip.instance_masks[t]).tolist()) - {0})
    mag = normalized_flow_magnitude(clip.flow[t])
    out = []
    for obj_id in ids:
        if obj_id in moving:
            if rng.random() < degrade.drop_rate:
                continue
        elif not (degrade.static_keep_rate > 0 and rng.random() < degrade.static_keep_rate):
            continue
        m = clip.instance_masks[t] == obj_id
        if degrade.boundary_erosion:
            m = ndimage.binary_erosion(m, structure=_FOUR_CONNECTED,
                                       iterations=degrade.boundary_erosion)
        if degrade.noise_flip_rate:
            m = m ^ (rng.random(m.shape) < degrade.noise_flip_rate)
        conf = 1.0
        if degrade.confidence_beta is not None:
            conf = float(rng.beta(*degrade.confidence_beta))
        if not m.any():
            continue
        out.append((obj_id, Segment(m, conf, float(mag[m].mean()))))
    return out


def oracle_motion_masks(clip: ClipSample, degrade: DegradeConfig | None = None,
                        feature_shape: tuple[int, int] | None = None, seed: int = 0,
                        postprocess_params: PostprocessParams | None = None) -> MotionMaskSet:
    """Motion masks derived from ground truth, degraded and downsampled.

    Overlaps created by downsampling or noise go to the front-most object
    (highest id), matching the renderer's z-order.
    """
    degrade = degrade or DegradeConfig()
    feature_shape = tuple(feature_shape or clip.frame_shape)
    rng = np.random.default_rng(seed)
    frames = []
    for t in range(clip.length):
        segs = oracle_segments(clip, t, degrade, rng)
        if postprocess_params is not None:
            segs = [(i, s) for i, s in segs if _keep(s, clip.frame_shape, postprocess_params)]
        claimed = np.zeros(feature_shape, dtype=bool)
        masks = []
        for obj_id, seg in sorted(segs, key=lambda p: -p[0]):
            small = downsample_mask(seg.mask, feature_shape) & ~claimed
            if not small.any():
                continue
            claimed |= small
            masks.append((obj_id, MotionMask(small, seg.confidence, t)))
        frames.append([m for _, m in sorted(masks, key=lambda p: p[0])])
    return MotionMaskSet(frames, feature_shape)


def write_mask_set(mask_set: MotionMaskSet, directory: str | Path) -> None:
    """Per-frame 16-bit PNG label maps (value j+1 = mask j) plus ``masks.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"shape": list(mask_set.shape), "frames": []}
    for t in range(len(mask_set)):
        Image.fromarray(mask_set.label_map(t).astype(np.uint16)).save(
            directory / f"motion_{t:04d}.png")
        meta["frames"].append([{"label": j + 1, "confidence": m.confidence,
                                "source_frame": m.source_frame}
                               for j, m in enumerate(mask_set[t])])
    (directory / "masks.json").write_text(json.dumps(meta, indent=1))


def read_mask_set(directory: str | Path) -> MotionMaskSet:
    directory = Path(directory)
    meta_path = directory / "masks.json"
    try:
        meta = json.loads(meta_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"{meta_path}: unreadable ({exc})") from exc
    shape = tuple(meta["shape"])
    frames = []
    for t, entries in enumerate(meta["frames"]):
        path = directory / f"motion_{t:04d}.png"
        labels = np.asarray(Image.open(path)).astype(np.int32)
        if labels.shape != shape:
            raise DatasetFormatError(f"{path}: shape {labels.shape} != {shape}")
        if labels.max() > len(entries):
            raise DatasetFormatError(
                f"{path}: label {labels.max()} but only {len(entries)} masks listed")
        frames.append([MotionMask(labels == e["label"], e["confidence"], e["source_frame"])
                       for e in entries])
    return MotionMaskSet(frames, shape)
