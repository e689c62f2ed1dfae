"""Procedural toy videos of colored sprites with exact masks, flow and motion labels.

Objects live in world coordinates; the camera is a pure integer translation, so
screen position = world position + accumulated camera offset.  ``camera_motion[t]``
is the image-space translation that static content undergoes from frame ``t`` to
``t + 1`` (i.e. the flow of the background).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

SHAPE_KINDS = ("circle", "square", "triangle")
MIN_OBJECT_SIZE = 8.0
FLOW_MAGIC = b"MFLO"
_SPLIT_CODES = {"train": 0, "val": 1}


class DatasetFormatError(ValueError):
    """A dataset file is corrupt, truncated or inconsistent with its manifest."""


@dataclass(frozen=True)
class GenConfig:
    frame_shape: tuple[int, int] = (64, 64)
    clip_length: int = 10
    num_objects: tuple[int, int] = (3, 5)
    object_size: tuple[float, float] = (10.0, 16.0)
    mover_prob: float = 0.5
    # exact number of movers per clip; overrides mover_prob when set
    num_movers: int | None = None
    speed: tuple[float, float] = (1.0, 2.5)
    # max |camera translation| per frame and axis, integer pixels
    camera_speed: int = 1
    camera_change_prob: float = 0.2
    background: str = "gradient"
    smooth: bool = False
    moving_threshold: float = 0.01
    shape_kinds: tuple[str, ...] = SHAPE_KINDS

    def validate(self) -> None:
        h, w = self.frame_shape
        lo, hi = self.num_objects
        smin, smax = self.object_size
        if h <= 0 or w <= 0:
            raise ValueError(f"frame_shape must be positive, got {self.frame_shape}")
        if self.clip_length < 1:
            raise ValueError(f"clip_length must be >= 1, got {self.clip_length}")
        if not 1 <= lo <= hi:
            raise ValueError(f"num_objects must satisfy 1 <= min <= max, got {self.num_objects}")
        if smin < MIN_OBJECT_SIZE or smax < smin:
            raise ValueError(
                f"object_size must satisfy {MIN_OBJECT_SIZE} <= min <= max, got {self.object_size}")
        if smax > min(h, w):
            raise ValueError(
                f"object_size max {smax} does not fit in frame_shape {self.frame_shape}")
        if not 0.0 <= self.mover_prob <= 1.0:
            raise ValueError(f"mover_prob must be in [0, 1], got {self.mover_prob}")
        if self.num_movers is not None and not 0 <= self.num_movers <= lo:
            raise ValueError(
                f"num_movers must be in [0, min num_objects={lo}], got {self.num_movers}")
        if not 0.0 <= self.speed[0] <= self.speed[1]:
            raise ValueError(f"speed must satisfy 0 <= min <= max, got {self.speed}")
        if self.camera_speed < 0:
            raise ValueError(f"camera_speed must be >= 0, got {self.camera_speed}")
        if not 0.0 <= self.camera_change_prob <= 1.0:
            raise ValueError(f"camera_change_prob must be in [0, 1], got {self.camera_change_prob}")
        if self.background not in ("solid", "gradient"):
            raise ValueError(f"background must be 'solid' or 'gradient', got {self.background!r}")
        bad = set(self.shape_kinds) - set(SHAPE_KINDS)
        if bad or not self.shape_kinds:
            raise ValueError(f"shape_kinds must be a non-empty subset of {SHAPE_KINDS}")


@dataclass(frozen=True)
class ObjectSpec:
    shape_kind: str
    color: tuple[float, float, float]
    size: float
    # (T, 2) world-space centers as (x, y)
    trajectory: np.ndarray = field(repr=False)
    is_mover: bool


@dataclass(frozen=True)
class Background:
    color0: tuple[float, float, float]
    color1: tuple[float, float, float] | None = None
    # unit direction of the gradient in world (x, y)
    direction: tuple[float, float] = (1.0, 0.0)


@dataclass
class ClipSample:
    frames: np.ndarray            # (T, H, W, 3) float32 in [0, 1]
    instance_masks: np.ndarray    # (T, H, W) int32, 0 = background
    flow: np.ndarray              # (T, H, W, 2) float32 forward (u, v)
    moving_ids: list[frozenset[int]]
    camera_motion: np.ndarray     # (T, 2) float32, image translation t -> t+1
    centers: np.ndarray           # (T, n_objects, 2) screen-space (x, y)
    objects: tuple[ObjectSpec, ...] = ()

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_shape(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    @property
    def num_objects(self) -> int:
        return self.centers.shape[1]

    def static_ids(self, t: int) -> frozenset[int]:
        present = set(np.unique(self.instance_masks[t]).tolist()) - {0}
        return frozenset(present - self.moving_ids[t])

    def validate(self) -> None:
        t, h, w, c = self.frames.shape
        if c != 3 or self.instance_masks.shape != (t, h, w) or self.flow.shape != (t, h, w, 2):
            raise ValueError("inconsistent clip array shapes")
        if len(self.moving_ids) != t or self.camera_motion.shape != (t, 2):
            raise ValueError("per-frame labels do not match clip length")
        for i, ids in enumerate(self.moving_ids):
            present = set(np.unique(self.instance_masks[i]).tolist())
            missing = set(ids) - present
            if missing:
                raise ValueError(f"frame {i}: moving ids {sorted(missing)} absent from mask")


@dataclass(frozen=True)
class DatasetManifest:
    clip_count: int
    frame_shape: tuple[int, int]
    clip_length: int
    seed: int
    split: str = "train"
    max_objects: int = 0
    gen_config: dict | None = None

    def __post_init__(self):
        if self.clip_count <= 0:
            raise ValueError(f"clip_count must be > 0, got {self.clip_count}")
        if self.split not in _SPLIT_CODES:
            raise ValueError(f"split must be one of {sorted(_SPLIT_CODES)}, got {self.split!r}")


# --------------------------------------------------------------------------- rendering

def _shape_mask(kind: str, center: np.ndarray, size: float, h: int, w: int) -> np.ndarray:
    ys = np.arange(h, dtype=np.float64)[:, None] + 0.5
    xs = np.arange(w, dtype=np.float64)[None, :] + 0.5
    dx = xs - center[0]
    dy = ys - center[1]
    r = size / 2.0
    if kind == "circle":
        return dx * dx + dy * dy <= r * r
    if kind == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if kind == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    raise ValueError(f"unknown shape kind {kind!r}")


def _background_image(bg: Background, offset: np.ndarray, h: int, w: int) -> np.ndarray:
    if bg.color1 is None:
        img = np.empty((h, w, 3))
        img[:] = bg.color0
        return img
    # evaluated in world coordinates so integer camera shifts move it exactly
    wy = np.arange(h, dtype=np.float64)[:, None] - offset[1]
    wx = np.arange(w, dtype=np.float64)[None, :] - offset[0]
    dx, dy = bg.direction
    s = 0.5 + ((wx - w / 2.0) * dx + (wy - h / 2.0) * dy) / (h + w)
    s = np.clip(s, 0.0, 1.0)[..., None]
    c0 = np.asarray(bg.color0)
    c1 = np.asarray(bg.color1)
    return c0 + (c1 - c0) * s


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _from_uint8(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float32) / np.float32(255.0)


def _quantize(img: np.ndarray) -> np.ndarray:
    return _from_uint8(_to_uint8(img))


def render_clip(objects: Sequence[ObjectSpec], camera_motion: np.ndarray, config: GenConfig,
                background: Background | None = None,
                final_positions: np.ndarray | None = None) -> ClipSample:
    """Rasterize objects over a background; later objects occlude earlier ones.

    ``final_positions`` are the world centers one step past the last frame, used
    for the last frame's flow; by default the last displacement is repeated.
    """
    h, w = config.frame_shape
    camera_motion = np.asarray(camera_motion, dtype=np.float64).reshape(-1, 2)
    t_len = camera_motion.shape[0]
    if np.any(camera_motion != np.round(camera_motion)):
        raise ValueError("camera_motion must be integer pixel translations")
    if background is None:
        background = Background(color0=(0.5, 0.5, 0.5))
    n = len(objects)
    world = np.zeros((t_len + 1, n, 2))
    for i, obj in enumerate(objects):
        traj = np.asarray(obj.trajectory, dtype=np.float64)
        if traj.shape != (t_len, 2):
            raise ValueError(f"object {i + 1}: trajectory shape {traj.shape} != {(t_len, 2)}")
        world[:t_len, i] = traj
    if final_positions is not None:
        world[t_len] = np.asarray(final_positions, dtype=np.float64).reshape(n, 2)
    elif t_len >= 2:
        world[t_len] = 2 * world[t_len - 1] - world[t_len - 2]
    else:
        world[t_len] = world[t_len - 1]

    offsets = np.zeros((t_len + 1, 2))
    offsets[1:] = np.cumsum(camera_motion, axis=0)
    screen = world + offsets[:, None, :]

    frames = np.empty((t_len, h, w, 3), dtype=np.float32)
    masks = np.zeros((t_len, h, w), dtype=np.int32)
    flow = np.empty((t_len, h, w, 2), dtype=np.float32)
    for t in range(t_len):
        img = _background_image(background, offsets[t], h, w)
        flow[t, ..., 0] = camera_motion[t, 0]
        flow[t, ..., 1] = camera_motion[t, 1]
        for i, obj in enumerate(objects):
            m = _shape_mask(obj.shape_kind, screen[t, i], obj.size, h, w)
            img[m] = obj.color
            masks[t][m] = i + 1
            flow[t][m] = screen[t + 1, i] - screen[t, i]
        if config.smooth:
            img = ndimage.gaussian_filter(img, sigma=(0.6, 0.6, 0))
        frames[t] = _quantize(img)

    clip = ClipSample(frames=frames, instance_masks=masks, flow=flow,
                      moving_ids=[frozenset()] * t_len,
                      camera_motion=camera_motion.astype(np.float32),
                      centers=screen[:t_len].astype(np.float64),
                      objects=tuple(objects))
    clip.moving_ids = label_moving(clip, threshold=config.moving_threshold)
    return clip


def _random_color(rng: np.random.Generator, avoid: Sequence[np.ndarray], min_dist=0.35):
    for _ in range(100):
        c = rng.integers(0, 256, size=3) / 255.0
        if all(np.linalg.norm(c - a) >= min_dist for a in avoid):
            break
    return tuple(float(v) for v in c)


def _reflect(pos: np.ndarray, vel: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Advance one step, bouncing off the box [lo, hi] independently per axis."""
    p = pos + vel
    v = vel.copy()
    for a in range(2):
        if hi[a] <= lo[a]:
            p[a], v[a] = lo[a], 0.0
            continue
        while p[a] < lo[a] or p[a] > hi[a]:
            p[a] = 2 * lo[a] - p[a] if p[a] < lo[a] else 2 * hi[a] - p[a]
            v[a] = -v[a]
    return p, v


def generate_clip(spec_seed: int, config: GenConfig | None = None) -> ClipSample:
    """Sample a clip. The result is a pure function of ``(spec_seed, config)``."""
    config = config or GenConfig()
    config.validate()
    rng = np.random.default_rng(spec_seed)
    h, w = config.frame_shape
    t_len = config.clip_length

    c0 = rng.integers(0, 256, size=3) / 255.0
    if config.background == "gradient":
        c1 = np.clip(c0 + rng.uniform(-0.25, 0.25, size=3), 0, 1)
        ang = rng.uniform(0, 2 * np.pi)
        bg = Background(tuple(c0), tuple(c1), (math.cos(ang), math.sin(ang)))
    else:
        bg = Background(tuple(c0))

    n = int(rng.integers(config.num_objects[0], config.num_objects[1] + 1))
    if config.num_movers is not None:
        movers = np.zeros(n, dtype=bool)
        movers[rng.choice(n, size=config.num_movers, replace=False)] = True
    else:
        movers = rng.random(n) < config.mover_prob

    objects = []
    finals = np.zeros((n, 2))
    colors = [c0]
    for i in range(n):
        kind = config.shape_kinds[int(rng.integers(len(config.shape_kinds)))]
        size = float(rng.uniform(*config.object_size))
        color = _random_color(rng, colors)
        colors.append(np.asarray(color))
        r = size / 2.0
        pos = np.array([rng.uniform(r, w - r), rng.uniform(r, h - r)])
        if movers[i]:
            ang = rng.uniform(0, 2 * np.pi)
            vel = rng.uniform(*config.speed) * np.array([math.cos(ang), math.sin(ang)])
        else:
            vel = np.zeros(2)
        lo, hi = np.array([r, r]), np.array([w - r, h - r])
        traj = np.empty((t_len, 2))
        for t in range(t_len):
            traj[t] = pos
            pos, vel = _reflect(pos, vel, lo, hi)
        finals[i] = pos
        objects.append(ObjectSpec(kind, color, size, traj, bool(movers[i])))

    cam = np.zeros((t_len, 2))
    k = config.camera_speed
    vel = rng.integers(-k, k + 1, size=2) if k > 0 else np.zeros(2, dtype=int)
    for t in range(t_len):
        if k > 0 and rng.random() < config.camera_change_prob:
            vel = rng.integers(-k, k + 1, size=2)
        cam[t] = vel
    return render_clip(objects, cam, config, background=bg, final_positions=finals)


def clip_seed(seed: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence([seed, _SPLIT_CODES[split], index])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def generate_dataset(clip_count: int, config: GenConfig | None = None, seed: int = 0,
                     split: str = "train") -> tuple[list[ClipSample], DatasetManifest]:
    config = config or GenConfig()
    config.validate()
    clips = [generate_clip(clip_seed(seed, split, i), config) for i in range(clip_count)]
    manifest = DatasetManifest(clip_count=clip_count, frame_shape=tuple(config.frame_shape),
                               clip_length=config.clip_length, seed=seed, split=split,
                               max_objects=config.num_objects[1],
                               gen_config=_config_dict(config))
    return clips, manifest


def _config_dict(config: GenConfig) -> dict:
    d = asdict(config)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def gen_config_from_dict(d: dict) -> GenConfig:
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return GenConfig(**kw)


# --------------------------------------------------------------------------- labeling

def label_moving(clip: ClipSample, threshold: float = 0.05) -> list[frozenset[int]]:
    """Label objects as independently moving, per frame.

    For each consecutive pair (t, t+1) every object center is propagated by the
    camera motion and compared with its true center at t+1; the object is moving
    when the distance, as a fraction of the image diagonal, exceeds ``threshold``.
    The last frame reuses the (T-2, T-1) pair. Objects not visible in both frames
    of a pair are skipped.
    """
    t_len = clip.length
    h, w = clip.frame_shape
    diag = math.hypot(h, w)
    # slack absorbs float rounding so threshold 0 means "any world motion"
    limit = threshold * diag + 1e-9
    present = [set(np.unique(clip.instance_masks[t]).tolist()) - {0} for t in range(t_len)]
    pairs = []
    for t in range(t_len - 1):
        moving = set()
        for obj_id in present[t] & present[t + 1]:
            c0 = clip.centers[t, obj_id - 1]
            c1 = clip.centers[t + 1, obj_id - 1]
            d = np.hypot(*(c1 - c0 - clip.camera_motion[t]))
            if d > limit:
                moving.add(obj_id)
        pairs.append(frozenset(moving))
    if t_len == 1:
        return [frozenset()]
    return pairs + [pairs[-1]]


# --------------------------------------------------------------------------- I/O

def write_flow(path: str | Path, flow: np.ndarray) -> None:
    flow = np.asarray(flow, dtype="<f4")
    h, w, c = flow.shape
    if c != 2:
        raise ValueError(f"flow must be (H, W, 2), got {flow.shape}")
    with open(path, "wb") as f:
        f.write(FLOW_MAGIC)
        f.write(struct.pack("<II", w, h))
        f.write(np.ascontiguousarray(flow).tobytes())


def read_flow(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise DatasetFormatError(f"{path}: truncated header, expected 12 bytes, found {len(data)}")
    if data[:4] != FLOW_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {data[:4]!r}, expected {FLOW_MAGIC!r}")
    w, h = struct.unpack("<II", data[4:12])
    expected = 12 + w * h * 2 * 4
    if len(data) != expected:
        raise DatasetFormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float32)


def _objects_to_json(objects: Iterable[ObjectSpec]) -> list[dict]:
    return [{"shape_kind": o.shape_kind, "color": list(o.color), "size": o.size,
             "trajectory": np.asarray(o.trajectory).tolist(), "is_mover": o.is_mover}
            for o in objects]


def write_clip(clip: ClipSample, clip_dir: str | Path) -> None:
    clip_dir = Path(clip_dir)
    clip_dir.mkdir(parents=True, exist_ok=True)
    for t in range(clip.length):
        rgb = _to_uint8(clip.frames[t])
        Image.fromarray(rgb, mode="RGB").save(clip_dir / f"frame_{t:04d}.png")
        Image.fromarray(clip.instance_masks[t].astype(np.uint16)).save(clip_dir / f"mask_{t:04d}.png")
        write_flow(clip_dir / f"flow_{t:04d}.bin", clip.flow[t])
    labels = {
        "moving_ids": [sorted(s) for s in clip.moving_ids],
        "camera_motion": clip.camera_motion.tolist(),
        "centers": clip.centers.tolist(),
        "objects": _objects_to_json(clip.objects),
    }
    (clip_dir / "labels.json").write_text(json.dumps(labels, indent=1))


def read_clip(clip_dir: str | Path, clip_length: int, max_objects: int | None = None) -> ClipSample:
    clip_dir = Path(clip_dir)
    labels_path = clip_dir / "labels.json"
    try:
        labels = json.loads(labels_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"{labels_path}: unreadable labels ({exc})") from exc
    frames, masks, flows = [], [], []
    for t in range(clip_length):
        fp = clip_dir / f"frame_{t:04d}.png"
        mp = clip_dir / f"mask_{t:04d}.png"
        for p in (fp, mp):
            if not p.exists():
                raise DatasetFormatError(f"{p}: missing (clip_length={clip_length})")
        try:
            rgb = np.asarray(Image.open(fp).convert("RGB"))
            mask = np.asarray(Image.open(mp)).astype(np.int32)
        except OSError as exc:
            raise DatasetFormatError(f"{fp.parent}: corrupt image at t={t} ({exc})") from exc
        if max_objects is not None and mask.max() > max_objects:
            raise DatasetFormatError(
                f"{mp}: max instance id {mask.max()} exceeds manifest max_objects {max_objects}")
        frames.append(_from_uint8(rgb))
        masks.append(mask)
        flows.append(read_flow(clip_dir / f"flow_{t:04d}.bin"))
    objects = tuple(ObjectSpec(o["shape_kind"], tuple(o["color"]), o["size"],
                               np.asarray(o["trajectory"], dtype=np.float64), o["is_mover"])
                    for o in labels.get("objects", []))
    clip = ClipSample(frames=np.stack(frames), instance_masks=np.stack(masks),
                      flow=np.stack(flows),
                      moving_ids=[frozenset(x) for x in labels["moving_ids"]],
                      camera_motion=np.asarray(labels["camera_motion"], dtype=np.float32),
                      centers=np.asarray(labels["centers"], dtype=np.float64).reshape(
                          clip_length, -1, 2),
                      objects=objects)
    n_obj = clip.centers.shape[1]
    if clip.instance_masks.max() > n_obj:
        raise DatasetFormatError(
            f"{clip_dir}: max instance id {clip.instance_masks.max()} exceeds object count {n_obj}")
    try:
        clip.validate()
    except ValueError as exc:
        raise DatasetFormatError(f"{clip_dir}: {exc}") from exc
    return clip


def write_dataset(clips: Sequence[ClipSample], manifest: DatasetManifest,
                  root_path: str | Path) -> Path:
    if len(clips) != manifest.clip_count:
        raise ValueError(f"manifest clip_count {manifest.clip_count} != {len(clips)} clips")
    split_dir = Path(root_path) / manifest.split
    split_dir.mkdir(parents=True, exist_ok=True)
    for i, clip in enumerate(clips):
        write_clip(clip, split_dir / f"clip_{i:05d}")
    meta = asdict(manifest)
    meta["frame_shape"] = list(manifest.frame_shape)
    (split_dir / "manifest.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return split_dir


def read_manifest(root_path: str | Path, split: str = "train") -> DatasetManifest:
    path = Path(root_path) / split / "manifest.json"
    try:
        meta = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"{path}: unreadable manifest ({exc})") from exc
    meta["frame_shape"] = tuple(meta["frame_shape"])
    return DatasetManifest(**meta)


def read_dataset(root_path: str | Path, split: str = "train") -> tuple[list[ClipSample], DatasetManifest]:
    manifest = read_manifest(root_path, split)
    split_dir = Path(root_path) / split
    clips = []
    for i in range(manifest.clip_count):
        clip = read_clip(split_dir / f"clip_{i:05d}", manifest.clip_length,
                         manifest.max_objects or None)
        if clip.frame_shape != tuple(manifest.frame_shape):
            raise DatasetFormatError(
                f"{split_dir / f'clip_{i:05d}'}: frame shape {clip.frame_shape} "
                f"!= manifest {manifest.frame_shape}")
        clips.append(clip)
    return clips, manifest
