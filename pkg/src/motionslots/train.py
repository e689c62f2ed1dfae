"""Training and evaluation harness."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
import torch

from .datagen import ClipSample, GenConfig, generate_dataset
from .losses import LossBreakdown, batch_motion_loss, recon_loss, temporal_loss, total_loss
from .metrics import MetricAccumulator, MetricReport, attention_to_masks
from .model import (ModelConfig, VideoSlotModel, load_checkpoint, save_checkpoint,
                    sliding_windows)
from .motionseg import DegradeConfig, oracle_motion_masks

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class BatchCompositionError(ConfigError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, last_finite: dict | None):
        self.step = step
        self.last_finite = last_finite
        super().__init__(f"non-finite loss at step {step}; last finite losses: {last_finite}")


@dataclass
class TrainConfig:
    batch_size: int = 20
    epochs: int = 500
    base_lr: float = 1e-3
    warmup_iters: int = 2000
    decay_rate: float = 0.5
    decay_step: int = 500000
    grad_clip: float | None = None
    clip_length: int = 5
    lambda_motion: float = 0.5
    lambda_temporal: float = 0.01
    use_motion: bool = True
    use_recon: bool = True
    use_temporal: bool = True
    min_motion_fraction: float = 0.5
    # model
    num_slots: int = 10
    slot_dim: int = 64
    feature_dim: int = 64
    encoder_channels: int = 64
    encoder_depth: int = 4
    downsample: int = 4
    decoder_channels: tuple[int, int, int] = (64, 32, 32)
    decode_mode: str = "one_shot"
    inference_mode: str = "single_step"
    iterations: int = 3
    use_memory: bool = True
    learnable_memory_init: bool = False
    position_encoding: bool = True
    slot_mlp: bool = False
    # motion-mask oracle
    drop_rate: float = 0.0
    static_keep_rate: float = 0.0
    boundary_erosion: int = 0
    noise_flip_rate: float = 0.0
    # bookkeeping
    seed: int = 0
    deterministic: bool = True
    checkpoint_every: int = 10
    eval_every: int = 0
    eval_stride: int = 5

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.clip_length < 1:
            raise ConfigError(f"clip_length must be >= 1, got {self.clip_length}")
        if self.warmup_iters < 0 or self.decay_step <= 0 or self.decay_rate <= 0:
            raise ConfigError("warmup_iters >= 0, decay_step > 0 and decay_rate > 0 required")
        if not 0.0 <= self.min_motion_fraction <= 1.0:
            raise ConfigError("min_motion_fraction must be in [0, 1]")

    def model_config(self, frame_shape: tuple[int, int]) -> ModelConfig:
        return ModelConfig(
            num_slots=self.num_slots, slot_dim=self.slot_dim, feature_dim=self.feature_dim,
            encoder_channels=self.encoder_channels, encoder_depth=self.encoder_depth,
            downsample=self.downsample, decoder_channels=tuple(self.decoder_channels),
            decode_mode=self.decode_mode, inference_mode=self.inference_mode,
            iterations=self.iterations, use_memory=self.use_memory,
            learnable_memory_init=self.learnable_memory_init,
            position_encoding=self.position_encoding, slot_mlp=self.slot_mlp,
            frame_shape=tuple(frame_shape))

    def degrade_config(self) -> DegradeConfig:
        return DegradeConfig(drop_rate=self.drop_rate, static_keep_rate=self.static_keep_rate,
                             boundary_erosion=self.boundary_erosion,
                             noise_flip_rate=self.noise_flip_rate)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def replace(self, **overrides) -> "TrainConfig":
        return dataclasses.replace(self, **overrides)


def desk_profile(**overrides) -> TrainConfig:
    """64x64 frames, T=5, K=10, short schedule and narrow layers for one machine."""
    base = dict(epochs=40, warmup_iters=200, slot_dim=32, feature_dim=32, encoder_channels=32,
                decoder_channels=(32, 16, 16), checkpoint_every=10)
    base.update(overrides)
    return TrainConfig(**base)


# --------------------------------------------------------------------------- config files

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_value(raw: str, hint) -> object:
    raw = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if raw.lower() in ("none", "null", ""):
            return None
        inner = [a for a in args if a is not type(None)]
        return _parse_value(raw, inner[0])
    if origin is tuple:
        parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
        return tuple(_parse_value(p, args[0]) for p in parts)
    if hint is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if hint is int:
        return int(raw)
    if hint is float:
        return float(raw)
    return raw


def config_field_types() -> dict:
    return typing.get_type_hints(TrainConfig)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    """Parse ``key = value`` lines (``#`` starts a comment) into typed overrides."""
    hints = config_field_types()
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in hints:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            out[key] = _parse_value(raw, hints[key])
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    return out


def load_config(path: str | Path | None = None, overrides: Mapping[str, object] | None = None,
                base: TrainConfig | None = None) -> TrainConfig:
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(), str(path)))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    base = base or TrainConfig()
    try:
        return dataclasses.replace(base, **values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def format_config(config: TrainConfig) -> str:
    lines = []
    for k, v in config.to_dict().items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- schedule & batches

def lr_at(step: int, config: TrainConfig | None = None) -> float:
    """Linear warmup from 0, then continuous exponential decay from the warmup end."""
    c = config or TrainConfig()
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step < c.warmup_iters:
        return c.base_lr * step / c.warmup_iters
    return c.base_lr * c.decay_rate ** ((step - c.warmup_iters) / c.decay_step)


def build_batches(has_motion, batch_size: int, seed, min_fraction: float = 0.5,
                  enforce: bool = True) -> Iterator[list[int]]:
    """One epoch of batches covering every clip exactly once.

    With ``enforce`` each batch holds at least ``ceil(min_fraction * size)``
    clips with non-empty motion masks.
    """
    flags = np.asarray(getattr(has_motion, "has_motion", has_motion), dtype=bool)
    n = flags.size
    if n == 0:
        return iter([])
    rng = np.random.default_rng(seed)
    nb = math.ceil(n / batch_size)
    sizes = [batch_size] * (nb - 1) + [n - batch_size * (nb - 1)]
    if not enforce:
        order = rng.permutation(n)
        bounds = np.cumsum([0] + sizes)
        return iter([order[a:b].tolist() for a, b in zip(bounds[:-1], bounds[1:])])
    need = [math.ceil(min_fraction * s) for s in sizes]
    motion = rng.permutation(np.flatnonzero(flags))
    if motion.size < sum(need):
        raise BatchCompositionError(
            f"only {motion.size} of {n} clips ({100 * motion.size / n:.0f}%) have motion masks "
            f"< {100 * min_fraction:.0f}% required per batch ({sum(need)} needed)")
    rest = rng.permutation(np.concatenate([motion[sum(need):], np.flatnonzero(~flags)]))
    batches = []
    m_pos = r_pos = 0
    for size, k in zip(sizes, need):
        b = list(motion[m_pos:m_pos + k]) + list(rest[r_pos:r_pos + size - k])
        m_pos += k
        r_pos += size - k
        batches.append([int(i) for i in rng.permutation(b)])
    return iter(batches)


# --------------------------------------------------------------------------- data

class ClipDataset:
    """Fixed-length windows of clips with precomputed motion-mask supervision.

    Motion masks are only reachable through :meth:`motion_batch`, which counts
    its calls in ``motion_reads``.
    """

    def __init__(self, clips: Sequence[ClipSample], window: int, feature_shape,
                 max_masks: int, degrade: DegradeConfig | None = None, seed: int = 0):
        if not clips:
            raise ConfigError("dataset is empty")
        self.clips = list(clips)
        self.window = window
        self.feature_shape = tuple(feature_shape)
        self.frame_shape = self.clips[0].frame_shape
        n_cells = self.feature_shape[0] * self.feature_shape[1]
        self.items: list[tuple[int, int]] = []
        for ci, clip in enumerate(self.clips):
            if clip.frame_shape != self.frame_shape:
                raise ConfigError(f"clip {ci} frame shape {clip.frame_shape} != {self.frame_shape}")
            for s in range(0, clip.length - window + 1, window):
                self.items.append((ci, s))
        if not self.items:
            raise ConfigError(f"no clip has {window} frames")
        n = len(self.items)
        self.frames = torch.empty((n, window, 3, *self.frame_shape))
        self._masks = torch.zeros((n, window, max_masks, n_cells), dtype=torch.uint8)
        self._counts = torch.zeros((n, window), dtype=torch.int64)
        degrade = degrade or DegradeConfig()
        mask_sets = {}
        for i, (ci, s) in enumerate(self.items):
            clip = self.clips[ci]
            self.frames[i] = torch.from_numpy(clip.frames[s:s + window]).permute(0, 3, 1, 2)
            if ci not in mask_sets:
                mask_sets[ci] = oracle_motion_masks(clip, degrade, self.feature_shape,
                                                    seed=seed * 1_000_003 + ci)
            ms = mask_sets[ci]
            for t in range(window):
                masks = sorted(ms[s + t], key=lambda m: -int(m.mask.sum()))[:max_masks]
                for j, m in enumerate(masks):
                    self._masks[i, t, j] = torch.from_numpy(m.mask.reshape(-1).astype(np.uint8))
                self._counts[i, t] = len(masks)
        self.has_motion = (self._counts.sum(dim=1) > 0).numpy()
        self.motion_reads = 0

    def __len__(self) -> int:
        return len(self.items)

    def motion_batch(self, indices) -> tuple[torch.Tensor, torch.Tensor]:
        self.motion_reads += 1
        idx = torch.as_tensor(indices)
        return self._masks[idx].float(), self._counts[idx]


# --------------------------------------------------------------------------- training

@dataclass
class RunRecord:
    config: Mapping
    losses: list[dict] = field(default_factory=list)
    metrics: list[dict] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    final_report: MetricReport | None = None
    model: VideoSlotModel | None = field(default=None, repr=False)

    @property
    def epochs_completed(self) -> int:
        return len({r["epoch"] for r in self.losses})


def _seed_all(seed: int, deterministic: bool) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def compute_losses(model: VideoSlotModel, frames: torch.Tensor, config: TrainConfig,
                   masks: torch.Tensor | None = None, counts: torch.Tensor | None = None,
                   generator=None) -> tuple[LossBreakdown, dict]:
    out = model.forward_clip(frames, generator=generator)
    zero = frames.sum() * 0.0
    recon_mse = recon_loss(out["recon"], frames)
    recon = recon_mse if config.use_recon else zero
    if config.use_motion and masks is not None:
        motion = batch_motion_loss(out["attn"], masks.to(frames.dtype), counts)
    else:
        motion = zero
    if config.use_temporal and frames.shape[1] >= 2:
        temporal = temporal_loss(out["slots"])
    else:
        temporal = zero
    lam_m = config.lambda_motion if config.use_motion else 0.0
    lam_t = config.lambda_temporal if config.use_temporal else 0.0
    parts = total_loss(recon, motion, temporal, lam_m, lam_t)
    out["recon_mse"] = recon_mse
    return parts, out


def _state_path(ckpt: Path) -> Path:
    return ckpt.with_suffix(".state.pt")


def train(config: TrainConfig, dataset: ClipDataset | Sequence[ClipSample],
          val_clips: Sequence[ClipSample] | None = None, out_dir: str | Path | None = None,
          resume: str | Path | None = None, progress: bool = False) -> RunRecord:
    """Optimize the total loss with Adam under the warmup/decay schedule."""
    _seed_all(config.seed, config.deterministic)
    if not isinstance(dataset, ClipDataset):
        if not dataset:
            raise ConfigError("training dataset is empty")
        try:
            probe = config.model_config(dataset[0].frame_shape)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        dataset = ClipDataset(dataset, config.clip_length, probe.feature_shape,
                              config.num_slots, config.degrade_config(), seed=config.seed)
    try:
        model_cfg = config.model_config(dataset.frame_shape)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    model = VideoSlotModel(model_cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.base_lr)
    slot_rng = torch.Generator().manual_seed(config.seed)
    record = RunRecord(config=types.MappingProxyType(config.to_dict()), model=model)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(format_config(config))
    log_file = open(out / "metrics.jsonl", "a") if out else None

    step, start_epoch = 0, 0
    if resume is not None:
        loaded, meta = load_checkpoint(resume)
        if loaded.config != model_cfg:
            raise ConfigError(f"{resume}: checkpoint model config differs from training config")
        model.load_state_dict(loaded.state_dict())
        state = torch.load(_state_path(Path(resume)), weights_only=False)
        optimizer.load_state_dict(state["optimizer"])
        slot_rng.set_state(state["slot_rng"])
        torch.set_rng_state(state["torch_rng"])
        step, start_epoch = int(meta["step"]), int(meta["epoch"]) + 1

    enforce = config.use_motion and config.lambda_motion > 0
    last_finite = None
    model.train()
    try:
        for epoch in range(start_epoch, config.epochs):
            t0 = time.time()
            batches = build_batches(dataset.has_motion, config.batch_size,
                                    seed=[config.seed, epoch],
                                    min_fraction=config.min_motion_fraction, enforce=enforce)
            for batch in batches:
                lr = lr_at(step, config)
                for g in optimizer.param_groups:
                    g["lr"] = lr
                frames = dataset.frames[batch]
                masks = counts = None
                if enforce:
                    masks, counts = dataset.motion_batch(batch)
                parts, _ = compute_losses(model, frames, config, masks, counts, slot_rng)
                if not torch.isfinite(parts.total):
                    raise TrainingDivergedError(step, last_finite)
                optimizer.zero_grad(set_to_none=True)
                parts.total.backward()
                if config.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                optimizer.step()
                last_finite = parts.as_dict()
                entry = {"step": step, "epoch": epoch, "lr": lr, **last_finite}
                record.losses.append(entry)
                if log_file:
                    log_file.write(json.dumps(entry) + "\n")
                step += 1
            if progress:
                ep = [r["total"] for r in record.losses if r["epoch"] == epoch]
                log.info("epoch %d  loss %.4f  (%.1fs)", epoch, float(np.mean(ep)), time.time() - t0)
            last = epoch == config.epochs - 1
            if val_clips is not None and config.eval_every and (
                    (epoch + 1) % config.eval_every == 0 or last):
                rep = evaluate(model, val_clips, stride=config.eval_stride,
                               window=config.clip_length)
                model.train()
                record.metrics.append({"epoch": epoch, **rep.as_dict()})
                if log_file:
                    log_file.write(json.dumps({"epoch": epoch, "eval": rep.as_dict()}) + "\n")
            if out and ((epoch + 1) % max(config.checkpoint_every, 1) == 0 or last):
                path = out / f"checkpoint_{epoch:04d}.safetensors"
                save_checkpoint(path, model, {"step": step, "epoch": epoch,
                                              "train_config": config.to_dict()})
                torch.save({"optimizer": optimizer.state_dict(), "slot_rng": slot_rng.get_state(),
                            "torch_rng": torch.get_rng_state()}, _state_path(path))
                record.checkpoints.append(str(path))
    finally:
        if log_file:
            log_file.close()
    model.eval()
    return record


# --------------------------------------------------------------------------- evaluation

def _frame_predictions(model: VideoSlotModel, clip: ClipSample, window: int, stride: int,
                       mask_source: str) -> dict[int, np.ndarray]:
    """Full-resolution slot label map for each frame, from the first window covering it."""
    cfg = model.config
    preds: dict[int, np.ndarray] = {}
    for s, e in sliding_windows(clip.length, window, stride):
        frames = torch.from_numpy(clip.frames[s:e]).permute(0, 3, 1, 2)[None]
        gen = torch.Generator().manual_seed(0)
        out = model.forward_clip(frames, generator=gen)
        for t in range(e - s):
            if s + t in preds:
                continue
            if mask_source == "alpha" and out["alphas"] is not None:
                labels = out["alphas"][0, t].argmax(dim=0).numpy()
            else:
                labels = attention_to_masks(out["attn"][0, t].numpy(), cfg.feature_shape,
                                            clip.frame_shape).labels
            preds[s + t] = labels
    return preds


@torch.no_grad()
def evaluate(checkpoint: VideoSlotModel | str | Path, clips: Sequence[ClipSample],
             stride: int = 5, window: int = 5, mask_source: str = "attention") -> MetricReport:
    """Sliding-window evaluation with per-frame metrics averaged over frames."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    model = checkpoint
    if not isinstance(model, VideoSlotModel):
        model, _ = load_checkpoint(checkpoint)
    was_training = model.training
    model.eval()
    acc = MetricAccumulator()
    for clip in clips:
        if tuple(clip.frame_shape) != tuple(model.config.frame_shape):
            raise ConfigError(f"clip frame shape {clip.frame_shape} does not match checkpoint "
                              f"{model.config.frame_shape}")
        preds = _frame_predictions(model, clip, window, stride, mask_source)
        for t in range(clip.length):
            acc.add_frame(preds[t], clip.instance_masks[t], clip.moving_ids[t],
                          clip.static_ids(t))
    model.train(was_training)
    return acc.report()


def motion_mask_report(clips: Sequence[ClipSample], degrade: DegradeConfig,
                       feature_shape, seed: int = 0) -> MetricReport:
    """Score the raw motion masks themselves as a segmentation (uncovered pixels
    form one extra segment)."""
    acc = MetricAccumulator()
    for ci, clip in enumerate(clips):
        ms = oracle_motion_masks(clip, degrade, feature_shape, seed=seed * 1_000_003 + ci)
        fh, fw = clip.frame_shape
        rh, rw = fh // feature_shape[0], fw // feature_shape[1]
        for t in range(clip.length):
            labels = np.repeat(np.repeat(ms.label_map(t), rh, axis=0), rw, axis=1)
            acc.add_frame(labels, clip.instance_masks[t], clip.moving_ids[t], clip.static_ids(t))
    return acc.report()


# --------------------------------------------------------------------------- profiles

@dataclass(frozen=True)
class ExperimentProfile:
    """Data sizes and schedule for a ladder experiment.

    Training clips are one window long; validation clips are longer and scored
    with sliding windows.
    """
    name: str
    frame_size: int
    train_clips: int
    val_clips: int
    epochs: int
    downsample: int
    warmup_iters: int
    object_size: tuple[float, float]
    train_length: int = 5
    val_length: int = 10
    data_seed: int = 0

    def gen_config(self, length: int) -> GenConfig:
        return GenConfig(frame_shape=(self.frame_size, self.frame_size), clip_length=length,
                         object_size=self.object_size)

    def datasets(self) -> tuple[list[ClipSample], list[ClipSample]]:
        train_clips, _ = generate_dataset(self.train_clips, self.gen_config(self.train_length),
                                          seed=self.data_seed, split="train")
        val_clips, _ = generate_dataset(self.val_clips, self.gen_config(self.val_length),
                                        seed=self.data_seed, split="val")
        return train_clips, val_clips

    def train_config(self, **overrides) -> TrainConfig:
        base = dict(epochs=self.epochs, downsample=self.downsample,
                    warmup_iters=self.warmup_iters, clip_length=self.train_length)
        base.update(overrides)
        return desk_profile(**base)


# 64x64 frames, 2000 clips, 40 epochs, K=10
DESK = ExperimentProfile("desk", 64, 2000, 100, epochs=40, downsample=4, warmup_iters=200,
                         object_size=(10.0, 16.0))
# same 16x16 feature grid from 32x32 frames; fits a single CPU core in hours
REDUCED = ExperimentProfile("reduced", 32, 500, 50, epochs=30, downsample=2, warmup_iters=100,
                            object_size=(8.0, 12.0))


# --------------------------------------------------------------------------- ablations

# Six-variant ladder: iterative per-slot -> single-step -> +temporal -> one-shot
# decoding -> +motion -> -reconstruction.
TABLE1_VARIANTS: dict[str, dict] = {
    "iter_perslot": dict(inference_mode="iterative", use_temporal=False,
                         decode_mode="per_slot", use_motion=False, use_recon=True),
    "1shot_perslot": dict(inference_mode="single_step", use_temporal=False,
                          decode_mode="per_slot", use_motion=False, use_recon=True),
    "1shot_perslot_temp": dict(inference_mode="single_step", use_temporal=True,
                               decode_mode="per_slot", use_motion=False, use_recon=True),
    "1shot_1shotdec_temp": dict(inference_mode="single_step", use_temporal=True,
                                decode_mode="one_shot", use_motion=False, use_recon=True),
    "1shot_1shotdec_temp_motion": dict(inference_mode="single_step", use_temporal=True,
                                       decode_mode="one_shot", use_motion=True, use_recon=True),
    "1shot_1shotdec_temp_motion_norecon": dict(inference_mode="single_step", use_temporal=True,
                                               decode_mode="one_shot", use_motion=True,
                                               use_recon=False),
}


def _nanmean(xs) -> float:
    xs = [x for x in xs if not math.isnan(x)]
    return float(np.mean(xs)) if xs else math.nan


def _nanstd(xs) -> float:
    xs = [x for x in xs if not math.isnan(x)]
    return float(np.std(xs)) if xs else math.nan


@dataclass
class AblationRow:
    name: str
    overrides: dict
    reports: list[MetricReport]

    @property
    def fg_ari(self) -> float:
        return _nanmean([r.fg_ari for r in self.reports])

    @property
    def fg_ari_std(self) -> float:
        return _nanstd([r.fg_ari for r in self.reports])

    def mean_of(self, attr: str) -> float:
        return _nanmean([getattr(r, attr) for r in self.reports])


@dataclass
class AblationResult:
    rows: list[AblationRow]

    def row(self, name: str) -> AblationRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def ranked(self) -> list[AblationRow]:
        return sorted(self.rows, key=lambda r: -r.fg_ari)

    def table(self) -> str:
        lines = [f"{'variant':40s} {'Fg.ARI':>8s} {'std':>6s} {'static':>8s} {'moving':>8s}"]
        for r in self.ranked():
            lines.append(f"{r.name:40s} {100 * r.fg_ari:8.1f} {100 * r.fg_ari_std:6.1f} "
                         f"{100 * r.mean_of('fg_ari_static'):8.1f} "
                         f"{100 * r.mean_of('fg_ari_moving'):8.1f}")
        return "\n".join(lines)

    def to_json(self) -> dict:
        return {"rows": [{"name": r.name, "overrides": r.overrides, "fg_ari": r.fg_ari,
                          "fg_ari_std": r.fg_ari_std,
                          "reports": [x.as_dict() for x in r.reports]} for r in self.rows]}


def _cached_report(run_dir: Path, cfg: TrainConfig) -> MetricReport | None:
    report, stored = run_dir / "report.json", run_dir / "config.txt"
    if not (report.exists() and stored.exists()) or stored.read_text() != format_config(cfg):
        return None
    d = json.loads(report.read_text())
    return MetricReport(**{k: (math.nan if v is None else v) for k, v in d.items()})


def ablate(base: TrainConfig, grid: Mapping[str, Mapping], train_clips: Sequence[ClipSample],
           val_clips: Sequence[ClipSample], seeds: Sequence[int] = (0,),
           out_dir: str | Path | None = None, progress: bool = False,
           reuse: bool = True) -> AblationResult:
    """Train and evaluate every variant for every seed.

    With ``reuse``, a run directory whose ``report.json`` exists and whose
    ``config.txt`` matches the requested config is read back instead of retrained.
    """
    rows = []
    for name, overrides in grid.items():
        reports = []
        for seed in seeds:
            cfg = base.replace(**overrides, seed=seed)
            run_dir = Path(out_dir) / name / f"seed{seed}" if out_dir else None
            cached = _cached_report(run_dir, cfg) if reuse and run_dir else None
            if cached is not None:
                reports.append(cached)
                log.info("%s seed %d: reused %s", name, seed, run_dir)
                continue
            t0 = time.time()
            rec = train(cfg, train_clips, out_dir=run_dir, progress=progress)
            rep = evaluate(rec.model, val_clips, stride=cfg.eval_stride, window=cfg.clip_length)
            reports.append(rep)
            log.info("%s seed %d: %s (%.0fs)", name, seed, rep.format(), time.time() - t0)
            if run_dir:
                rep.write(run_dir / "report.json")
        rows.append(AblationRow(name, dict(overrides), reports))
    result = AblationResult(rows)
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.json").write_text(json.dumps(result.to_json(), indent=1))
        (Path(out_dir) / "ablation.txt").write_text(result.table() + "\n")
    return result
