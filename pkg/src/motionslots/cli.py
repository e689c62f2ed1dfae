"""Command-line entry point: ``gen``, ``train``, ``eval``, ``ablate`` and ``viz``.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
Outputs default to subdirectories of ``$MOTIONSLOTS_OUT`` (``./runs`` if unset).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import typing
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import datagen
from .datagen import DatasetFormatError, GenConfig
from .train import ConfigError

OUT_ENV = "MOTIONSLOTS_OUT"

log = logging.getLogger("motionslots")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Reports usage errors with exit code 1 instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def _parse_sets(pairs: list[str] | None) -> dict[str, str]:
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise ConfigError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# --------------------------------------------------------------------------- gen

def gen_config_from_args(args) -> GenConfig:
    from .train import _parse_value

    cfg = GenConfig()
    values = {}
    if args.size is not None:
        values["frame_shape"] = (args.size, args.size)
    if args.clip_length is not None:
        values["clip_length"] = args.clip_length
    hints = typing.get_type_hints(GenConfig)
    for k, raw in _parse_sets(args.set).items():
        if k not in hints:
            raise ConfigError(f"unknown generator field {k!r}")
        try:
            values[k] = _parse_value(raw, hints[k])
        except ValueError as exc:
            raise ConfigError(f"bad value for {k}: {exc}") from exc
    cfg = replace(cfg, **values)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def cmd_gen(args) -> int:
    cfg = gen_config_from_args(args)
    out = Path(args.out or out_root() / "data")
    for split, count in (("train", args.clips), ("val", args.val_clips)):
        if count <= 0:
            continue
        clips, manifest = datagen.generate_dataset(count, cfg, seed=args.seed, split=split)
        datagen.write_dataset(clips, manifest, out)
        print(f"wrote {count} {split} clips to {out / split}")
    return 0


# --------------------------------------------------------------------------- train / eval

def train_config_from_args(args):
    from .train import TrainConfig, desk_profile, load_config, parse_config_text

    base = desk_profile() if args.profile == "desk" else TrainConfig()
    overrides = parse_config_text("\n".join(f"{k} = {v}" for k, v in _parse_sets(args.set).items()),
                                  "--set")
    for name in ("epochs", "batch_size", "seed"):
        v = getattr(args, name, None)
        if v is not None:
            overrides[name] = v
    try:
        return load_config(args.config, overrides, base=base)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {exc.filename}") from exc


def _load_split(root: Path, split: str, required: bool = True):
    if not (root / split / "manifest.json").exists():
        if required:
            raise ConfigError(f"no {split} split under {root} (run `gen` first or pass --data)")
        return None
    clips, _ = datagen.read_dataset(root, split)
    return clips


def cmd_train(args) -> int:
    from .train import train

    config = train_config_from_args(args)
    data = Path(args.data or out_root() / "data")
    clips = _load_split(data, "train")
    val = _load_split(data, "val", required=False)
    out = Path(args.out or out_root() / "train")
    rec = train(config, clips, val_clips=val, out_dir=out, resume=args.resume, progress=True)
    print(f"trained {rec.epochs_completed} epochs, {len(rec.losses)} steps; "
          f"checkpoints in {out}")
    if rec.losses:
        print(f"final loss {rec.losses[-1]['total']:.5f}")
    return 0


def cmd_eval(args) -> int:
    from .train import evaluate

    data = Path(args.data or out_root() / "data")
    clips = _load_split(data, args.split)
    try:
        report = evaluate(args.checkpoint, clips, stride=args.stride, window=args.window,
                          mask_source=args.mask_source)
    except FileNotFoundError as exc:
        raise ConfigError(f"checkpoint not found: {args.checkpoint}") from exc
    print(report.format())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        report.write(args.out)
    return 0


# --------------------------------------------------------------------------- ablate

def expand_grid(spec: str) -> dict[str, dict]:
    """``table1`` or a JSON file mapping variant name -> TrainConfig overrides."""
    from .train import TABLE1_VARIANTS, config_field_types

    if spec == "table1":
        return {k: dict(v) for k, v in TABLE1_VARIANTS.items()}
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"grid must be 'table1' or a JSON file, got {spec!r}")
    grid = json.loads(path.read_text())
    fields = config_field_types()
    for name, overrides in grid.items():
        bad = set(overrides) - set(fields)
        if bad:
            raise ConfigError(f"grid variant {name!r}: unknown keys {sorted(bad)}")
    return grid


def cmd_ablate(args) -> int:
    from .train import ablate

    grid = expand_grid(args.grid)
    if args.dry_run:
        for name, overrides in grid.items():
            print(f"{name}: {overrides}")
        return 0
    config = train_config_from_args(args)
    data = Path(args.data or out_root() / "data")
    clips = _load_split(data, "train")
    val = _load_split(data, "val")
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out or out_root() / "ablate")
    result = ablate(config, grid, clips, val, seeds=seeds, out_dir=out, progress=args.verbose)
    print(result.table())
    return 0


# --------------------------------------------------------------------------- viz

def palette(n: int) -> np.ndarray:
    """Fixed slot-id -> RGB colors in [0, 1]."""
    from matplotlib import colormaps

    cmap = colormaps["tab20"]
    return np.array([cmap(i % 20)[:3] for i in range(n)], dtype=np.float64)


def overlay(frame: np.ndarray, labels: np.ndarray, colors: np.ndarray,
            alpha: float = 0.5) -> np.ndarray:
    """Blend slot colors over an (H, W, 3) frame in [0, 1]."""
    return (1 - alpha) * frame + alpha * colors[labels]


def montage(maps: np.ndarray, pad: int = 1) -> np.ndarray:
    """Tile K (h, w) maps left to right, separated by ``pad`` white columns."""
    k, h, w = maps.shape
    out = np.ones((h, k * w + (k - 1) * pad))
    for i in range(k):
        out[:, i * (w + pad):i * (w + pad) + w] = maps[i]
    return out


def montage_panels(image: np.ndarray, panel_width: int, pad: int = 1) -> int:
    return (image.shape[1] + pad) // (panel_width + pad)


def _save_png(path: Path, img: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)).save(path)


def plot_losses(metrics_log: Path, out: Path) -> Path | None:
    if not metrics_log.exists():
        warnings.warn(f"{metrics_log} missing; skipping loss curves", stacklevel=2)
        return None
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [json.loads(line) for line in metrics_log.read_text().splitlines() if line.strip()]
    rows = [r for r in rows if "step" in r]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("total", "recon", "motion", "temporal"):
        ax.plot([r["step"] for r in rows], [r[key] for r in rows], label=key)
    ax.set_xlabel("step")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)
    return out


@dataclass
class VizResult:
    overlays: list[Path] = field(default_factory=list)
    montages: list[Path] = field(default_factory=list)
    labels: np.ndarray | None = None
    curves: Path | None = None
    num_panels: int = 0


def render_viz(checkpoint, clip: datagen.ClipSample, out: Path, window: int = 5,
               metrics_log: Path | None = None) -> VizResult:
    """Slot overlays per frame, a K-panel attention montage per frame, loss curves."""
    import torch

    from .metrics import attention_to_masks
    from .model import VideoSlotModel, load_checkpoint

    model = checkpoint if isinstance(checkpoint, VideoSlotModel) else load_checkpoint(checkpoint)[0]
    model.eval()
    cfg = model.config
    if tuple(clip.frame_shape) != tuple(cfg.frame_shape):
        raise ConfigError(f"clip frame shape {clip.frame_shape} != checkpoint {cfg.frame_shape}")
    out.mkdir(parents=True, exist_ok=True)
    colors = palette(cfg.num_slots)
    h, w = cfg.feature_shape
    res = VizResult()
    labels = []
    with torch.no_grad():
        for s in range(0, clip.length, window):
            frames = torch.from_numpy(clip.frames[s:s + window]).permute(0, 3, 1, 2)[None]
            attn = model.forward_clip(frames, generator=torch.Generator().manual_seed(0))["attn"]
            for i in range(frames.shape[1]):
                t = s + i
                a = attn[0, i].numpy()
                lab = attention_to_masks(a, cfg.feature_shape, clip.frame_shape).labels
                labels.append(lab)
                img = overlay(clip.frames[t], lab, colors)
                moving = np.isin(clip.instance_masks[t], list(clip.moving_ids[t]))
                edge = moving & ~_erode(moving)
                img[edge] = 1.0
                p = out / f"overlay_{t:04d}.png"
                _save_png(p, img)
                res.overlays.append(p)
                m = montage(a.T.reshape(cfg.num_slots, h, w))
                p = out / f"attention_{t:04d}.png"
                _save_png(p, m)
                res.montages.append(p)
                res.num_panels = montage_panels(m, w)
    res.labels = np.stack(labels)
    np.save(out / "slot_labels.npy", res.labels)
    if metrics_log is not None:
        res.curves = plot_losses(Path(metrics_log), out / "loss_curves.png")
    return res


def _erode(mask: np.ndarray) -> np.ndarray:
    from scipy import ndimage

    return ndimage.binary_erosion(mask)


def cmd_viz(args) -> int:
    data = Path(args.data or out_root() / "data")
    clips = _load_split(data, args.split)
    if not 0 <= args.clip < len(clips):
        raise ConfigError(f"--clip {args.clip} out of range (0..{len(clips) - 1})")
    if not Path(args.checkpoint).exists():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    out = Path(args.out or out_root() / "viz")
    metrics_log = args.metrics_log or Path(args.checkpoint).parent / "metrics.jsonl"
    res = render_viz(args.checkpoint, clips[args.clip], out, args.window, Path(metrics_log))
    print(f"wrote {len(res.overlays)} overlays and {len(res.montages)} "
          f"{res.num_panels}-panel montages to {out}")
    return 0


# --------------------------------------------------------------------------- parser

def _add_train_flags(p):
    p.add_argument("--config", help="flat 'key = value' TrainConfig file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any TrainConfig field (repeatable)")
    p.add_argument("--profile", choices=("full", "desk"), default="full",
                   help="base defaults before --config/--set (default: full)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int, help="single source of randomness")
    p.add_argument("--data", help=f"dataset root (default ${OUT_ENV}/data)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="motionslots", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic video dataset")
    p.add_argument("--clips", type=int, default=100, help="training clips")
    p.add_argument("--val-clips", type=int, default=0, help="validation clips")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, help="square frame size in pixels")
    p.add_argument("--clip-length", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any generator field (repeatable)")
    p.add_argument("--out", help=f"output root (default ${OUT_ENV}/data)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model")
    _add_train_flags(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--out", help=f"run directory (default ${OUT_ENV}/train)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint with sliding windows")
    p.add_argument("checkpoint")
    p.add_argument("--data", help=f"dataset root (default ${OUT_ENV}/data)")
    p.add_argument("--split", default="val")
    p.add_argument("--stride", type=int, default=5)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--mask-source", choices=("attention", "alpha"), default="attention")
    p.add_argument("--out", help="write the report as JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare a grid of variants")
    _add_train_flags(p)
    p.add_argument("--grid", default="table1", help="'table1' or a JSON file of variants")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--dry-run", action="store_true", help="print the expanded grid only")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/ablate)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("viz", help="slot overlays, attention montages and loss curves")
    p.add_argument("checkpoint")
    p.add_argument("--data", help=f"dataset root (default ${OUT_ENV}/data)")
    p.add_argument("--split", default="val")
    p.add_argument("--clip", type=int, default=0)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--metrics-log", help="metrics.jsonl (default: next to the checkpoint)")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/viz)")
    p.set_defaults(func=cmd_viz)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
