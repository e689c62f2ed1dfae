"""Video slot auto-encoder: CNN encoder, ConvGRU memory, slot binding, decoding.

Tensors are channels-first.  Attention maps are ``(B, N, K)`` with ``N = h * w``
flattened row-major over the feature grid; every row is a distribution over slots.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from safetensors.torch import load_file, save_file
from torch import nn

DECODE_MODES = ("one_shot", "per_slot")
INFERENCE_MODES = ("single_step", "iterative")


@dataclass(frozen=True)
class ModelConfig:
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
    mlp_hidden: int = 128
    frame_shape: tuple[int, int] = (64, 64)

    def __post_init__(self):
        if self.num_slots < 1:
            raise ValueError(f"num_slots must be >= 1, got {self.num_slots}")
        if self.decode_mode not in DECODE_MODES:
            raise ValueError(f"decode_mode must be one of {DECODE_MODES}, got {self.decode_mode!r}")
        if self.inference_mode not in INFERENCE_MODES:
            raise ValueError(
                f"inference_mode must be one of {INFERENCE_MODES}, got {self.inference_mode!r}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        n_down = int(round(math.log2(self.downsample)))
        if self.downsample < 1 or 2 ** n_down != self.downsample:
            raise ValueError(f"downsample must be a power of two, got {self.downsample}")
        if n_down > self.encoder_depth or n_down > 3:
            raise ValueError(
                f"downsample {self.downsample} needs more stride-2 layers than available")
        h, w = self.frame_shape
        if h % self.downsample or w % self.downsample:
            raise ValueError(f"frame_shape {self.frame_shape} not divisible by {self.downsample}")

    @property
    def feature_shape(self) -> tuple[int, int]:
        return self.frame_shape[0] // self.downsample, self.frame_shape[1] // self.downsample

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def position_grid(h: int, w: int) -> torch.Tensor:
    """(h*w, 4) grid of [y, x, 1-y, 1-x] with coordinates in [0, 1]."""
    ys = torch.linspace(0.0, 1.0, h)
    xs = torch.linspace(0.0, 1.0, w)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    g = torch.stack([gy, gx], dim=-1).reshape(h * w, 2)
    return torch.cat([g, 1.0 - g], dim=-1)


class Encoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        n_down = int(round(math.log2(config.downsample)))
        layers = []
        c_in = 3
        for i in range(config.encoder_depth):
            last = i == config.encoder_depth - 1
            c_out = config.feature_dim if last else config.encoder_channels
            stride = 2 if i < n_down else 1
            layers += [nn.Conv2d(c_in, c_out, 5, stride=stride, padding=2), nn.ReLU()]
            c_in = c_out
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class ConvGRUCell(nn.Module):
    """Convolutional GRU; ``h' = (1 - z) * n + z * h``."""

    def __init__(self, input_dim: int, hidden_dim: int, kernel_size: int = 3):
        super().__init__()
        pad = kernel_size // 2
        self.hidden_dim = hidden_dim
        self.gates = nn.Conv2d(input_dim + hidden_dim, 2 * hidden_dim, kernel_size, padding=pad)
        self.candidate = nn.Conv2d(input_dim + hidden_dim, hidden_dim, kernel_size, padding=pad)

    def forward(self, x, h):
        rz = torch.sigmoid(self.gates(torch.cat([x, h], dim=1)))
        r, z = rz.chunk(2, dim=1)
        n = torch.tanh(self.candidate(torch.cat([x, r * h], dim=1)))
        return (1 - z) * n + z * h


class SlotBinder(nn.Module):
    """One dot-product attention step from slots to input locations.

    The slot-axis softmax ``attn`` is returned as the attention map; slot updates
    use per-slot weighted means over locations.
    """

    def __init__(self, num_slots: int, input_dim: int, slot_dim: int, slot_mlp: bool = False,
                 mlp_hidden: int = 128, eps: float = 1e-8):
        super().__init__()
        self.num_slots = num_slots
        self.slot_dim = slot_dim
        self.eps = eps
        self.init_slots = nn.Parameter(torch.randn(1, num_slots, slot_dim) * slot_dim ** -0.5)
        self.norm_inputs = nn.LayerNorm(input_dim)
        self.norm_slots = nn.LayerNorm(slot_dim)
        self.to_q = nn.Linear(slot_dim, slot_dim, bias=False)
        self.to_k = nn.Linear(input_dim, slot_dim, bias=False)
        self.to_v = nn.Linear(input_dim, slot_dim, bias=False)
        self.mlp = None
        if slot_mlp:
            self.norm_mlp = nn.LayerNorm(slot_dim)
            self.mlp = nn.Sequential(nn.Linear(slot_dim, mlp_hidden), nn.ReLU(),
                                     nn.Linear(mlp_hidden, slot_dim))

    def initial_slots(self, batch: int, generator=None) -> torch.Tensor:
        return self.init_slots.expand(batch, -1, -1)

    def attend(self, inputs, slots):
        x = self.norm_inputs(inputs)
        k, v = self.to_k(x), self.to_v(x)
        q = self.to_q(self.norm_slots(slots))
        logits = torch.einsum("bnd,bkd->bnk", k, q) * self.slot_dim ** -0.5
        attn = logits.softmax(dim=-1)
        weights = attn / attn.sum(dim=1, keepdim=True).clamp_min(self.eps)
        updates = torch.einsum("bnk,bnd->bkd", weights, v)
        return updates, attn

    def forward(self, inputs, slots_prev):
        slots, attn = self.attend(inputs, slots_prev)
        if self.mlp is not None:
            slots = slots + self.mlp(self.norm_mlp(slots))
        return slots, attn


class IterativeSlotBinder(SlotBinder):
    """Random slot initialization refined over several attention rounds with a GRU."""

    def __init__(self, num_slots: int, input_dim: int, slot_dim: int, iterations: int = 3,
                 mlp_hidden: int = 128, eps: float = 1e-8):
        super().__init__(num_slots, input_dim, slot_dim, slot_mlp=True,
                         mlp_hidden=mlp_hidden, eps=eps)
        del self.init_slots
        self.iterations = iterations
        self.slots_mu = nn.Parameter(torch.randn(1, 1, slot_dim) * slot_dim ** -0.5)
        self.slots_log_sigma = nn.Parameter(torch.full((1, 1, slot_dim), -1.0))
        self.update = nn.GRUCell(slot_dim, slot_dim)

    def initial_slots(self, batch: int, generator=None) -> torch.Tensor:
        mu = self.slots_mu
        noise = torch.randn((batch, self.num_slots, self.slot_dim), generator=generator,
                            dtype=mu.dtype, device=mu.device)
        return mu + self.slots_log_sigma.exp() * noise

    def forward(self, inputs, slots_prev, iterations: int | None = None):
        slots = slots_prev
        attn = None
        b, k, d = slots.shape
        for _ in range(iterations or self.iterations):
            updates, attn = self.attend(inputs, slots)
            slots = self.update(updates.reshape(b * k, d), slots.reshape(b * k, d)).reshape(b, k, d)
            slots = slots + self.mlp(self.norm_mlp(slots))
        return slots, attn


class SpatialDecoder(nn.Module):
    """Four transposed convolutions from the feature grid back to frame size."""

    def __init__(self, in_dim: int, channels: tuple[int, int, int], out_channels: int,
                 downsample: int):
        super().__init__()
        n_up = int(round(math.log2(downsample)))
        widths = list(channels) + [out_channels]
        layers = []
        c_in = in_dim
        for i, c_out in enumerate(widths):
            stride = 2 if i < n_up else 1
            k = 3 if i == 3 else 5
            layers.append(nn.ConvTranspose2d(c_in, c_out, k, stride=stride, padding=k // 2,
                                             output_padding=stride - 1))
            if i < 3:
                layers.append(nn.ReLU())
            c_in = c_out
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


def combine_slots(slots: torch.Tensor, attn: torch.Tensor, feature_shape) -> torch.Tensor:
    """``F = sum_i A_i * broadcast(S_i)`` as a ``(B, D, h, w)`` map."""
    h, w = feature_shape
    fmap = torch.einsum("bnk,bkd->bnd", attn, slots)
    return fmap.transpose(1, 2).reshape(slots.shape[0], slots.shape[2], h, w)


class OneShotDecoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.feature_shape = config.feature_shape
        self.net = SpatialDecoder(config.slot_dim, config.decoder_channels, 3, config.downsample)

    def forward(self, slots, attn):
        return self.net(combine_slots(slots, attn, self.feature_shape)), None


class PerSlotDecoder(nn.Module):
    """Each slot is broadcast, decoded to RGB + alpha logit, and alpha-composited."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.feature_shape = config.feature_shape
        h, w = config.feature_shape
        self.register_buffer("grid", position_grid(h, w), persistent=False)
        self.pos = nn.Linear(4, config.slot_dim)
        self.net = SpatialDecoder(config.slot_dim, config.decoder_channels, 4, config.downsample)

    def forward(self, slots, attn=None):
        b, k, d = slots.shape
        h, w = self.feature_shape
        x = slots.reshape(b * k, 1, d) + self.pos(self.grid)[None]
        x = x.transpose(1, 2).reshape(b * k, d, h, w)
        out = self.net(x)
        out = out.reshape(b, k, 4, *out.shape[-2:])
        rgb, logits = out[:, :, :3], out[:, :, 3:]
        alphas = logits.softmax(dim=1)
        return (alphas * rgb).sum(dim=1), alphas[:, :, 0]


@dataclass
class ClipState:
    memory: torch.Tensor | None
    slots: torch.Tensor


class VideoSlotModel(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config = config or ModelConfig()
        h, w = config.feature_shape
        self.encoder = Encoder(config)
        self.memory = ConvGRUCell(config.feature_dim, config.feature_dim) if config.use_memory else None
        self.memory_init = None
        if config.use_memory and config.learnable_memory_init:
            self.memory_init = nn.Parameter(torch.zeros(1, config.feature_dim, h, w))
        self.register_buffer("grid", position_grid(h, w), persistent=False)
        self.pos = nn.Linear(4, config.feature_dim) if config.position_encoding else None
        self.norm_features = nn.LayerNorm(config.feature_dim)
        self.project = nn.Sequential(nn.Linear(config.feature_dim, config.feature_dim), nn.ReLU(),
                                     nn.Linear(config.feature_dim, config.feature_dim))
        if config.inference_mode == "iterative":
            self.binder = IterativeSlotBinder(config.num_slots, config.feature_dim,
                                              config.slot_dim, config.iterations,
                                              config.mlp_hidden)
        else:
            self.binder = SlotBinder(config.num_slots, config.feature_dim, config.slot_dim,
                                     config.slot_mlp, config.mlp_hidden)
        if config.decode_mode == "one_shot":
            self.decoder = OneShotDecoder(config)
        else:
            self.decoder = PerSlotDecoder(config)

    # -- per-frame pieces

    def encode(self, frame: torch.Tensor) -> torch.Tensor:
        expected = (3, *self.config.frame_shape)
        if tuple(frame.shape[1:]) != expected:
            raise ValueError(f"frame shape {tuple(frame.shape[1:])} != {expected}")
        return self.encoder(frame)

    def memory_step(self, memory_prev, features):
        if self.memory is None:
            return features, None
        if memory_prev is None:
            memory_prev = self.initial_memory(features.shape[0], features)
        if memory_prev.shape != features.shape:
            raise ValueError(f"memory shape {tuple(memory_prev.shape)} != {tuple(features.shape)}")
        h = self.memory(features, memory_prev)
        return h, h

    def initial_memory(self, batch: int, like: torch.Tensor) -> torch.Tensor:
        if self.memory_init is not None:
            return self.memory_init.expand(batch, -1, -1, -1)
        return torch.zeros_like(like)

    def binding_inputs(self, features: torch.Tensor) -> torch.Tensor:
        b, d, h, w = features.shape
        x = features.reshape(b, d, h * w).transpose(1, 2)
        if self.pos is not None:
            x = x + self.pos(self.grid)[None]
        return self.project(self.norm_features(x))

    def init_state(self, batch: int, generator=None) -> ClipState:
        return ClipState(memory=None, slots=self.binder.initial_slots(batch, generator))

    def decode(self, slots, attn):
        return self.decoder(slots, attn)

    def step(self, frame: torch.Tensor, state: ClipState):
        features = self.encode(frame)
        hidden, memory = self.memory_step(state.memory, features)
        slots, attn = self.binder(self.binding_inputs(hidden), state.slots)
        recon, alphas = self.decode(slots, attn)
        out = {"slots": slots, "attn": attn, "recon": recon, "alphas": alphas}
        return out, ClipState(memory=memory, slots=slots)

    def forward_clip(self, frames: torch.Tensor, generator=None, state: ClipState | None = None):
        """Run a ``(B, T, 3, H, W)`` clip; outputs are stacked along dim 1."""
        if frames.dim() != 5 or frames.shape[1] < 1:
            raise ValueError(f"expected (B, T>=1, 3, H, W) frames, got {tuple(frames.shape)}")
        state = state or self.init_state(frames.shape[0], generator)
        outs = []
        for t in range(frames.shape[1]):
            out, state = self.step(frames[:, t], state)
            outs.append(out)
        result = {k: torch.stack([o[k] for o in outs], dim=1)
                  for k in ("slots", "attn", "recon")}
        result["alphas"] = (torch.stack([o["alphas"] for o in outs], dim=1)
                            if outs[0]["alphas"] is not None else None)
        result["state"] = state
        return result

    forward = forward_clip


def sliding_windows(length: int, window: int, stride: int) -> list[tuple[int, int]]:
    """Window ``[start, end)`` ranges covering ``length`` frames; the tail is
    covered by one extra window ending at ``length`` when needed."""
    if stride < 1 or window < 1:
        raise ValueError("window and stride must be >= 1")
    if length <= window:
        return [(0, length)]
    spans = [(s, s + window) for s in range(0, length - window + 1, stride)]
    if spans[-1][1] < length:
        spans.append((length - window, length))
    return spans


# --------------------------------------------------------------------------- checkpoints

_META_KEY = "motionslots"


def save_checkpoint(path: str | Path, model: VideoSlotModel, metadata: dict | None = None) -> None:
    """Float32 tensors plus one sorted-JSON metadata entry.

    Everything lives under a single metadata key because safetensors does not
    keep the order of several keys, which would break byte-identical re-saves.
    """
    tensors = {k: v.detach().to(torch.float32).contiguous().cpu()
               for k, v in model.state_dict().items()}
    meta = dict(metadata or {})
    meta["model_config"] = model.config.to_dict()
    save_file(tensors, str(path), metadata={_META_KEY: json.dumps(meta, sort_keys=True)})


def read_checkpoint_metadata(path: str | Path) -> dict:
    from safetensors import safe_open

    with safe_open(str(path), framework="pt") as f:
        raw = (f.metadata() or {}).get(_META_KEY)
    if raw is None:
        raise ValueError(f"{path}: not a model checkpoint (no {_META_KEY!r} metadata)")
    return json.loads(raw)


def load_checkpoint(path: str | Path) -> tuple[VideoSlotModel, dict]:
    meta = read_checkpoint_metadata(path)
    if "model_config" not in meta:
        raise ValueError(f"{path}: checkpoint metadata lacks model_config")
    config = ModelConfig.from_dict(meta.pop("model_config"))
    model = VideoSlotModel(config)
    model.load_state_dict(load_file(str(path)))
    return model, meta
