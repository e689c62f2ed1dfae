"""Motion-guided slot auto-encoder for unsupervised object discovery in video."""

from .datagen import ClipSample, GenConfig, generate_clip, generate_dataset
from .losses import LossBreakdown, total_loss
from .metrics import MetricReport, ari, fg_ari
from .model import ModelConfig, VideoSlotModel, load_checkpoint, save_checkpoint
from .motionseg import DegradeConfig, MotionMaskSet, oracle_motion_masks, postprocess
from .train import TrainConfig, ablate, evaluate, lr_at

__all__ = [
    "ClipSample", "GenConfig", "generate_clip", "generate_dataset",
    "LossBreakdown", "total_loss", "MetricReport", "ari", "fg_ari",
    "ModelConfig", "VideoSlotModel", "load_checkpoint", "save_checkpoint",
    "DegradeConfig", "MotionMaskSet", "oracle_motion_masks", "postprocess",
    "TrainConfig", "ablate", "evaluate", "lr_at",
]
