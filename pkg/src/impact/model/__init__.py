"""Tiny ViT, its training loop and checkpoint archives."""

from impact.model.vit import (
    EXTRA_TAGS,
    HEAD_TAGS,
    SITE_TAGS,
    ForwardResult,
    HookSite,
    ModelConfig,
    VitModel,
    accuracy,
    all_sites,
    capture,
    forward,
    forward_from,
    init_model,
    predict_logits,
)
from impact.model.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from impact.model.train import TrainHistory, TrainSettings, train

__all__ = [
    "EXTRA_TAGS",
    "HEAD_TAGS",
    "SITE_TAGS",
    "CheckpointError",
    "ForwardResult",
    "HookSite",
    "ModelConfig",
    "TrainHistory",
    "TrainSettings",
    "VitModel",
    "accuracy",
    "all_sites",
    "capture",
    "forward",
    "forward_from",
    "init_model",
    "load_checkpoint",
    "predict_logits",
    "save_checkpoint",
    "train",
]
