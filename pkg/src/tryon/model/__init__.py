from .checkpoint import CheckpointError, load_checkpoint, load_model, save_checkpoint, save_model
from .layers import Module
from .network import (
    DataError,
    ForwardOutput,
    LossBreakdown,
    ModelConfig,
    ModelConfigError,
    TryOnModel,
    build_model,
    daf_fuse,
    forward,
    semantic_loss,
    total_loss,
)

__all__ = [
    "CheckpointError",
    "DataError",
    "ForwardOutput",
    "LossBreakdown",
    "ModelConfig",
    "ModelConfigError",
    "Module",
    "TryOnModel",
    "build_model",
    "daf_fuse",
    "forward",
    "load_checkpoint",
    "load_model",
    "save_checkpoint",
    "save_model",
    "semantic_loss",
    "total_loss",
]
