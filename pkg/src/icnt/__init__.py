"""CPU-only ConvNeXt classifier with dual-pooling fusion, SE-gated vectors and feature smoothing loss."""
from .backbone import BackboneConfig
from .head import HeadConfig, Model, ModelConfig
from .loss import LossConfig, feature_smoothing_loss, total_loss
from .tensor import Tape, Tensor
from .train import TrainConfig, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "HeadConfig",
    "LossConfig",
    "Model",
    "ModelConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "feature_smoothing_loss",
    "fit",
    "load_checkpoint",
    "save_checkpoint",
    "total_loss",
]
