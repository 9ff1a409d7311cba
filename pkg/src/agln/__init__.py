"""Attention-guided segmentation decoder on a small numpy autodiff engine."""
from .model import ModelConfig, SegmentationModel, forward, load_checkpoint, save_checkpoint

__all__ = ["ModelConfig", "SegmentationModel", "forward", "load_checkpoint", "save_checkpoint"]
__version__ = "0.1.0"
