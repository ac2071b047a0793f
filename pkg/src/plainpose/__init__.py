"""Plain vision-transformer pose estimation on a small numpy autodiff engine."""

from . import core
from .codec import KeypointSet, decode_heatmaps, encode_targets
from .config import EncoderConfig, ModelConfig, preset
from .cost import cost_report, training_flops
from .model import ViTPose

__version__ = "0.1.0"

__all__ = [
    "EncoderConfig",
    "KeypointSet",
    "ModelConfig",
    "ViTPose",
    "core",
    "cost_report",
    "decode_heatmaps",
    "encode_targets",
    "preset",
    "training_flops",
]
