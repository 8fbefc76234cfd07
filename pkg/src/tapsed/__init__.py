"""Frequency-dynamic CRNN sound event detection with temporal attention pooling."""

from .estimator import SoundEventDetector
from .frontend import LogMelExtractor, logmel
from .model import CRNN, ModelConfig, build_model, count_params, preset
from .tensor import Parameter, Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "CRNN", "LogMelExtractor", "ModelConfig", "Parameter", "SoundEventDetector", "Tensor",
    "build_model", "count_params", "logmel", "no_grad", "preset",
]
