"""Weakly-supervised audio-visual gaze and head-pose learning on numpy, scipy and torch."""

__version__ = "0.1.0"

from .errors import AVGazeError  # noqa: E402
from .model import AVGazeNet, ModalityMask, ModelConfig, build_model, load_checkpoint, save_checkpoint  # noqa: E402
from .training import TrainConfig, train  # noqa: E402

__all__ = [
    "AVGazeError",
    "AVGazeNet",
    "ModalityMask",
    "ModelConfig",
    "TrainConfig",
    "build_model",
    "load_checkpoint",
    "save_checkpoint",
    "train",
]
