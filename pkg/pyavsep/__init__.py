"""
PyAVSep - weakly-supervised audio-visual sound source detection and separation
Learns from clip-level labels to find sounding objects in frames and to
separate their audio with masks composed from shared spectrogram bases
"""

__version__ = "0.1.0"

from .config import TrainConfig
from .core import AVDataset, PyAVSep, SeparationResult, separate
from .model import AVSeparationModel, load_model, save_model

__all__ = ["TrainConfig", "AVDataset", "PyAVSep", "SeparationResult", "separate",
           "AVSeparationModel", "load_model", "save_model"]
