"""Unimodal-STILT harness for multimodal meme sentiment classification."""

from ._accel import USE_NUMBA
from .core import DeterministicRng, ParamTensor
from .model import ModelConfig, init_model
from .training import TrainConfig, run_protocol

__version__ = "0.1.0"

__all__ = [
    "USE_NUMBA",
    "DeterministicRng",
    "ParamTensor",
    "ModelConfig",
    "init_model",
    "TrainConfig",
    "run_protocol",
]
