"""Symmetric multimodal tracking with adapters, complementary masking and
self-distillation, built on a small numpy autodiff engine."""

from .census import Census, param_census
from .config import (ConfigError, EvalConfig, LossWeights, MaskConfig, ModelConfig, Perturbation,
                     RunConfig, SequenceSpec, TrainConfig, load_run_config)
from .model import SymTracker, decode_box
from .tensor import NumericError, ShapeError, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "Census", "ConfigError", "EvalConfig", "LossWeights", "MaskConfig", "ModelConfig", "NumericError",
    "Perturbation", "RunConfig", "SequenceSpec", "ShapeError", "SymTracker", "Tensor", "TrainConfig",
    "backward", "decode_box", "load_run_config", "param_census",
]
