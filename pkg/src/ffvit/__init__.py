"""Attention-free vision transformer built on a small numpy autodiff engine."""

from .model import (
    ModelConfig,
    ParameterSet,
    build_preset,
    init_params,
    model_forward,
    param_count,
)
from .tensor import Tensor, grad_check, no_grad

__all__ = [
    "ModelConfig",
    "ParameterSet",
    "Tensor",
    "build_preset",
    "grad_check",
    "init_params",
    "model_forward",
    "no_grad",
    "param_count",
]
__version__ = "0.1.0"
