"""Deep interleaved network for image restoration on a numpy autograd engine."""

from .tensor import NumericalError, ShapeError, Tensor, backward, no_grad
from .model import ModelConfig, count_mult_adds, count_params, din_forward, init_params

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "no_grad",
    "ShapeError",
    "NumericalError",
    "ModelConfig",
    "init_params",
    "din_forward",
    "count_params",
    "count_mult_adds",
]
