from . import functional
from .functional import ShapeError
from .nn import Conv2d, GroupNorm, Linear, Module
from .optim import AdamState, adam_step
from .tensor import (
    Tape,
    TapeError,
    Tensor,
    backward,
    current_tape,
    default_dtype,
    float64_mode,
    no_grad,
    reset_tape,
    set_default_dtype,
)

__all__ = [
    "AdamState",
    "Conv2d",
    "GroupNorm",
    "Linear",
    "Module",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "adam_step",
    "backward",
    "current_tape",
    "default_dtype",
    "float64_mode",
    "functional",
    "no_grad",
    "reset_tape",
    "set_default_dtype",
]
