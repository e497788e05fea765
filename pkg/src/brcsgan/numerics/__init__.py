from . import tensor as ops
from .params import (
    Optimizer,
    OptimizerConfig,
    ParamStore,
    backward,
    clip_to_box,
    finite_difference_check,
    load_checkpoint,
    optimizer_step,
    save_checkpoint,
)
from .tensor import NonFiniteError, ShapeError, Tape, TapeError, Tensor, no_grad

__all__ = [
    "NonFiniteError",
    "Optimizer",
    "OptimizerConfig",
    "ParamStore",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "backward",
    "clip_to_box",
    "finite_difference_check",
    "load_checkpoint",
    "no_grad",
    "ops",
    "optimizer_step",
    "save_checkpoint",
]
