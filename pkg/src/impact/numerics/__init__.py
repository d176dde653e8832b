"""Dense float tensors, a gradient tape and optimizers."""

from impact.numerics import ops
from impact.numerics.ops import primitive_forward
from impact.numerics.optim import OptimizerState, linear_decay, optimizer_step, step_lr
from impact.numerics.tensor import GradTape, NonFiniteError, TapeError, Tensor, backward

__all__ = [
    "GradTape",
    "NonFiniteError",
    "OptimizerState",
    "TapeError",
    "Tensor",
    "backward",
    "linear_decay",
    "ops",
    "optimizer_step",
    "primitive_forward",
    "step_lr",
]
