from . import functional
from .checkpoint import CheckpointError
from .gradcheck import NonDeterministicError, grad_check, gradient_errors
from .optim import OptimizerState, adam_step, lr_at
from .params import ModelParams, init_params
from .tensor import BatchNormState, Function, ShapeError, Tensor, no_grad, parameter

__all__ = [
    "BatchNormState", "CheckpointError", "Function", "ModelParams", "NonDeterministicError",
    "OptimizerState", "ShapeError", "Tensor", "adam_step", "functional", "grad_check",
    "gradient_errors", "init_params", "lr_at", "no_grad", "parameter",
]
