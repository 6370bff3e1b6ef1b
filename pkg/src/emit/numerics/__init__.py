from . import functional
from .gradcheck import GradCheckResult, NonDeterministicClosure, grad_check, relative_error
from .nn import Dropout, LayerNorm, Linear, Module
from .optim import AdamState, adam_step
from .tensor import (
    Parameter,
    Tape,
    Tensor,
    active_tape,
    default_dtype,
    get_default_dtype,
    set_default_dtype,
)

__all__ = [
    "AdamState",
    "Dropout",
    "GradCheckResult",
    "LayerNorm",
    "Linear",
    "Module",
    "NonDeterministicClosure",
    "Parameter",
    "Tape",
    "Tensor",
    "active_tape",
    "adam_step",
    "default_dtype",
    "functional",
    "get_default_dtype",
    "grad_check",
    "relative_error",
    "set_default_dtype",
]
