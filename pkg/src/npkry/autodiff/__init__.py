"""Minimal reverse-mode automatic differentiation for the solver and network graphs."""

from . import ops
from .gradcheck import central_difference, grad_check, value_and_grad
from .params import ModelParams, load_checkpoint, save_checkpoint
from .tape import Tape, Variable

__all__ = [
    "ModelParams",
    "Tape",
    "Variable",
    "central_difference",
    "grad_check",
    "load_checkpoint",
    "ops",
    "save_checkpoint",
    "value_and_grad",
]
