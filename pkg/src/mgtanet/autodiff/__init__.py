"""Numpy tensor substrate: primitives with analytic backward passes."""

from . import nn, ops
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import GradcheckReport, gradcheck
from .optim import adam_step, clip_grad_norm, one_cycle_lr
from .tensor import ParamStore, Tape, Tensor, active_tape, as_tensor

__all__ = [
    "GradcheckReport", "ParamStore", "Tape", "Tensor", "active_tape", "adam_step",
    "as_tensor", "clip_grad_norm", "gradcheck", "load_checkpoint", "nn", "one_cycle_lr",
    "ops", "save_checkpoint",
]
