"""Minimal reverse-mode autodiff engine."""
from . import ops
from .core import (Tape, Tensor, as_tensor, backward, grad, is_recording, no_record,
                   sgd_step)

__all__ = ["Tape", "Tensor", "as_tensor", "backward", "grad", "is_recording", "no_record",
           "ops", "sgd_step"]
