"""Differentiable tensor engine: tape, primitives, FFT, and budget counters."""

from . import fft, flops, gradcheck, ops
from .flops import FlopCounter, WallTimer
from .tensor import GradTape, Tensor, backward, grad_enabled, no_grad, record, reset_tape, tape

__all__ = [
    "Tensor", "GradTape", "backward", "no_grad", "grad_enabled", "record",
    "reset_tape", "tape", "FlopCounter", "WallTimer",
    "ops", "fft", "flops", "gradcheck",
]
