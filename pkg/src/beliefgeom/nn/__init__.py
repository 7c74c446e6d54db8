"""Minimal reverse-mode differentiation kernel shared by the transformer, SAE and AANet."""

from beliefgeom.nn.tensor import (
    NumericalError,
    Parameter,
    ShapeError,
    Tensor,
    forward_backward,
    no_grad,
)
from beliefgeom.nn.optim import AdamW, clip_grad_norm
from beliefgeom.nn import ops, init

__all__ = [
    "AdamW",
    "NumericalError",
    "Parameter",
    "ShapeError",
    "Tensor",
    "clip_grad_norm",
    "forward_backward",
    "init",
    "no_grad",
    "ops",
]
