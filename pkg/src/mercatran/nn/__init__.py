"""Minimal NumPy tensor core: autodiff tape, transformer blocks, Adam."""
from .functional import (
    attention,
    causal_mask,
    dropout,
    key_padding_mask,
    layer_norm,
    linear,
    scaled_dot_attention,
    sinusoidal_positions,
    softmax_rows,
)
from .gradcheck import grad_check, grad_check_params
from .optim import AdamState, LRSchedule, adam_step, clip_grad_norm
from .tensor import Parameter, Tape, Tensor, as_tensor

__all__ = [
    "AdamState",
    "LRSchedule",
    "Parameter",
    "Tape",
    "Tensor",
    "adam_step",
    "as_tensor",
    "attention",
    "causal_mask",
    "clip_grad_norm",
    "dropout",
    "grad_check",
    "grad_check_params",
    "key_padding_mask",
    "layer_norm",
    "linear",
    "scaled_dot_attention",
    "sinusoidal_positions",
    "softmax_rows",
]
