"""Numeric core: tape autodiff, attention, Adam, checkpoints."""
from .autodiff import Tensor, as_tensor, backward
from .checkpoint import load_params, save_params
from .layers import (
    AttentionOutput,
    affine,
    cosine_similarity,
    multi_head_attention,
    scaled_dot_attention,
)
from .optim import (
    Parameter,
    ParamDict,
    adam_step,
    init_bias,
    init_weight,
    soft_update,
    zero_grads,
)

__all__ = [
    "Tensor",
    "as_tensor",
    "backward",
    "load_params",
    "save_params",
    "AttentionOutput",
    "affine",
    "cosine_similarity",
    "multi_head_attention",
    "scaled_dot_attention",
    "Parameter",
    "ParamDict",
    "adam_step",
    "init_bias",
    "init_weight",
    "soft_update",
    "zero_grads",
]
