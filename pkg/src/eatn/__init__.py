"""Evolving-attention transformers on a small float64 autodiff core."""

__version__ = "0.1.0"

from .attention import AttentionState, PositionalEncoding, ProjectionSet, build_causal_mask
from .evolving import AttentionConvParams, EvolvingAttentionConfig, conv_param_count, evolve_logits
from .kernels import BACKEND
from .model import EATransformer, ModelSpec
from .tensor import Tensor, backward, gradients, no_grad

__all__ = [
    "AttentionConvParams",
    "AttentionState",
    "BACKEND",
    "EATransformer",
    "EvolvingAttentionConfig",
    "ModelSpec",
    "PositionalEncoding",
    "ProjectionSet",
    "Tensor",
    "backward",
    "build_causal_mask",
    "conv_param_count",
    "evolve_logits",
    "gradients",
    "no_grad",
]
