"""Road extraction with non-local blocks on a small numpy autodiff engine."""

from .network import ModelConfig, NLLinkNet, Variant, build_model, param_count
from .nonlocal_ops import PairwiseKind, nonlocal_block, nonlocal_op
from .tensor import Tensor, no_grad, set_threads

__all__ = [
    "ModelConfig",
    "NLLinkNet",
    "PairwiseKind",
    "Tensor",
    "Variant",
    "build_model",
    "no_grad",
    "nonlocal_block",
    "nonlocal_op",
    "param_count",
    "set_threads",
]
