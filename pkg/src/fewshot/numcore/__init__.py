"""Numeric core: tensors, reverse-mode autodiff, kernels, losses, Adam."""

from .gradcheck import VerificationError, finite_diff_check
from .nn import BatchNorm2d, Conv2d, Linear, Module, Parameter
from .ops import (
    BatchNormState,
    batchnorm2d,
    binary_cross_entropy,
    clamp,
    concat,
    conv2d,
    cross_entropy_from_logits,
    flatten,
    global_avg_pool,
    l2_normalize,
    linear,
    log_softmax,
    matmul,
    maxpool2d,
    nll_from_probs,
    pairwise_sq_dist,
    relu,
    sigmoid,
    softmax,
    stack,
    triplet_loss,
)
from .optim import Adam, AdamState, adam_step
from .tensor import (
    ConfigError,
    NonFiniteError,
    NumcoreError,
    ShapeError,
    StateError,
    Tensor,
    no_grad,
    tensor,
)

__all__ = [
    "Adam", "AdamState", "BatchNorm2d", "BatchNormState", "ConfigError", "Conv2d", "Linear",
    "Module", "NonFiniteError", "NumcoreError", "Parameter", "ShapeError", "StateError", "Tensor",
    "VerificationError", "adam_step", "batchnorm2d", "binary_cross_entropy", "clamp", "concat",
    "conv2d", "cross_entropy_from_logits", "finite_diff_check", "flatten", "global_avg_pool",
    "l2_normalize", "linear", "log_softmax", "matmul", "maxpool2d", "nll_from_probs", "no_grad",
    "pairwise_sq_dist", "relu", "sigmoid", "softmax", "stack", "tensor", "triplet_loss",
]
