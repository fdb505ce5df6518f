"""Dense tensors with reverse-mode autodiff, built on numpy."""
from .ops import (
    AllPositionsExcludedWarning,
    add,
    concat,
    conv1d,
    conv2d,
    dropout,
    einsum,
    embedding,
    exp,
    grad_gate,
    layer_norm,
    linear,
    log_softmax,
    mask_const,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    scale,
    slice_,
    smoothed_cross_entropy,
    softmax,
    sub,
    sum_,
    tanh,
    transpose,
)
from .gradcheck import max_relative_error, numerical_grad
from .rng import RngStreams, derive_seed
from .tensor import (
    NumericalFault,
    ShapeError,
    Tensor,
    default_dtype,
    grad_enabled,
    no_grad,
    parameters_faulty,
    precision,
)

__all__ = [
    "add", "AllPositionsExcludedWarning", "concat", "conv1d", "conv2d", "default_dtype",
    "derive_seed", "dropout", "einsum", "embedding", "exp", "grad_enabled", "grad_gate",
    "layer_norm", "linear", "log_softmax", "mask_const", "matmul", "max_relative_error", "mean",
    "mul", "no_grad", "numerical_grad", "NumericalFault", "parameters_faulty", "precision", "relu",
    "reshape", "RngStreams", "scale", "ShapeError", "slice_", "smoothed_cross_entropy", "softmax",
    "sub", "sum_", "tanh", "Tensor", "transpose",
]
