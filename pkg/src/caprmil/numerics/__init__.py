from .ops import (
    ConfigError,
    add,
    cross_entropy,
    div,
    dropout,
    exp,
    gelu,
    layer_norm,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    power,
    reshape,
    sigmoid,
    softmax,
    sub,
    sum,
    tanh,
    transpose,
)
from .rng import Rng
from .tensor import (
    DimensionError,
    Tensor,
    as_tensor,
    default_dtype,
    grad_enabled,
    no_grad,
    parameter,
    precision,
    set_default_dtype,
)

__all__ = [
    "ConfigError",
    "DimensionError",
    "Rng",
    "Tensor",
    "add",
    "as_tensor",
    "cross_entropy",
    "default_dtype",
    "div",
    "dropout",
    "exp",
    "gelu",
    "grad_enabled",
    "layer_norm",
    "linear",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "parameter",
    "power",
    "precision",
    "reshape",
    "set_default_dtype",
    "sigmoid",
    "softmax",
    "sub",
    "sum",
    "tanh",
    "transpose",
]
