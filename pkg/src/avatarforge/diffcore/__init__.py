"""Differentiation substrate: tensors, autodiff, Adam, checkpoints."""

from .tensor import (
    GraphError,
    NonFiniteError,
    Tensor,
    absolute,
    add,
    broadcast_to,
    clamp,
    concatenate,
    constant,
    cos,
    cumsum,
    div,
    dot,
    exp,
    flip,
    getitem,
    grad,
    grid_sample3d,
    image_sample,
    leaky_relu,
    linear,
    log,
    matmul,
    maximum,
    minimum,
    mul,
    neg,
    no_grad,
    norm,
    normalize,
    positional_encoding,
    power,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    set_nan_guard,
    sigmoid,
    sin,
    softplus,
    sqrt,
    stack,
    sub,
    take,
    tanh,
    transpose,
    weighted_blend,
    where,
)
from .optim import MissingGradientError, OptimConfig, ParamStore, adam_step, effective_lr
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import all_primitives, grad_check
from .nn import DenseNet
