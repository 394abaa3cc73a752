from .adam import Adam, AdamState, adam_step
from .autodiff import Tape, Var, as_var, backward
from .ops import (
    DimensionError,
    absolute,
    add,
    affine,
    broadcast_to,
    concat,
    conv2d,
    global_avg_pool,
    log_softmax,
    mean,
    mul,
    pick,
    relu,
    reshape,
    sigmoid,
    softmax,
    sub,
    sum_,
    take,
    upsample2x,
)

__all__ = [
    "Adam", "AdamState", "adam_step", "Tape", "Var", "as_var", "backward",
    "DimensionError", "absolute", "add", "affine", "broadcast_to", "concat", "conv2d",
    "global_avg_pool", "log_softmax", "mean", "mul", "pick", "relu", "reshape",
    "sigmoid", "softmax", "sub", "sum_", "take", "upsample2x",
]
