from .core import (Tensor, TensorError, add, backward, build_tape, clip, concat, exp, getitem,
                   leaky_relu, log, matmul, mul, no_grad, sigmoid, stack, sub, tanh)
from .nn import (BatchNormState, batch_norm, bigru, conv2d_3x3_same, conv3x3_same_nhwc, embedding_lookup, gru,
                 l2_norm_over_axis, linear, lp_pool, mean_over_axis, nearest_upsample_time,
                 time_mask)
from .optim import AdamState, adam_step, zero_grads

__all__ = [
    "Tensor", "TensorError", "add", "backward", "build_tape", "clip", "concat", "exp", "getitem",
    "leaky_relu", "log", "matmul", "mul", "no_grad", "sigmoid", "stack", "sub", "tanh",
    "BatchNormState", "batch_norm", "bigru", "conv2d_3x3_same", "conv3x3_same_nhwc", "embedding_lookup", "gru",
    "l2_norm_over_axis", "linear", "lp_pool", "mean_over_axis", "nearest_upsample_time",
    "time_mask", "AdamState", "adam_step", "zero_grads",
]
