from .functional import (
    LAYER_KINDS,
    ShapeError,
    avg_pool,
    batch_norm,
    conv2d,
    conv_transpose2d,
    cross_entropy,
    global_avg_pool,
    instance_norm,
    kl_divergence,
    layer_forward,
    leaky_relu,
    linear,
    log_sigmoid,
    log_softmax,
    nearest_upsample,
    relu,
    sigmoid,
    softmax,
    tanh,
)
from .gradcheck import finite_diff_gradient, finite_diff_param_gradient, relative_error
from .optim import SGD, Adam, Parameter, adam_step, frozen, sgd_momentum_step, zero_grad
from .tensor import (
    DTYPE,
    Tape,
    Tensor,
    absolute,
    amax,
    as_tensor,
    backward,
    clip,
    concat,
    exp,
    log,
    maximum,
    mean,
    precision,
    tsum,
)

__all__ = [
    "DTYPE", "LAYER_KINDS", "SGD", "Adam", "Parameter", "ShapeError", "Tape", "Tensor",
    "absolute", "adam_step", "amax", "as_tensor", "avg_pool", "backward", "batch_norm",
    "clip", "concat", "conv2d", "conv_transpose2d", "cross_entropy", "exp",
    "finite_diff_gradient", "finite_diff_param_gradient", "frozen", "global_avg_pool", "instance_norm", "kl_divergence",
    "layer_forward", "leaky_relu", "linear", "log", "log_sigmoid", "log_softmax", "maximum",
    "mean", "nearest_upsample", "precision", "relative_error", "relu", "sgd_momentum_step", "sigmoid", "softmax", "tanh",
    "tsum", "zero_grad",
]
