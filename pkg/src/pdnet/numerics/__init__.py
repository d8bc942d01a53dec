from .tensor import (
    Tensor,
    add,
    as_tensor,
    concat,
    div,
    gather,
    inject_backward_fault,
    log_softmax,
    matmul,
    max_reduce,
    mean,
    mul,
    no_grad,
    norm,
    relu,
    reshape,
    sigmoid,
    sub,
    tsum,
)
from .nn import MLP, Linear, Module, Parameter, linear, mlp, reset_parameters
from .losses import cross_entropy_label_smoothing
from .optim import AdamW, OptimizerState, adamw_step, cosine_lr
from .gradcheck import GradCheckReport, grad_check, relative_error
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint


def max_pool_set(x):
    """Max over the member axis of a (..., members, C) tensor."""
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ValueError("max_pool_set needs a non-empty member axis")
    return max_reduce(x, axis=-2)
