from .gradcheck import GradCheckReport, grad_check, rel_error
from .optim import Adam, AdamState, NonFiniteGradient, adam_step
from .rng import RngStream, gumbel_from_uniform, sample_gumbel, sample_uniform
from .tensor import (
    Tape,
    Tensor,
    active_tape,
    add,
    as_tensor,
    backward,
    clamp_min,
    conv2d,
    div,
    exp,
    get_default_dtype,
    getitem,
    grad_enabled,
    log,
    make_op,
    matmul,
    maxpool2x2,
    mean,
    mul,
    neg,
    new_tape,
    no_grad,
    power,
    relu,
    reshape,
    set_default_dtype,
    sigmoid,
    softmax,
    softmax_cross_entropy,
    straight_through,
    sub,
    tsum,
)
