from . import gradcheck
from .tensor import (
    AutodiffError,
    Tape,
    Tensor,
    active_tape,
    add,
    broadcast_to,
    concat,
    cos,
    debug_checks,
    debug_checks_enabled,
    div,
    exp,
    gather,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    neg,
    power,
    record_op,
    relu,
    reshape,
    set_debug_checks,
    sigmoid,
    sin,
    slice_,
    softmax,
    softplus,
    sqrt,
    std,
    stop_gradient,
    sub,
    sum_,
    transpose,
)
from . import _op_checks  # noqa: F401  (registers core op gradient checks)
