from .tensor import (
    Tensor,
    Grads,
    astensor,
    backward,
    no_grad,
    enable_grad,
    is_grad_enabled,
    set_finite_checks,
    add,
    mul,
    matmul,
    reshape,
    transpose,
    flip,
    broadcast_to,
    concat,
    getitem,
    relu,
    leaky_relu,
    softplus,
    sigmoid,
    exp,
    tsum,
    tmean,
    cumsum,
    unfold,
    fold,
    conv2d,
    upsample2x,
    bilerp2d,
    take,
    scatter_rows,
)
from .optim import OptimState, adamw_step, state_arrays, restore_state_arrays
from .random import make_rng, seeded_normal
from .checkpoint import save_checkpoint, load_checkpoint, CheckpointError
