from .gradcheck import fd_check, fd_report, numeric_grad
from .optim import SGD, Adam, make_optimizer, optimizer_step
from .rng import ALGORITHM, Rng
from .tensor import (
    DegenerateInputError,
    NonFiniteError,
    ShapeError,
    Tensor,
    abs_,
    as_tensor,
    clip,
    concat,
    cosine_similarity,
    elementwise,
    exp,
    getitem,
    l2_normalize,
    log,
    log_softmax,
    matmul,
    mean,
    mse,
    reduction,
    relu,
    reshape,
    sigmoid,
    softmax,
    softmax_cross_entropy,
    softplus,
    sqrt,
    squared_norm,
    take,
    tanh,
    transpose,
    tsum,
)
