from .optim import AdamW, MissingGradError, PlateauScheduler
from .tensor import (
    Graph,
    GraphError,
    ShapeError,
    Tensor,
    absolute,
    add,
    as_tensor,
    backward,
    concat,
    div,
    exp,
    getitem,
    layer_norm,
    log,
    matmul,
    mul,
    neg,
    no_grad,
    power,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    square,
    sub,
    tanh,
)
