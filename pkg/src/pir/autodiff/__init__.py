"""Reverse-mode automatic differentiation over float64 numpy arrays."""
from pir.autodiff import functional
from pir.autodiff.gradcheck import check_gradients, gradcheck
from pir.autodiff.nn import Adam, Conv2d, LayerNorm, Linear, Module, param
from pir.autodiff.rng import derive, make_rng, uniform_init
from pir.autodiff.tensor import (
    Tensor,
    abs,
    add,
    as_tensor,
    broadcast_to,
    clamp,
    concat,
    cos,
    cumsum,
    div,
    embedding,
    exp,
    getitem,
    is_recording,
    layer_norm,
    log,
    masked_softmax,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    reshape,
    sigmoid,
    silu,
    sin,
    softmax,
    softplus,
    sparse_matmul,
    sqrt,
    stack,
    sub,
    take,
    tanh,
    transpose,
    tsum,
    where,
)

__all__ = [name for name in dir() if not name.startswith("_")]
