from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    cosine_rows,
    exp,
    log,
    logsumexp,
    matmul,
    pick,
    relu,
    reshape,
    scale,
    segment_pool,
    softmax_rows,
    take_rows,
    tanh,
    total,
    transpose,
    weighted_sum,
)
from .losses import contrastive_nll, cosine_similarity, info_nce
from .params import AdamState, Parameter, adam_step, gradient_check, numerical_gradient, zero_grads
from .bundle import BundleError, load_bundle, save_bundle


def forward_backward(fn, params):
    """Evaluate scalar ``fn()`` and return ``(value, {name: gradient})``.

    Gradients of previous calls are cleared first.
    """
    zero_grads(params)
    out = fn()
    out.backward()
    return out, {p.name: p.grad.copy() for p in params}
