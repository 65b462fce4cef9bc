"""Trainable parameters, the ADAM optimizer, and gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ("name", "trainable")

    def __init__(self, name: str, value, trainable: bool = True):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=trainable)
        self.name = name
        self.trainable = trainable
        if self.grad is None:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.shape}, trainable={self.trainable})"

    def zero_grad(self):
        self.grad[...] = 0.0


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params, state: AdamState) -> AdamState:
    """One bias-corrected ADAM update in place; gradients are zeroed afterwards."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p in params:
        if not p.trainable:
            p.zero_grad()
            continue
        g = p.grad
        m = state.first_moment.get(p.name)
        if m is None:
            m = state.first_moment[p.name] = np.zeros_like(p.data)
            state.second_moment[p.name] = np.zeros_like(p.data)
        v = state.second_moment[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        p.zero_grad()
    return state


def zero_grads(params):
    for p in params:
        p.zero_grad()


def numerical_gradient(fn, param: Parameter, eps: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. every entry of ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(fn().data)
        flat[i] = orig - eps
        down = float(fn().data)
        flat[i] = orig
        grad.reshape(-1)[i] = (up - down) / (2.0 * eps)
    return grad


def gradient_check(fn, params, eps: float = 1e-4) -> dict:
    """Compare analytic and central-difference gradients for each trainable parameter.

    Returns ``{name: relative_error}`` where the error is
    ``|analytic - numeric| / max(|analytic|, |numeric|)`` in the 2-norm.
    """
    params = [p for p in params if p.trainable]
    zero_grads(params)
    fn().backward()
    analytic = {p.name: p.grad.copy() for p in params}
    zero_grads(params)
    errors = {}
    for p in params:
        num = numerical_gradient(fn, p, eps)
        a = analytic[p.name]
        denom = max(np.linalg.norm(a), np.linalg.norm(num), 1e-12)
        errors[p.name] = float(np.linalg.norm(a - num) / denom)
    return errors
