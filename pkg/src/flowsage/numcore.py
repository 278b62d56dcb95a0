"""Minimal dense numeric kernel used by every learning component.

Everything runs in float64 with a fixed reduction order (plain numpy ops,
no threads, no accumulation tricks), so identical inputs give bit-identical
outputs. Backward passes are hand-derived; the test suite checks each one
against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NumericError

Array = np.ndarray


def as_f64(values) -> Array:
    """Coerce to a float64 ndarray without copying when already one."""
    return np.asarray(values, dtype=np.float64)


@dataclass
class AffineReluCache:
    """Saved forward state for :func:`affine_relu_backward`."""

    weights: Array
    inputs: Array
    pre_activation: Array


def affine_relu_forward(weights: Array, x: Array) -> tuple[Array, AffineReluCache]:
    """Compute ``relu(W @ x)``.

    ``x`` may be a vector of length ``cols(W)`` or a matrix of column
    vectors with shape ``(cols(W), batch)``.
    """
    weights = as_f64(weights)
    x = as_f64(x)
    if weights.ndim != 2:
        raise ValueError(f"weights must be 2-D, got shape {weights.shape}")
    if x.shape[0] != weights.shape[1]:
        raise ValueError(
            f"shape mismatch: W is {weights.shape}, x has leading dim {x.shape[0]}"
        )
    pre = weights @ x
    out = np.maximum(pre, 0.0)
    return out, AffineReluCache(weights=weights, inputs=x, pre_activation=pre)


def affine_relu_backward(cache: AffineReluCache, dy: Array) -> tuple[Array, Array]:
    """Gradients of ``relu(W @ x)`` composed with upstream ``dy``.

    Returns ``(dW, dx)``. The ReLU gate uses subgradient 0 at exactly 0.
    """
    dy = as_f64(dy)
    if dy.shape != cache.pre_activation.shape:
        raise ValueError(
            f"dy shape {dy.shape} does not match forward output "
            f"{cache.pre_activation.shape}"
        )
    dpre = dy * (cache.pre_activation > 0.0)
    if cache.inputs.ndim == 1:
        dw = np.outer(dpre, cache.inputs)
    else:
        dw = dpre @ cache.inputs.T
    dx = cache.weights.T @ dpre
    return dw, dx


def sigmoid(x):
    """Numerically stable logistic function; scalar or elementwise.

    Branches on sign so large |x| never overflows; sigmoid(-745) is a
    subnormal > 0, never exactly 0.
    """
    arr = as_f64(x)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    ex = np.exp(arr[~pos])
    out[~pos] = ex / (1.0 + ex)
    return float(out[0]) if scalar else out


@dataclass
class AdamState:
    """Adam optimizer state; moment buffers are keyed by parameter name."""

    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)


def adam_step(
    params: dict[str, Array], grads: dict[str, Array], state: AdamState
) -> tuple[dict[str, Array], AdamState]:
    """One bias-corrected Adam update. Mutates params/state in place.

    Raises NumericError naming the parameter if its gradient is non-finite.
    """
    state.step += 1
    t = state.step
    for name in params:
        g = grads[name]
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(
                f"gradient shape {g.shape} != parameter shape {p.shape} for '{name}'"
            )
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{name}'")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        p -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params, state


def grad_check(
    f: Callable[[dict[str, Array]], float],
    params: dict[str, Array],
    analytic: dict[str, Array],
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``f`` maps the parameter dict to a scalar. Each entry of each parameter
    is perturbed by +-h; relative error is |a - n| / max(1, |a|, |n|).
    """
    worst = 0.0
    for name, p in params.items():
        a = analytic[name]
        flat = p.reshape(-1)
        a_flat = np.asarray(a, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(params)
            flat[i] = orig - h
            down = f(params)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            denom = max(1.0, abs(a_flat[i]), abs(numeric))
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
    return worst
