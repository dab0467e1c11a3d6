"""Adam with bias correction over named parameter dictionaries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import NonFiniteError


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              max_grad_norm: float = 0.0) -> AdamState:
    """Update ``params`` (name -> array or Tensor) in place and return the state.

    ``grads`` maps the same names to arrays; missing names are treated as zero.
    ``max_grad_norm > 0`` rescales the joint gradient to that global norm.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
    if max_grad_norm > 0:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > max_grad_norm:
            grads = {k: g * (max_grad_norm / norm) for k, g in grads.items()}
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        arr = p.data if hasattr(p, "data") and not isinstance(p, np.ndarray) else p
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(arr)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        arr -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state
