"""Central finite-difference validation of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .autodiff import Tensor


def grad_check(f: Callable[[dict], Tensor], params: dict, h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps the parameter dictionary (name -> Tensor) to a scalar Tensor.
    Error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    for p in params.values():
        p.zero_grad()
    f(params).backward()
    worst = 0.0
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        for idx in np.ndindex(p.data.shape):
            orig = p.data[idx]
            p.data[idx] = orig + h
            up = f(params).item()
            p.data[idx] = orig - h
            down = f(params).item()
            p.data[idx] = orig
            numeric = (up - down) / (2.0 * h)
            a = analytic[idx]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
