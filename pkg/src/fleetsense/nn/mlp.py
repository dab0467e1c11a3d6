"""Fully connected networks over named parameter dictionaries."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    """Orthogonal initialisation scaled by ``gain``."""
    a = rng.standard_normal((max(fan_in, fan_out), min(fan_in, fan_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    w = q if fan_in >= fan_out else q.T
    return np.ascontiguousarray(gain * w[:fan_in, :fan_out])


class Mlp:
    """``[in, hidden..., out]`` with tanh between layers and a linear head.

    Weights live in ``params`` under ``{prefix}.W{i}`` / ``{prefix}.b{i}`` so
    several networks can share one parameter dictionary.
    """

    def __init__(self, params: dict, prefix: str, widths: Sequence[int]):
        self.params = params
        self.prefix = prefix
        self.widths = list(widths)
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")

    @classmethod
    def create(cls, params: dict, prefix: str, widths: Sequence[int],
               rng: np.random.Generator, out_gain: float = 1.0) -> "Mlp":
        n = len(widths) - 1
        for i in range(n):
            gain = out_gain if i == n - 1 else np.sqrt(2.0)
            params[f"{prefix}.W{i}"] = Tensor(init_linear(rng, widths[i], widths[i + 1], gain),
                                              requires_grad=True)
            params[f"{prefix}.b{i}"] = Tensor(np.zeros(widths[i + 1]), requires_grad=True)
        return cls(params, prefix, widths)

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.widths[0]:
            raise ad.ShapeError(f"{self.prefix}: input width {x.shape[-1]} != {self.widths[0]}")
        h = x
        for i in range(self.n_layers):
            h = ad.add_bias(ad.matmul(h, self.params[f"{self.prefix}.W{i}"]),
                            self.params[f"{self.prefix}.b{i}"])
            if i < self.n_layers - 1:
                h = ad.tanh(h)
        return h
