"""PoI generation, LoRA rank trade-offs and the proxy fine-tuning utility."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .demand import STREAM_POIS, center_profile, slot_rng
from .grid import GridMap, PoI


class RankError(ValueError):
    pass


class DistributionTag(str, Enum):
    DIVERGENT = "Divergent"
    ALIGNED = "Aligned"
    UNIFORM = "Uniform"


@dataclass(frozen=True)
class TaskSpec:
    k: int
    ceiling: float
    freshness_horizon: int
    decay_exponent: float = 1.0
    volume_ref: int = 12

    def __post_init__(self):
        if not 0 < self.ceiling <= 1:
            raise ValueError(f"task {self.k}: ceiling must lie in (0, 1]")
        if self.decay_exponent < 1:
            raise ValueError(f"task {self.k}: decay exponent must be >= 1")
        if self.freshness_horizon < 1 or self.volume_ref < 1:
            raise ValueError(f"task {self.k}: horizons must be >= 1")


def default_tasks() -> list[TaskSpec]:
    # classification-like: concave freshness decay; segmentation-like: linear
    return [
        TaskSpec(0, ceiling=0.70, freshness_horizon=40, decay_exponent=2.0, volume_ref=12),
        TaskSpec(1, ceiling=0.75, freshness_horizon=30, decay_exponent=1.0, volume_ref=12),
    ]


# rank, normalised fine-tune time, accuracy factor
DEFAULT_RANK_TABLE = (
    (1, 1.00, 0.70),
    (2, 1.45, 0.76),
    (3, 3.71, 0.98),
    (4, 5.05, 0.99),
    (5, 6.00, 0.99365),
    (6, 5.31, 1.00),
)


@dataclass(frozen=True)
class RankModel:
    table: tuple = DEFAULT_RANK_TABLE

    def __post_init__(self):
        rows = tuple(sorted((int(r), float(tf), float(af)) for r, tf, af in self.table))
        if not rows:
            raise ValueError("rank table is empty")
        ranks = [r for r, _, _ in rows]
        if ranks != list(range(ranks[0], ranks[0] + len(ranks))):
            raise ValueError(f"ranks must be contiguous, got {ranks}")
        for r, tf, af in rows:
            if tf <= 0 or not 0 < af <= 1:
                raise ValueError(f"rank {r}: bad factors ({tf}, {af})")
        object.__setattr__(self, "table", rows)

    @classmethod
    def from_rows(cls, rows: Sequence[dict]) -> "RankModel":
        return cls(tuple((d["rank"], d["time_factor"], d["accuracy_factor"]) for d in rows))

    @property
    def eta_min(self) -> int:
        return self.table[0][0]

    @property
    def eta_max(self) -> int:
        return self.table[-1][0]

    def lookup(self, eta: int) -> tuple[float, float]:
        if not self.eta_min <= eta <= self.eta_max or int(eta) != eta:
            raise RankError(f"rank {eta} outside [{self.eta_min}, {self.eta_max}]")
        _, tf, af = self.table[int(eta) - self.eta_min]
        return tf, af


def rank_lookup(model: RankModel, eta: int) -> tuple[float, float]:
    return model.lookup(eta)


def volume_factor(task: TaskSpec, d: float) -> float:
    if d <= 0:
        return 0.0
    return min(1.0, math.log1p(d) / math.log1p(task.volume_ref))


def freshness_factor(task: TaskSpec, aoi: float) -> float:
    return max(0.0, 1.0 - (aoi / task.freshness_horizon) ** task.decay_exponent)


def data_utility(task: TaskSpec, d: float, aoi: float, eta: int, rank_model: RankModel) -> float:
    """Proxy fine-tuning accuracy gained from ``d`` packages of age ``aoi`` at rank ``eta``.

    Product of the task ceiling, the rank's accuracy factor, a log-saturating
    volume curve and a power-law freshness decay.
    """
    if d < 0 or aoi < 0:
        raise ValueError("volume and AoI must be non-negative")
    _, acc = rank_model.lookup(eta)
    return task.ceiling * acc * volume_factor(task, d) * freshness_factor(task, aoi)


def finetune_duration(tau_base: int, eta: int, rank_model: RankModel) -> int:
    tf, _ = rank_model.lookup(eta)
    # round away float noise before ceil: 2 * 1.45 must give 3, not 4
    return max(1, math.ceil(round(tau_base * tf, 9)))


def poi_profile(grid: GridMap, tag: DistributionTag) -> np.ndarray:
    """Spatial weights (sum 1) for PoI placement relative to the order hotspot."""
    tag = DistributionTag(tag)
    orders = center_profile(grid)
    if tag is DistributionTag.ALIGNED:
        return orders
    if tag is DistributionTag.UNIFORM or grid.size == 1:
        return np.full(grid.size, 1.0 / grid.size)
    w = 1.0 - orders / orders.max()
    if w.sum() <= 0:
        # flat order profile (e.g. 2x2): no cold side to favour
        return np.full(grid.size, 1.0 / grid.size)
    return w / w.sum()


@dataclass(frozen=True)
class PoiModel:
    rate: tuple  # K x G
    volume_min: int = 3
    volume_max: int = 12
    distribution_tag: DistributionTag = DistributionTag.DIVERGENT
    seed: int = 0

    def __post_init__(self):
        rate = tuple(tuple(float(x) for x in row) for row in self.rate)
        if any(not math.isfinite(x) or x < 0 for row in rate for x in row):
            raise ValueError("PoI rates must be finite and non-negative")
        if not 1 <= self.volume_min <= self.volume_max:
            raise ValueError("need 1 <= volume_min <= volume_max")
        object.__setattr__(self, "rate", rate)
        object.__setattr__(self, "distribution_tag", DistributionTag(self.distribution_tag))

    @classmethod
    def from_tag(cls, grid: GridMap, tag: DistributionTag, total_rate: float,
                 n_tasks: int, seed: int = 0, **kw) -> "PoiModel":
        w = poi_profile(grid, tag) * (total_rate / n_tasks)
        return cls(rate=tuple(tuple(w) for _ in range(n_tasks)), distribution_tag=tag,
                   seed=seed, **kw)

    @property
    def n_tasks(self) -> int:
        return len(self.rate)


def generate_pois(model: PoiModel, t: int, rng: Optional[np.random.Generator] = None,
                  next_id: int = 0) -> list[PoI]:
    if rng is None:
        rng = slot_rng(model.seed, t, STREAM_POIS)
    if not model.rate:
        return []
    lam = np.asarray(model.rate)
    counts = rng.poisson(lam)
    out = []
    for k in range(lam.shape[0]):
        for g in range(lam.shape[1]):
            for _ in range(int(counts[k, g])):
                vol = int(rng.integers(model.volume_min, model.volume_max + 1))
                out.append(PoI(next_id + len(out), g, k, vol, t))
    return out
