"""Online LoRA rank selection from episode-level ADU feedback.

Three strategies share one small interface (``eta`` plus ``observe(adu)``):
the hill-climb-with-reversal tuner, a greedy variant that never reverses, and
Gaussian Thompson sampling over ranks.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .sensing import RankModel


@dataclass(frozen=True)
class TunerState:
    eta: int
    direction: int = 1
    adu_prev: float = 0.0
    eta_min: int = 1
    eta_max: int = 6
    history: tuple = ()

    def __post_init__(self):
        if self.direction not in (1, -1):
            raise ValueError("direction must be +1 or -1")
        if not self.eta_min <= self.eta <= self.eta_max:
            raise ValueError(f"rank {self.eta} outside [{self.eta_min}, {self.eta_max}]")

    def clamp(self, eta: int) -> int:
        return max(self.eta_min, min(eta, self.eta_max))


def ranktuner_step(state: TunerState, adu_curr: float) -> TunerState:
    direction = state.direction
    if adu_curr > state.adu_prev:
        eta = state.eta + direction
    else:
        direction = -direction
        eta = state.eta + direction
    return replace(state, eta=state.clamp(eta), direction=direction, adu_prev=adu_curr,
                   history=state.history + ((len(state.history), state.eta, adu_curr),))


def greedy_rank_step(state: TunerState, adu_curr: float) -> TunerState:
    eta = state.clamp(state.eta + state.direction) if adu_curr > state.adu_prev else state.eta
    return replace(state, eta=eta, adu_prev=adu_curr,
                   history=state.history + ((len(state.history), state.eta, adu_curr),))


@dataclass
class RankPosterior:
    mean: float = 0.0
    variance: float = 1.0
    count: int = 0
    m2: float = 0.0


def thompson_rank_step(posteriors: dict, adu_curr: float, eta_chosen: int,
                       rng: np.random.Generator, prior_variance: float = 1.0):
    """Fold ``adu_curr`` into the chosen rank's posterior and sample the next rank.

    The posterior over a rank's mean ADU is Gaussian with the running mean and
    the (sample variance / count) uncertainty; a rank seen once keeps the prior
    variance. Ties among samples go to the lowest rank.
    """
    post = {r: replace(p) for r, p in posteriors.items()}
    p = post[eta_chosen]
    p.count += 1
    delta = adu_curr - p.mean
    p.mean += delta / p.count
    p.m2 += delta * (adu_curr - p.mean)
    spread = p.m2 / (p.count - 1) if p.count > 1 else prior_variance
    p.variance = spread / p.count
    ranks = sorted(post)
    samples = [post[r].mean + math.sqrt(post[r].variance) * rng.standard_normal()
               if post[r].variance > 0 else post[r].mean for r in ranks]
    return post, ranks[int(np.argmax(samples))]


class RankTuner:
    """Hill climbing with direction reversal."""

    name = "ranktuner"
    _step = staticmethod(ranktuner_step)

    def __init__(self, rank_model: RankModel, eta0: int, direction: int = 1):
        self.state = TunerState(eta0, direction, 0.0, rank_model.eta_min, rank_model.eta_max)

    @property
    def eta(self) -> int:
        return self.state.eta

    @property
    def history(self) -> list:
        return list(self.state.history)

    def observe(self, adu: float) -> int:
        self.state = self._step(self.state, adu)
        return self.state.eta


class GreedyRankTuner(RankTuner):
    name = "greedy"
    _step = staticmethod(greedy_rank_step)


class ThompsonRankTuner:
    name = "thompson"

    def __init__(self, rank_model: RankModel, eta0: int, seed: int = 0,
                 prior_variance: float = 1.0):
        self.posteriors = {r: RankPosterior(variance=prior_variance)
                           for r in range(rank_model.eta_min, rank_model.eta_max + 1)}
        self.eta = eta0
        self.prior_variance = prior_variance
        self.rng = np.random.default_rng(seed)
        self._history: list = []

    @property
    def history(self) -> list:
        return list(self._history)

    def observe(self, adu: float) -> int:
        self._history.append((len(self._history), self.eta, adu))
        self.posteriors, self.eta = thompson_rank_step(
            self.posteriors, adu, self.eta, self.rng, self.prior_variance)
        return self.eta


def make_tuner(kind: str, rank_model: RankModel, eta0: int, seed: int = 0):
    if kind == "ranktuner":
        return RankTuner(rank_model, eta0)
    if kind == "greedy":
        return GreedyRankTuner(rank_model, eta0)
    if kind == "thompson":
        return ThompsonRankTuner(rank_model, eta0, seed)
    raise ValueError(f"unknown rank strategy {kind!r}")


def write_history_csv(history, path, header: Optional[str] = None) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "rank", "adu"])
        for ep, eta, adu in history:
            w.writerow([ep, eta, repr(float(adu))])
