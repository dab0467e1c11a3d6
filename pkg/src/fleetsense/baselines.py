"""Comparison policies: Random, Greedy-in-OS, Greedy-in-FT, UCB bandit and IQL.

Per-agent decision rules are plain functions of ``(mask, rng)``. The classes
wrap them behind the fleet-level interface shared with the MAPPO policy:
``act(env, masks, rng) -> {agent: action}``, plus optional ``observe`` and
``end_episode`` hooks for learners.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .env import FleetEnv, StepOutcome
from .grid import PHASES
from .nn import AdamState, Mlp, Tensor, adam_step, no_grad
from .nn import autodiff as ad


# ------------------------------------------------------------ rule policies
def random_policy(mask, rng: np.random.Generator) -> int:
    legal = np.flatnonzero(mask)
    if legal.size == 0:
        raise ValueError("no legal action")
    return int(legal[rng.integers(legal.size)])


def _prioritise(mask, first: int, rng: np.random.Generator) -> int:
    mask = np.asarray(mask, dtype=bool)
    if mask[first]:
        return first
    rest = mask.copy()
    rest[first] = False
    return random_policy(rest, rng)


def greedy_os_policy(mask, rng: np.random.Generator) -> int:
    """Accept an order whenever one is on hand, else any other legal action."""
    return _prioritise(mask, len(mask) - 2, rng)


def greedy_ft_policy(mask, rng: np.random.Generator) -> int:
    """Collect data whenever a PoI is on hand, else any other legal action."""
    return _prioritise(mask, len(mask) - 1, rng)


# ------------------------------------------------------------------- UCB
@dataclass
class UcbState:
    counts: np.ndarray
    means: np.ndarray
    c: float = 2.0

    @classmethod
    def create(cls, n_actions: int, c: float = 2.0) -> "UcbState":
        return cls(np.zeros(n_actions, dtype=np.int64), np.zeros(n_actions), c)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def ucb_policy(state: UcbState, mask) -> int:
    mask = np.asarray(mask, dtype=bool)
    legal = np.flatnonzero(mask)
    if legal.size == 0:
        raise ValueError("no legal action")
    fresh = legal[state.counts[legal] == 0]
    if fresh.size:
        return int(fresh[0])
    n = max(1, state.total)
    score = state.means[legal] + state.c * np.sqrt(math.log(n) / state.counts[legal])
    return int(legal[np.argmax(score)])


def ucb_update(state: UcbState, action: int, reward: float) -> UcbState:
    state.counts[action] += 1
    state.means[action] += (reward - state.means[action]) / state.counts[action]
    return state


# ------------------------------------------------------ fleet-level wrappers
class RulePolicy:
    trainable = False

    def __init__(self, rule, name: str):
        self.rule = rule
        self.name = name

    def act(self, env: FleetEnv, masks: dict, rng: np.random.Generator) -> dict:
        return {m: self.rule(masks[m], rng) for m in sorted(masks)}

    def observe(self, env: FleetEnv, actions: dict, outcome: StepOutcome) -> None:
        pass

    def end_episode(self, env: FleetEnv) -> None:
        pass


def RandomPolicy() -> RulePolicy:
    return RulePolicy(random_policy, "random")


def GreedyOsPolicy() -> RulePolicy:
    return RulePolicy(greedy_os_policy, "greedy_os")


def GreedyFtPolicy() -> RulePolicy:
    return RulePolicy(greedy_ft_policy, "greedy_ft")


class UcbPolicy(RulePolicy):
    """Context-free bandit over action indices with fleet-shared statistics."""

    def __init__(self, n_actions: int, c: float = 2.0, learn: bool = True):
        self.state = UcbState.create(n_actions, c)
        self.learn = learn
        self.name = "mab"

    def act(self, env, masks, rng):
        return {m: ucb_policy(self.state, masks[m]) for m in sorted(masks)}

    def observe(self, env, actions, outcome):
        if self.learn:
            for m, a in sorted(actions.items()):
                ucb_update(self.state, a, float(outcome.rewards[m]))


# ------------------------------------------------------------------- IQL
def iql_observation(env: FleetEnv, m: int) -> np.ndarray:
    """Local fixed-width observation of agent ``m``.

    Own vehicle features, the features of its grid, and summaries of the orders
    (count, max price, min age) and PoIs (count, max utility, min AoI) there.
    """
    cfg = env.config
    G, M = cfg.grid.size, cfg.n_vehicles
    g = env.veh_grid[m]
    r, c = cfg.grid.normalized_coords(g)
    veh = np.zeros(6 + M)
    veh[0:2] = (r, c)
    veh[2 + PHASES.index(env.phase[m])] = 1.0
    veh[5] = env.t / cfg.horizon
    veh[6 + m] = 1.0
    orders = env.orders_in(g)
    pois = env.pois_in(g)
    n_avail = sum(1 for k in env.available_agents() if env.veh_grid[k] == g)
    grd = np.zeros(3 + G)
    grd[0] = len(orders) / cfg.count_norm
    grd[1] = n_avail / cfg.count_norm
    grd[2] = len(pois) / cfg.count_norm
    grd[3 + g] = 1.0
    osum = np.zeros(3)
    if orders:
        osum[:] = (len(orders) / cfg.count_norm,
                   max(o.price for o in orders) / cfg.price_bound,
                   min(env.t - o.created_at for o in orders) / cfg.expiry_slots)
    psum = np.zeros(3)
    if pois:
        psum[:] = (len(pois) / cfg.count_norm,
                   max(env.utility_now(p) for p in pois),
                   min(p.aoi(env.t) / cfg.tasks[p.task].freshness_horizon for p in pois))
    return np.concatenate([veh, grd, osum, psum])


def iql_obs_dim(config) -> int:
    return 6 + config.n_vehicles + 3 + config.grid.size + 6


@dataclass
class IqlConfig:
    gamma: float = 0.99
    lr: float = 1e-3
    batch_size: int = 64
    buffer_capacity: int = 50_000
    target_sync: int = 200
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 20_000
    train_every: int = 1
    warmup: int = 500
    reward_scale: float = 0.1
    hidden: int = 64


@dataclass
class Transition:
    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray
    next_mask: np.ndarray
    discount: float      # gamma ** elapsed slots, 0 at episode end


@dataclass
class ReplayBuffer:
    capacity: int
    items: deque = field(default_factory=deque)

    def __post_init__(self):
        self.items = deque(maxlen=self.capacity)

    def __len__(self) -> int:
        return len(self.items)

    def push(self, tr: Transition) -> None:
        self.items.append(tr)

    def sample(self, n: int, rng: np.random.Generator) -> list[Transition]:
        idx = rng.integers(len(self.items), size=n)
        return [self.items[i] for i in idx]


class QLearner:
    """Shared-weight Q-network ``[obs, 64, 64, A]`` with a periodically synced target copy."""

    def __init__(self, obs_dim: int, n_actions: int, cfg: IqlConfig, seed: int = 0):
        self.cfg = cfg
        self.n_actions = n_actions
        rng = np.random.default_rng(seed)
        self.params: dict = {}
        self.net = Mlp.create(self.params, "q", [obs_dim, cfg.hidden, cfg.hidden, n_actions],
                              rng, out_gain=0.01)
        self.target = {k: v.data.copy() for k, v in self.params.items()}
        self.adam = AdamState()
        self.updates = 0

    def q_values(self, obs: np.ndarray, target: bool = False) -> np.ndarray:
        obs = np.atleast_2d(obs)
        if target:
            h = obs
            for i in range(self.net.n_layers):
                h = h @ self.target[f"q.W{i}"] + self.target[f"q.b{i}"]
                if i < self.net.n_layers - 1:
                    h = np.tanh(h)
            return h
        with no_grad():
            return self.net(Tensor(obs)).data

    def update(self, batch: list[Transition]) -> float:
        obs = np.stack([b.obs for b in batch])
        nxt = np.stack([b.next_obs for b in batch])
        masks = np.stack([b.next_mask for b in batch])
        acts = np.array([b.action for b in batch])
        rew = np.array([b.reward for b in batch])
        disc = np.array([b.discount for b in batch])
        qn = np.where(masks, self.q_values(nxt, target=True), -np.inf).max(axis=1)
        qn = np.where(disc > 0, qn, 0.0)
        y = rew + disc * qn
        for p in self.params.values():
            p.zero_grad()
        q = ad.pick(self.net(Tensor(obs)), acts)
        loss = ad.mean(ad.square(ad.sub(q, y)))
        loss.backward()
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adam_step(self.params, grads, self.adam, self.cfg.lr, max_grad_norm=10.0)
        self.updates += 1
        if self.updates % self.cfg.target_sync == 0:
            self.sync_target()
        return loss.item()

    def sync_target(self) -> None:
        self.target = {k: v.data.copy() for k, v in self.params.items()}


def iql_policy(q: np.ndarray, mask, eps: float, rng: np.random.Generator) -> int:
    """ε-greedy over legal actions; greedy ties go to a uniformly drawn maximiser."""
    mask = np.asarray(mask, dtype=bool)
    if eps > 0 and rng.random() < eps:
        return random_policy(mask, rng)
    vals = np.where(mask, q, -np.inf)
    best = np.flatnonzero(vals == vals.max())
    return int(best[0]) if best.size == 1 else int(best[rng.integers(best.size)])


class IqlPolicy:
    """Independent Q-learning with semi-MDP transitions.

    A decision made at slot ``t`` closes when the agent is next available (or
    the episode ends); the elapsed ``k`` slots enter as discount ``gamma**k``.
    """

    trainable = True
    name = "iql"

    def __init__(self, config, cfg: Optional[IqlConfig] = None, seed: int = 0):
        self.cfg = cfg or IqlConfig()
        self.learner = QLearner(iql_obs_dim(config), config.n_actions, self.cfg, seed)
        self.buffer = ReplayBuffer(self.cfg.buffer_capacity)
        self.rng = np.random.default_rng([seed, 7])
        self.training = True
        self.steps = 0
        self._pending: dict = {}

    @property
    def epsilon(self) -> float:
        if not self.training:
            return 0.0
        frac = min(1.0, self.steps / max(1, self.cfg.eps_decay_steps))
        return self.cfg.eps_start + frac * (self.cfg.eps_end - self.cfg.eps_start)

    def act(self, env: FleetEnv, masks: dict, rng: np.random.Generator) -> dict:
        out = {}
        eps = self.epsilon
        for m in sorted(masks):
            obs = iql_observation(env, m)
            if self.training and m in self._pending:
                self._close(m, obs, masks[m], env.t)
            q = self.learner.q_values(obs)[0]
            a = iql_policy(q, masks[m], eps, rng)
            out[m] = a
            if self.training:
                self._pending[m] = [obs, a, 0.0, env.t]
        return out

    def _close(self, m, next_obs, next_mask, t_now, terminal: bool = False):
        obs, a, r, t0 = self._pending.pop(m)
        disc = 0.0 if terminal else self.cfg.gamma ** (t_now - t0)
        self.buffer.push(Transition(obs, a, r, next_obs, np.asarray(next_mask, dtype=bool), disc))

    def observe(self, env, actions, outcome: StepOutcome) -> None:
        if not self.training:
            return
        for m in actions:
            self._pending[m][2] += self.cfg.reward_scale * float(outcome.rewards[m])
        self.steps += len(actions)
        if len(self.buffer) >= self.cfg.warmup and env.t % self.cfg.train_every == 0:
            self.learner.update(self.buffer.sample(self.cfg.batch_size, self.rng))

    def end_episode(self, env: FleetEnv) -> None:
        if not self.training:
            return
        dummy_mask = np.ones(env.config.n_actions, dtype=bool)
        for m in list(self._pending):
            self._close(m, iql_observation(env, m), dummy_mask, env.t, terminal=True)

    def state_dict(self) -> dict:
        return {k: v.data for k, v in self.learner.params.items()}

    def load_state_dict(self, arrays: dict) -> None:
        for k, v in self.learner.params.items():
            v.data[...] = arrays[k]
        self.learner.sync_target()
