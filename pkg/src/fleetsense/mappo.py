"""Shared-parameter multi-agent PPO over R-GCN vehicle embeddings.

One parameter dictionary holds the R-GCN (``rgcn.*``), the actor MLP
(``actor.*``) and the critic MLP (``critic.*``); every vehicle runs the same
networks on its own embedding, so agents differ only through their inputs.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional

import numpy as np

from .demand import STREAM_POLICY, slot_rng
from .env import EnvConfig, FleetEnv, Metrics
from .graph import RgcnParams, TopologyGraph, batch_graphs, build_graph, feature_dims, rgcn_forward
from .nn import AdamState, Mlp, NonFiniteError, Tensor, adam_step, load_checkpoint, no_grad, save_checkpoint
from .nn import autodiff as ad
from .runner import run_policy_episode

# evaluation episodes draw seeds from a range no training run touches
EVAL_SEED_OFFSET = 1_000_000_007
TRAIN_SEED_STRIDE = 1_000_003


@dataclass
class TrainConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    value_clip: float = 0.2
    lr: float = 3e-4
    epochs_per_batch: int = 4
    rollout_slots: int = 200
    episodes: int = 100
    entropy_coef: float = 0.01
    # linear anneal target over the run; None keeps entropy_coef fixed
    entropy_coef_final: Optional[float] = None
    value_coef: float = 0.5
    max_grad_norm: float = 10.0
    reward_scale: float = 1.0
    rgcn_hidden: int = 128
    embed_dim: int = 10
    mlp_hidden: int = 64
    rgcn_layers: int = 2
    include_shortcut: bool = True
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if not 0 < self.gamma <= 1 or not 0 < self.gae_lambda <= 1:
            raise ValueError("gamma and gae_lambda must lie in (0, 1]")
        if self.clip_eps <= 0 or self.value_clip <= 0:
            raise ValueError("clip ranges must be positive")
        if self.lr <= 0 or self.reward_scale <= 0:
            raise ValueError("lr and reward_scale must be positive")
        if self.epochs_per_batch < 1 or self.rollout_slots < 1:
            raise ValueError("epochs_per_batch and rollout_slots must be >= 1")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if self.entropy_coef < 0 or (self.entropy_coef_final is not None and self.entropy_coef_final < 0):
            raise ValueError("entropy coefficients must be non-negative")
        return self

    def entropy_at(self, episodes_done: int) -> float:
        if self.entropy_coef_final is None:
            return self.entropy_coef
        frac = min(1.0, episodes_done / self.episodes)
        return self.entropy_coef + (self.entropy_coef_final - self.entropy_coef) * frac


class MappoModel:
    """R-GCN encoder feeding an actor head and a critic head of the same shape."""

    def __init__(self, params: dict, rgcn: RgcnParams, actor: Mlp, critic: Mlp,
                 include_shortcut: bool = True):
        self.params = params
        self.rgcn = rgcn
        self.actor = actor
        self.critic = critic
        self.include_shortcut = include_shortcut

    @classmethod
    def create(cls, env_config: EnvConfig, tc: TrainConfig, seed: Optional[int] = None) -> "MappoModel":
        rng = np.random.default_rng([tc.seed if seed is None else seed, 11])
        params: dict = {}
        rgcn = RgcnParams.create(params, "rgcn", feature_dims(env_config), rng,
                                 hidden=tc.rgcn_hidden, out=tc.embed_dim, n_layers=tc.rgcn_layers)
        h = tc.mlp_hidden
        actor = Mlp.create(params, "actor", [tc.embed_dim, h, h, env_config.n_actions], rng,
                           out_gain=0.01)
        critic = Mlp.create(params, "critic", [tc.embed_dim, h, h, 1], rng, out_gain=1.0)
        return cls(params, rgcn, actor, critic, tc.include_shortcut)

    def forward(self, graph: TopologyGraph) -> tuple[Tensor, Tensor]:
        """Logits ``(n_vehicles, A)`` and values ``(n_vehicles,)`` for every vehicle row."""
        emb = rgcn_forward(graph, self.rgcn)
        logits = self.actor(emb)
        values = self.critic(emb)
        return logits, ad.pick(values, np.zeros(values.shape[0], dtype=np.intp))

    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, arrays: dict) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)[:3]}...")
        for k, p in self.params.items():
            if arrays[k].shape != p.data.shape:
                raise ad.ShapeError(f"{k}: checkpoint shape {arrays[k].shape} != {p.data.shape}")
            p.data[...] = arrays[k]

    def zero_(self) -> "MappoModel":
        for p in self.params.values():
            p.data[...] = 0.0
        return self

    def save(self, path, meta: Optional[dict] = None) -> None:
        save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path, env_config: EnvConfig, tc: TrainConfig) -> "MappoModel":
        arrays, _ = load_checkpoint(path)
        model = cls.create(env_config, tc)
        model.load_state_dict(arrays)
        return model


# ------------------------------------------------------------ action choice
def sample_masked(logits: np.ndarray, mask, rng: np.random.Generator) -> tuple[int, float]:
    """Draw from the masked categorical; returns ``(action, log-prob)``."""
    mask = np.asarray(mask, dtype=bool)
    z = np.where(mask, logits, -np.inf)
    z = z - z.max()
    p = np.where(mask, np.exp(z), 0.0)
    p /= p.sum()
    a = int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"))
    a = min(a, len(p) - 1)
    while not mask[a]:  # guards the cumulative-sum edge at exactly 1.0
        a -= 1
    return a, float(math.log(p[a]))


def argmax_masked(logits: np.ndarray, mask, rng: np.random.Generator) -> int:
    """Legal argmax; exact ties broken uniformly so a flat policy behaves like Random."""
    vals = np.where(np.asarray(mask, dtype=bool), logits, -np.inf)
    best = np.flatnonzero(vals == vals.max())
    return int(best[0]) if best.size == 1 else int(best[rng.integers(best.size)])


class MappoPolicy:
    """Fleet-level adapter so a trained model runs wherever the baselines do."""

    trainable = True
    name = "mappo"

    def __init__(self, model: MappoModel, greedy: bool = True):
        self.model = model
        self.greedy = greedy

    def act(self, env: FleetEnv, masks: dict, rng: np.random.Generator) -> dict:
        graph = build_graph(env.snapshot(), self.model.include_shortcut)
        with no_grad():
            logits, _ = self.model.forward(graph)
        out = {}
        for m in sorted(masks):
            if self.greedy:
                out[m] = argmax_masked(logits.data[m], masks[m], rng)
            else:
                out[m] = sample_masked(logits.data[m], masks[m], rng)[0]
        return out

    def observe(self, env, actions, outcome) -> None:
        pass

    def end_episode(self, env) -> None:
        pass


# ------------------------------------------------------------------ buffer
@dataclass
class TrajectoryBuffer:
    """Per-(slot, agent) records of one rollout.

    Arrays are ``(T, M)`` (masks ``(T, M, A)``). Busy agents have
    ``available`` false, action -1 and log-prob 0. ``dones[t]`` marks the last
    slot of an episode; ``bootstrap`` holds critic values after a rollout that
    stopped mid-episode (zeros otherwise).
    """
    graphs: list
    available: np.ndarray
    masks: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    bootstrap: np.ndarray

    @property
    def n_slots(self) -> int:
        return self.available.shape[0]

    @property
    def n_agents(self) -> int:
        return self.available.shape[1]

    @property
    def n_action_records(self) -> int:
        return int(self.available.sum())


def collect_rollout(env: FleetEnv, model: MappoModel, slots: int,
                    next_seed: Optional[Callable[[], int]] = None,
                    reward_scale: float = 1.0, on_episode_end=None) -> TrajectoryBuffer:
    """Run ``slots`` slots with stochastic masked-categorical actions.

    When an episode finishes before the budget is spent the env is reset to
    ``next_seed()``; ``on_episode_end(env)`` fires first. Policy randomness
    comes from the per-slot policy stream, so a fixed seed replays exactly.
    """
    cfg = env.config
    M, A = cfg.n_vehicles, cfg.n_actions
    graphs = []
    avail = np.zeros((slots, M), dtype=bool)
    masks = np.zeros((slots, M, A), dtype=bool)
    actions = np.full((slots, M), -1, dtype=np.int64)
    logp = np.zeros((slots, M))
    values = np.zeros((slots, M))
    rewards = np.zeros((slots, M))
    dones = np.zeros(slots, dtype=bool)
    bootstrap = np.zeros(M)
    for i in range(slots):
        if env.done:
            if next_seed is None:
                raise RuntimeError("episode ended and no next seed was supplied")
            env.reset(next_seed())
        graph = build_graph(env.snapshot(), model.include_shortcut)
        with no_grad():
            lg, v = model.forward(graph)
        rng = slot_rng(env.seed, env.t, STREAM_POLICY)
        legal = env.legal_masks()
        acts = {}
        for m in sorted(legal):
            a, lp = sample_masked(lg.data[m], legal[m], rng)
            acts[m] = a
            avail[i, m] = True
            masks[i, m] = legal[m]
            actions[i, m] = a
            logp[i, m] = lp
        out = env.step(acts)
        graphs.append(graph)
        values[i] = v.data
        rewards[i] = out.rewards * reward_scale
        if out.done:
            dones[i] = True
            if on_episode_end is not None:
                on_episode_end(env)
    if not dones[-1]:
        with no_grad():
            _, v = model.forward(build_graph(env.snapshot(), model.include_shortcut))
        bootstrap = v.data.copy()
    return TrajectoryBuffer(graphs, avail, masks, actions, logp, values, rewards, dones, bootstrap)


# --------------------------------------------------------------------- GAE
def compute_gae(buffer: TrajectoryBuffer, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Raw advantages and returns, ``(T, M)`` each, run per agent over every slot.

    Busy slots stay in each agent's stream with reward 0, so a job lasting
    ``k`` slots is discounted by ``gamma**k`` naturally.
    """
    T = buffer.n_slots
    if T == 0:
        raise ValueError("empty trajectory buffer")
    adv = np.zeros_like(buffer.values)
    last = np.zeros(buffer.n_agents)
    for t in range(T - 1, -1, -1):
        if buffer.dones[t]:
            nv = np.zeros(buffer.n_agents)
            last = np.zeros(buffer.n_agents)
        else:
            nv = buffer.values[t + 1] if t + 1 < T else buffer.bootstrap
        delta = buffer.rewards[t] + gamma * nv - buffer.values[t]
        last = delta + gamma * lam * last
        adv[t] = last
    return adv, adv + buffer.values


def normalize_advantages(adv: np.ndarray, available: Optional[np.ndarray] = None) -> np.ndarray:
    sel = adv[available] if available is not None else adv.reshape(-1)
    if sel.size == 0:
        return adv.copy()
    mu, sd = sel.mean(), sel.std()
    return (adv - mu) / (sd + 1e-8)


# ----------------------------------------------------------------- update
@dataclass
class PpoBatch:
    graph: TopologyGraph
    rows: np.ndarray          # flat (slot * M + agent) indices of action records
    masks: np.ndarray
    actions: np.ndarray
    logp_old: np.ndarray
    adv: np.ndarray
    values_old: np.ndarray    # all records, flat
    returns: np.ndarray       # all records, flat

    @classmethod
    def from_buffer(cls, buffer: TrajectoryBuffer, adv_norm: np.ndarray, returns: np.ndarray) -> "PpoBatch":
        flat_avail = buffer.available.reshape(-1)
        rows = np.flatnonzero(flat_avail)
        A = buffer.masks.shape[-1]
        return cls(
            graph=batch_graphs(buffer.graphs),
            rows=rows,
            masks=buffer.masks.reshape(-1, A)[rows],
            actions=buffer.actions.reshape(-1)[rows],
            logp_old=buffer.logp.reshape(-1)[rows],
            adv=adv_norm.reshape(-1)[rows],
            values_old=buffer.values.reshape(-1),
            returns=returns.reshape(-1),
        )


def ppo_loss(model: MappoModel, batch: PpoBatch, tc: TrainConfig,
             entropy_coef: Optional[float] = None) -> tuple[Tensor, dict]:
    ent_coef = tc.entropy_coef if entropy_coef is None else entropy_coef
    logits, values = model.forward(batch.graph)
    lg = ad.gather_rows(logits, batch.rows)
    logp_all = ad.masked_log_softmax(lg, batch.masks)
    logp = ad.pick(logp_all, batch.actions)
    ratio = ad.exp(ad.sub(logp, batch.logp_old))
    surr1 = ad.mul(ratio, batch.adv)
    surr2 = ad.mul(ad.clip(ratio, 1.0 - tc.clip_eps, 1.0 + tc.clip_eps), batch.adv)
    policy_loss = ad.mul(ad.mean(ad.minimum(surr1, surr2)), -1.0)

    v_clipped = ad.add(ad.clip(ad.sub(values, batch.values_old), -tc.value_clip, tc.value_clip),
                       batch.values_old)
    value_loss = ad.mean(ad.maximum(ad.square(ad.sub(values, batch.returns)),
                                    ad.square(ad.sub(v_clipped, batch.returns))))
    probs = ad.masked_softmax(lg, batch.masks)
    entropy = ad.mul(ad.sum(ad.mul(probs, logp_all)), -1.0 / max(1, len(batch.rows)))

    total = ad.add(ad.add(policy_loss, ad.mul(value_loss, tc.value_coef)),
                   ad.mul(entropy, -ent_coef))
    log_ratio = logp.data - batch.logp_old
    diag = {
        "policy_loss": policy_loss.item(),
        "value_loss": value_loss.item(),
        "entropy": entropy.item(),
        "mean_ratio": float(np.mean(ratio.data)) if ratio.data.size else 1.0,
        # low-variance KL(old || new) estimator
        "approx_kl": float(np.mean(np.expm1(log_ratio) - log_ratio)) if log_ratio.size else 0.0,
        "clip_frac": float(np.mean(np.abs(ratio.data - 1.0) > tc.clip_eps)) if ratio.data.size else 0.0,
        "total_loss": total.item(),
    }
    return total, diag


def ppo_update(model: MappoModel, batch: PpoBatch, tc: TrainConfig, adam: AdamState,
               entropy_coef: Optional[float] = None) -> list[dict]:
    """``epochs_per_batch`` full-batch Adam steps on the clipped PPO objective."""
    out = []
    for _ in range(tc.epochs_per_batch):
        for p in model.params.values():
            p.zero_grad()
        total, diag = ppo_loss(model, batch, tc, entropy_coef)
        if not math.isfinite(diag["total_loss"]):
            raise NonFiniteError(f"non-finite PPO loss: {diag}")
        total.backward()
        grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
        adam_step(model.params, grads, adam, tc.lr, max_grad_norm=tc.max_grad_norm)
        out.append(diag)
    return out


# --------------------------------------------------------------- evaluate
@dataclass
class EvalSummary:
    episodes: list

    def _stat(self, key: str) -> tuple[float, float]:
        vals = [getattr(m, key) for m in self.episodes if getattr(m, key) is not None]
        if not vals:
            return float("nan"), float("nan")
        return float(np.mean(vals)), float(np.std(vals))

    @property
    def qos(self) -> tuple[float, float]:
        return self._stat("qos")

    @property
    def adi(self) -> tuple[float, float]:
        return self._stat("adi")

    @property
    def adu(self) -> tuple[float, float]:
        return self._stat("adu")

    @property
    def avg_aoi(self) -> tuple[float, float]:
        return self._stat("avg_aoi")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("qos", "adi", "adu", "avg_aoi")}


def eval_seeds(seed: int, episodes: int) -> list[int]:
    return [EVAL_SEED_OFFSET + seed * 10_007 + j for j in range(episodes)]


def evaluate(env_config: EnvConfig, model: MappoModel, episodes: int, seed: int = 0,
             rank: Optional[int] = None) -> EvalSummary:
    """Greedy-action evaluation on seeds disjoint from every training seed."""
    if episodes < 1:
        raise ValueError("evaluation needs at least one episode")
    env = FleetEnv(env_config)
    if rank is not None:
        env.set_rank(rank)
    policy = MappoPolicy(model, greedy=True)
    return EvalSummary([run_policy_episode(env, policy, s) for s in eval_seeds(seed, episodes)])


# ------------------------------------------------------------------- train
DIAG_COLUMNS = ("update", "policy_loss", "value_loss", "entropy", "mean_ratio", "approx_kl",
                "clip_frac", "total_loss")


@dataclass
class TrainResult:
    model: MappoModel
    episodes: list = field(default_factory=list)      # (episode, seed, rank, Metrics, wall_ms)
    diagnostics: list = field(default_factory=list)   # one dict per optimizer step
    rank_history: list = field(default_factory=list)


def train_seeds(seed: int) -> Iterator[int]:
    i = 0
    while True:
        yield seed * TRAIN_SEED_STRIDE + i
        i += 1


def train(env_config: EnvConfig, tc: TrainConfig, tuner=None, log: Optional[Callable] = None,
          model: Optional[MappoModel] = None) -> TrainResult:
    """On-policy training: collect ``rollout_slots``, update, discard, repeat.

    Stops once ``tc.episodes`` episodes have completed. A rank tuner, when
    given, sees each finished episode's ADU and sets the rank for the next.
    """
    tc.validate()
    env = FleetEnv(env_config)
    model = model or MappoModel.create(env_config, tc)
    adam = AdamState()
    seeds = train_seeds(tc.seed)
    result = TrainResult(model)
    state = {"t0": time.perf_counter(), "seed": next(seeds)}

    def finish(e: FleetEnv):
        met = e.metrics()
        wall = (time.perf_counter() - state["t0"]) * 1e3
        result.episodes.append((len(result.episodes), e.seed, e.rank, met, wall))
        if tuner is not None:
            e.set_rank(tuner.observe(met.adu))
        if log is not None:
            log(len(result.episodes), met)
        state["t0"] = time.perf_counter()

    def next_seed() -> int:
        return next(seeds)

    if tuner is not None:
        env.set_rank(tuner.eta)
    env.reset(state["seed"])
    while len(result.episodes) < tc.episodes:
        buf = collect_rollout(env, model, tc.rollout_slots, next_seed, tc.reward_scale, finish)
        adv, ret = compute_gae(buf, tc.gamma, tc.gae_lambda)
        batch = PpoBatch.from_buffer(buf, normalize_advantages(adv, buf.available), ret)
        if batch.rows.size == 0:
            continue
        ent = tc.entropy_at(len(result.episodes))
        for diag in ppo_update(model, batch, tc, adam, ent):
            result.diagnostics.append({"update": len(result.diagnostics), **diag})
    if tuner is not None:
        result.rank_history = list(tuner.history)
    return result


def write_diagnostics_csv(rows: list, path, header: Optional[str] = None) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DIAG_COLUMNS)
        for r in rows:
            w.writerow([r["update"]] + [repr(float(r[c])) for c in DIAG_COLUMNS[1:]])
