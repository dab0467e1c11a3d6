"""The Markov-game engine: joint actions, claim conflicts, lifecycles, rewards."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .demand import (STREAM_ORDERS, STREAM_PERMUTATION, STREAM_PLACEMENT, STREAM_POIS,
                     DemandMode, DemandModel, generate_orders, slot_rng)
from .grid import GridMap, Order, Phase, PoI, VehicleState
from .sensing import (PoiModel, RankModel, TaskSpec, data_utility, default_tasks,
                      finetune_duration, generate_pois)


class ConfigError(ValueError):
    pass


class IllegalActionError(ValueError):
    pass


class ActionKind(IntEnum):
    MOVE = 0
    ACCEPT = 1
    COLLECT = 2


@dataclass(frozen=True)
class EnvConfig:
    grid: GridMap
    n_vehicles: int
    horizon: int
    alpha: float
    beta: float
    demand: DemandModel
    pois: PoiModel
    tasks: tuple = field(default_factory=lambda: tuple(default_tasks()))
    rank_model: RankModel = field(default_factory=RankModel)
    rank: int = 3
    expiry_slots: int = 15
    collect_rate: int = 1
    tau_base: int = 2
    utility_instant: str = "decision"
    # feature normalisation bounds; 0 means "derive from the demand model"
    price_norm: float = 0.0
    count_norm: float = 5.0
    seed: int = 0

    def validate(self) -> "EnvConfig":
        if self.n_vehicles < 1:
            raise ConfigError("n_vehicles must be >= 1")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.alpha < 0 or self.beta < 0 or (self.alpha == 0 and self.beta == 0):
            raise ConfigError("alpha and beta must be non-negative and not both zero")
        if self.collect_rate < 1 or self.tau_base < 1 or self.expiry_slots < 1:
            raise ConfigError("collect_rate, tau_base and expiry_slots must be >= 1")
        if self.utility_instant not in ("decision", "completion"):
            raise ConfigError("utility_instant must be 'decision' or 'completion'")
        if len(self.tasks) != self.pois.n_tasks:
            raise ConfigError(f"{len(self.tasks)} task specs but PoI model has {self.pois.n_tasks} rate rows")
        if any(len(row) != self.grid.size for row in self.pois.rate):
            raise ConfigError("PoI rate rows must have one entry per grid")
        if self.demand.mode is DemandMode.SYNTHETIC and len(self.demand.rate) != self.grid.size:
            raise ConfigError("order rate must have one entry per grid")
        for i, task in enumerate(self.tasks):
            if task.k != i:
                raise ConfigError("task specs must be indexed 0..K-1 in order")
        try:
            self.rank_model.lookup(self.rank)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def n_actions(self) -> int:
        return self.grid.n_directions + 3

    @property
    def max_travel(self) -> int:
        return max(1, self.grid.rows + self.grid.cols - 2)

    @property
    def price_bound(self) -> float:
        if self.price_norm > 0:
            return self.price_norm
        return max(1e-9, self.demand.price_base + self.demand.price_per_step * self.max_travel)


def action_layout(grid: GridMap) -> dict:
    d = grid.n_directions
    return {"stay": 0, "moves": list(range(1, d + 1)), "accept": d + 1, "collect": d + 2}


def action_kind(config: EnvConfig, a: int) -> ActionKind:
    d = config.grid.n_directions
    if a == d + 1:
        return ActionKind.ACCEPT
    if a == d + 2:
        return ActionKind.COLLECT
    return ActionKind.MOVE


@dataclass
class StepOutcome:
    rewards: np.ndarray
    available: np.ndarray
    adi: float
    adu: float
    qos: float
    aoi_samples: list
    conflicts: int
    done: bool


@dataclass
class Metrics:
    slot_count: int
    adi: float
    adu: float
    qos: float
    avg_aoi: Optional[float]
    orders_served: int
    orders_expired: int
    pois_collected: int
    pois_expired: int
    conflicts: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class Snapshot:
    """Read-only view of the world at the start of a slot."""
    config: EnvConfig
    t: int
    vehicle_grid: tuple
    vehicle_phase: tuple
    orders: tuple
    pois: tuple
    rank: int

    @property
    def available(self) -> tuple:
        return tuple(p is Phase.AVAILABLE for p in self.vehicle_phase)


class FleetEnv:
    """Joint order-serving / data-collection fleet over a grid city.

    Agents act in the slot they are available; busy agents are skipped. The
    action vector layout is ``[stay, move per direction..., accept, collect]``.
    """

    def __init__(self, config: EnvConfig, record_events: bool = False):
        self.config = config.validate()
        self.record_events = record_events
        self.rank = config.rank
        self.reset(config.seed)

    # ------------------------------------------------------------------ setup
    def set_rank(self, eta: int) -> None:
        self.config.rank_model.lookup(eta)
        self.rank = int(eta)

    def reset(self, seed: Optional[int] = None) -> Snapshot:
        cfg = self.config
        self.seed = cfg.seed if seed is None else int(seed)
        M = cfg.n_vehicles
        rng = slot_rng(self.seed, 0, STREAM_PLACEMENT)
        self.t = 0
        self.veh_grid = rng.integers(cfg.grid.size, size=M).astype(int).tolist()
        self.busy_until = [0] * M
        self.phase = [Phase.AVAILABLE] * M
        self.release_grid: list = [None] * M
        self.orders: list[Order] = []
        self.pois: list[PoI] = []
        self._next_order = 0
        self._next_poi = 0
        self.adi = 0.0
        self.adu = 0.0
        self.aoi_samples: list[int] = []
        self.orders_served = self.orders_expired = 0
        self.pois_collected = self.pois_expired = 0
        self.conflicts = 0
        self.events: list[dict] = []
        return self.snapshot()

    @property
    def done(self) -> bool:
        return self.t >= self.config.horizon

    def snapshot(self) -> Snapshot:
        return Snapshot(self.config, self.t, tuple(self.veh_grid), tuple(self.phase),
                        tuple(self.orders), tuple(self.pois), self.rank)

    def vehicles(self) -> list[VehicleState]:
        return [VehicleState(m, self.veh_grid[m], self.phase[m], self.busy_until[m],
                             self.release_grid[m]) for m in range(self.config.n_vehicles)]

    def available_agents(self) -> list[int]:
        return [m for m in range(self.config.n_vehicles) if self.phase[m] is Phase.AVAILABLE]

    def available_mask(self) -> np.ndarray:
        return np.array([p is Phase.AVAILABLE for p in self.phase], dtype=bool)

    # ---------------------------------------------------------------- queries
    def orders_in(self, g: int) -> list[Order]:
        return [o for o in self.orders if o.origin == g]

    def pois_in(self, g: int) -> list[PoI]:
        return [p for p in self.pois if p.grid == g]

    def utility_now(self, p: PoI) -> float:
        return data_utility(self.config.tasks[p.task], p.volume, p.aoi(self.t), self.rank,
                            self.config.rank_model)

    def legal_actions(self, m: int) -> np.ndarray:
        if self.phase[m] is not Phase.AVAILABLE:
            raise IllegalActionError(f"agent {m} is busy until slot {self.busy_until[m]}")
        return self._mask_for(self.veh_grid[m], self._grid_occupancy())

    def legal_masks(self) -> dict:
        occ = self._grid_occupancy()
        return {m: self._mask_for(self.veh_grid[m], occ) for m in self.available_agents()}

    def _grid_occupancy(self):
        G = self.config.grid.size
        has_order = [False] * G
        has_poi = [False] * G
        for o in self.orders:
            has_order[o.origin] = True
        for p in self.pois:
            has_poi[p.grid] = True
        return has_order, has_poi

    def _mask_for(self, g: int, occ) -> np.ndarray:
        has_order, has_poi = occ
        targets = self.config.grid.direction_targets(g)
        mask = np.zeros(self.config.n_actions, dtype=bool)
        mask[0] = True
        for i, tg in enumerate(targets):
            mask[1 + i] = tg is not None
        mask[-2] = has_order[g]
        mask[-1] = has_poi[g]
        return mask

    # ------------------------------------------------------------------- step
    def _log(self, type_: str, **payload) -> None:
        if self.record_events:
            self.events.append({"slot": self.t, "type": type_, "payload": payload})

    def step(self, actions: Mapping[int, int]) -> StepOutcome:
        cfg = self.config
        if self.done:
            raise IllegalActionError("episode is over; call reset()")
        avail = self.available_agents()
        if len(actions) != len(avail) or set(actions) != set(avail):
            raise IllegalActionError(
                f"expected actions for agents {avail}, got {sorted(actions)}")
        occ = self._grid_occupancy()
        for m in avail:
            a = int(actions[m])
            mask = self._mask_for(self.veh_grid[m], occ)
            if not 0 <= a < len(mask) or not mask[a]:
                raise IllegalActionError(f"agent {m}: action {a} is not legal")

        t = self.t
        M = cfg.n_vehicles
        D = cfg.grid.n_directions
        rewards = np.zeros(M)
        available = np.zeros(M, dtype=bool)
        available[avail] = True
        new_grid = list(self.veh_grid)
        step_aoi: list[int] = []
        step_conflicts = 0
        perm = slot_rng(self.seed, t, STREAM_PERMUTATION).permutation(len(avail))

        for idx in perm:
            m = avail[idx]
            a = int(actions[m])
            g = self.veh_grid[m]
            if a == D + 1:
                cands = [o for o in self.orders if o.origin == g]
                if not cands:
                    step_conflicts += 1
                    self._log("conflict", agent=m, kind="accept", grid=g)
                    self._log("move", agent=m, src=g, dst=g)
                    continue
                o = min(cands, key=lambda o: (-o.price, o.id))
                self.orders.remove(o)
                self.busy_until[m] = t + o.travel_time
                self.phase[m] = Phase.SERVING
                self.release_grid[m] = o.destination
                rewards[m] = cfg.alpha * o.price
                self.adi += o.price
                self.orders_served += 1
                self._log("order_served", agent=m, order=o.id, grid=g, price=o.price,
                          created_at=o.created_at, busy_until=self.busy_until[m],
                          destination=o.destination)
            elif a == D + 2:
                cands = [p for p in self.pois if p.grid == g]
                if not cands:
                    step_conflicts += 1
                    self._log("conflict", agent=m, kind="collect", grid=g)
                    self._log("move", agent=m, src=g, dst=g)
                    continue
                p = min(cands, key=lambda p: (-self.utility_now(p), p.id))
                self.pois.remove(p)
                aoi = p.aoi(t)
                duration = (math.ceil(p.volume / cfg.collect_rate)
                            + finetune_duration(cfg.tau_base, self.rank, cfg.rank_model))
                aoi_eval = aoi if cfg.utility_instant == "decision" else aoi + duration
                u = data_utility(cfg.tasks[p.task], p.volume, aoi_eval, self.rank, cfg.rank_model)
                self.busy_until[m] = t + duration
                self.phase[m] = Phase.COLLECTING
                self.release_grid[m] = g
                rewards[m] = cfg.beta * u
                self.adu += u
                self.pois_collected += 1
                step_aoi.append(aoi)
                self._log("poi_collected", agent=m, poi=p.id, grid=g, task=p.task,
                          volume=p.volume, aoi=aoi, utility=u, rank=self.rank,
                          busy_until=self.busy_until[m])
            else:
                dst = g if a == 0 else cfg.grid.direction_targets(g)[a - 1]
                new_grid[m] = dst
                self._log("move", agent=m, src=g, dst=dst)

        self.aoi_samples.extend(step_aoi)
        self.conflicts += step_conflicts
        self.veh_grid = new_grid
        self._advance()
        return StepOutcome(rewards, available, self.adi, self.adu, self.qos, step_aoi,
                           step_conflicts, self.done)

    def _advance(self) -> None:
        cfg = self.config
        nt = self.t + 1
        self.t = nt
        kept = []
        for o in self.orders:
            if o.is_valid(nt):
                kept.append(o)
            else:
                self.orders_expired += 1
                self._log("order_expired", order=o.id, created_at=o.created_at)
        self.orders = kept
        kept = []
        for p in self.pois:
            if p.aoi(nt) < cfg.tasks[p.task].freshness_horizon:
                kept.append(p)
            else:
                self.pois_expired += 1
                self._log("poi_expired", poi=p.id, created_at=p.created_at)
        self.pois = kept
        for m in range(cfg.n_vehicles):
            if self.phase[m] is not Phase.AVAILABLE and self.busy_until[m] <= nt:
                self.phase[m] = Phase.AVAILABLE
                self.veh_grid[m] = self.release_grid[m]
                self.release_grid[m] = None
        if nt < cfg.horizon:
            self._spawn(nt)

    def _spawn(self, t: int) -> None:
        cfg = self.config
        new_orders = generate_orders(cfg.demand, cfg.grid, t, slot_rng(self.seed, t, STREAM_ORDERS),
                                     next_id=self._next_order)
        new_pois = generate_pois(cfg.pois, t, slot_rng(self.seed, t, STREAM_POIS),
                                 next_id=self._next_poi)
        self._next_order += len(new_orders)
        self._next_poi += len(new_pois)
        self.orders.extend(new_orders)
        self.pois.extend(new_pois)
        for o in new_orders:
            self._log("order_new", order=o.id, grid=o.origin, price=o.price,
                      created_at=o.created_at, expiry_slots=o.expiry_slots)
        for p in new_pois:
            self._log("poi_new", poi=p.id, grid=p.grid, task=p.task, volume=p.volume,
                      created_at=p.created_at)

    # --------------------------------------------------------------- metrics
    @property
    def qos(self) -> float:
        return self.config.alpha * self.adi + self.config.beta * self.adu

    def metrics(self) -> Metrics:
        avg = float(np.mean(self.aoi_samples)) if self.aoi_samples else None
        return Metrics(self.t, self.adi, self.adu, self.qos, avg, self.orders_served,
                       self.orders_expired, self.pois_collected, self.pois_expired,
                       self.conflicts)

    def write_events(self, path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            for ev in self.events:
                fh.write(json.dumps(ev, sort_keys=True) + "\n")


def compute_qos(alpha: float, beta: float, adi: float, adu: float) -> float:
    return alpha * adi + beta * adu


def audit_events(events: Sequence[dict], n_vehicles: int, horizon: int) -> list[str]:
    """Replay an event log and list every constraint violation found.

    Checks one action per available agent per slot, no action by busy agents,
    single claims of orders and PoIs, claims only inside an order's validity
    window, and expiry exactly at the end of that window.
    """
    violations = []
    order_window = {}
    served, collected = set(), set()
    busy_until = [0] * n_vehicles
    by_slot: dict[int, list] = {}
    for ev in events:
        by_slot.setdefault(ev["slot"], []).append(ev)
        if ev["type"] == "order_new":
            p = ev["payload"]
            order_window[p["order"]] = (p["created_at"], p["created_at"] + p["expiry_slots"])

    for t in range(horizon):
        free = [busy_until[m] <= t for m in range(n_vehicles)]
        acts = [0] * n_vehicles
        for ev in by_slot.get(t, []):
            kind, p = ev["type"], ev["payload"]
            if kind in ("move", "order_served", "poi_collected"):
                m = p["agent"]
                acts[m] += 1
                if not free[m]:
                    violations.append(f"slot {t}: busy agent {m} acted ({kind})")
            if kind == "order_served":
                oid = p["order"]
                if oid in served:
                    violations.append(f"slot {t}: order {oid} served twice")
                served.add(oid)
                lo, hi = order_window.get(oid, (None, None))
                if lo is None or not lo <= t < hi:
                    violations.append(f"slot {t}: order {oid} served outside its window")
                busy_until[p["agent"]] = p["busy_until"]
            elif kind == "poi_collected":
                pid = p["poi"]
                if pid in collected:
                    violations.append(f"slot {t}: PoI {pid} collected twice")
                collected.add(pid)
                busy_until[p["agent"]] = p["busy_until"]
            elif kind == "order_expired":
                # logged at the first slot the order is no longer valid
                _, hi = order_window[p["order"]]
                if t != hi:
                    violations.append(f"slot {t}: order {p['order']} expired, window ends {hi}")
        for m in range(n_vehicles):
            if free[m] and acts[m] != 1:
                violations.append(f"slot {t}: available agent {m} took {acts[m]} actions")
    return violations
