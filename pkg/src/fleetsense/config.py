"""Experiment configuration: YAML schema, dotted overrides, hashing.

Every section is a dataclass; loading walks the YAML tree and rejects any key
the dataclass does not declare. See ``configs/desk.yaml`` for a full example.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .baselines import IqlConfig
from .demand import DemandModel, read_order_cache
from .env import ConfigError, EnvConfig
from .grid import BBox, Connectivity, GridMap
from .mappo import TrainConfig
from .sensing import DEFAULT_RANK_TABLE, DistributionTag, PoiModel, RankModel, TaskSpec

POLICIES = ("random", "greedy_os", "greedy_ft", "mab", "iql", "mappo")
LEARNED = ("iql", "mappo")
TUNERS = ("off", "ranktuner", "greedy", "thompson")


@dataclass
class BBoxSpec:
    min_lat: float
    max_lat: float
    min_lon: float
    max_lon: float


@dataclass
class DemandSpec:
    mode: str = "Synthetic"
    total_rate: float = 1.0
    price_base: float = 2.0
    price_per_step: float = 1.0
    order_cache: Optional[str] = None


@dataclass
class PoiSpec:
    distribution: str = "Divergent"
    total_rate: float = 1.0
    volume_min: int = 3
    volume_max: int = 12


@dataclass
class TaskSpecCfg:
    ceiling: float
    freshness_horizon: int
    decay_exponent: float = 1.0
    volume_ref: int = 12


@dataclass
class RankRow:
    rank: int
    time_factor: float
    accuracy_factor: float


def _default_tasks() -> list:
    return [TaskSpecCfg(0.70, 40, 2.0, 12), TaskSpecCfg(0.75, 30, 1.0, 12)]


def _default_ranks() -> list:
    return [RankRow(r, tf, af) for r, tf, af in DEFAULT_RANK_TABLE]


@dataclass
class EnvSpec:
    rows: int = 4
    cols: int = 4
    connectivity: str = "VonNeumann4"
    bbox: Optional[BBoxSpec] = None
    n_vehicles: int = 10
    horizon: int = 200
    alpha: float = 1.0
    beta: float = 30.0
    expiry_slots: int = 15
    collect_rate: int = 1
    tau_base: int = 2
    rank: int = 3
    utility_instant: str = "decision"
    count_norm: float = 5.0
    price_norm: float = 0.0
    demand: DemandSpec = field(default_factory=DemandSpec)
    pois: PoiSpec = field(default_factory=PoiSpec)
    tasks: list = field(default_factory=_default_tasks)
    rank_table: list = field(default_factory=_default_ranks)


@dataclass
class MabSpec:
    c: float = 2.0


@dataclass
class IngestSpec:
    csv: Optional[str] = None
    slot_seconds: int = 60
    output: str = "orders.jsonl"


@dataclass
class SweepSpec:
    distributions: list = field(default_factory=lambda: ["Divergent", "Aligned", "Uniform"])
    policies: list = field(default_factory=list)


@dataclass
class ExperimentConfig:
    env: EnvSpec = field(default_factory=EnvSpec)
    policy: str = "random"
    ranktuner: str = "off"
    train: TrainConfig = field(default_factory=TrainConfig)
    iql: IqlConfig = field(default_factory=IqlConfig)
    mab: MabSpec = field(default_factory=MabSpec)
    episodes: int = 10
    eval_episodes: int = 20
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "out"
    checkpoint: Optional[str] = None
    record_events: bool = False
    record_wall_ms: bool = False
    ingest: IngestSpec = field(default_factory=IngestSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    # directory relative input paths are resolved against (the config file's)
    base_dir: str = field(default=".", metadata={"internal": True})


# --------------------------------------------------------------- parsing
_NESTED = {
    (ExperimentConfig, "env"): EnvSpec,
    (ExperimentConfig, "train"): TrainConfig,
    (ExperimentConfig, "iql"): IqlConfig,
    (ExperimentConfig, "mab"): MabSpec,
    (ExperimentConfig, "ingest"): IngestSpec,
    (ExperimentConfig, "sweep"): SweepSpec,
    (EnvSpec, "bbox"): BBoxSpec,
    (EnvSpec, "demand"): DemandSpec,
    (EnvSpec, "pois"): PoiSpec,
}
_LISTS = {(EnvSpec, "tasks"): TaskSpecCfg, (EnvSpec, "rank_table"): RankRow}


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls) if not f.metadata.get("internal")}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(where + k for k in unknown)}")
    kw = {}
    for name, value in data.items():
        key = (cls, name)
        if key in _NESTED and value is not None:
            kw[name] = _build(_NESTED[key], value, f"{where}{name}.")
        elif key in _LISTS:
            if not isinstance(value, list):
                raise ConfigError(f"{where}{name}: expected a list")
            kw[name] = [_build(_LISTS[key], v, f"{where}{name}[{i}].") for i, v in enumerate(value)]
        else:
            kw[name] = value
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        if f.metadata.get("internal"):
            continue
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            v = to_dict(v)
        elif isinstance(v, list):
            v = [to_dict(x) if dataclasses.is_dataclass(x) else x for x in v]
        out[f.name] = v
    return out


def apply_override(data: dict, assignment: str) -> None:
    """Apply one ``dotted.key=value`` override; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"bad override key {key!r}")
    node = data
    for p in parts[:-1]:
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} walks into a non-mapping")
        node = node.setdefault(p, {})
        if node is None:
            raise ConfigError(f"override {key!r} walks into an empty section")
    try:
        node[parts[-1]] = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {key!r}: {exc}") from None


def load_config(path=None, overrides=()) -> ExperimentConfig:
    data: dict = {}
    base = Path(".")
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        base = path.parent
    data = copy.deepcopy(data)
    for o in overrides:
        apply_override(data, o)
    cfg = _build(ExperimentConfig, data, "")
    cfg.base_dir = str(base)
    return validate(cfg)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.policy not in POLICIES:
        raise ConfigError(f"policy must be one of {POLICIES}, got {cfg.policy!r}")
    if cfg.ranktuner not in TUNERS:
        raise ConfigError(f"ranktuner must be one of {TUNERS}, got {cfg.ranktuner!r}")
    if not isinstance(cfg.seeds, list) or not cfg.seeds or not all(isinstance(s, int) for s in cfg.seeds):
        raise ConfigError("seeds must be a non-empty list of integers")
    if not isinstance(cfg.episodes, int) or cfg.episodes < 1:
        raise ConfigError("episodes must be a positive integer")
    if not isinstance(cfg.eval_episodes, int) or cfg.eval_episodes < 1:
        raise ConfigError("eval_episodes must be a positive integer")
    try:
        DistributionTag(cfg.env.pois.distribution)
        Connectivity(cfg.env.connectivity)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for d in cfg.sweep.distributions:
        try:
            DistributionTag(d)
        except ValueError:
            raise ConfigError(f"sweep.distributions: unknown tag {d!r}") from None
    for p in cfg.sweep.policies:
        if p not in POLICIES:
            raise ConfigError(f"sweep.policies: unknown policy {p!r}")
    if cfg.env.demand.mode not in ("Synthetic", "CsvReplay"):
        raise ConfigError("env.demand.mode must be Synthetic or CsvReplay")
    if cfg.env.demand.mode == "CsvReplay":
        if not cfg.env.demand.order_cache:
            raise ConfigError("CsvReplay demand needs env.demand.order_cache")
        if not resolve(cfg, cfg.env.demand.order_cache).is_file():
            raise FileNotFoundError(f"order cache not found: {cfg.env.demand.order_cache}")
    try:
        cfg.train.validate()
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None
    build_env_config(cfg).validate()
    return cfg


def resolve(cfg: ExperimentConfig, p: str) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(cfg.base_dir) / p


def build_env_config(cfg: ExperimentConfig, distribution: Optional[str] = None,
                     seed: int = 0) -> EnvConfig:
    e = cfg.env
    try:
        bbox = BBox(**dataclasses.asdict(e.bbox)) if e.bbox is not None else None
        grid = GridMap(e.rows, e.cols, Connectivity(e.connectivity), bbox)
        tasks = tuple(TaskSpec(i, t.ceiling, t.freshness_horizon, t.decay_exponent, t.volume_ref)
                      for i, t in enumerate(e.tasks))
        rank_model = RankModel.from_rows([dataclasses.asdict(r) for r in e.rank_table])
        if e.demand.mode == "CsvReplay":
            demand = DemandModel.from_orders(read_order_cache(resolve(cfg, e.demand.order_cache)), seed=seed)
        else:
            demand = DemandModel.synthetic(grid, e.demand.total_rate, seed=seed,
                                           price_base=e.demand.price_base,
                                           price_per_step=e.demand.price_per_step,
                                           expiry_slots=e.expiry_slots)
        pois = PoiModel.from_tag(grid, DistributionTag(distribution or e.pois.distribution),
                                 e.pois.total_rate, len(tasks), seed=seed,
                                 volume_min=e.pois.volume_min, volume_max=e.pois.volume_max)
        env = EnvConfig(grid, e.n_vehicles, e.horizon, float(e.alpha), float(e.beta), demand, pois,
                        tasks, rank_model, e.rank, e.expiry_slots, e.collect_rate, e.tau_base,
                        e.utility_instant, e.price_norm, e.count_norm, seed)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"env: {exc}") from None
    return env.validate()


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def header_line(cfg: ExperimentConfig, seed: int, **extra) -> str:
    parts = [f"config_hash={config_hash(cfg)}", f"seed={seed}"]
    parts += [f"{k}={v}" for k, v in extra.items()]
    return "# fleetsense " + " ".join(parts) + "\n"


def parse_header(line: str) -> dict:
    if not line.startswith("# fleetsense "):
        return {}
    out = {}
    for tok in line[len("# fleetsense "):].split():
        k, _, v = tok.partition("=")
        out[k] = v
    return out
