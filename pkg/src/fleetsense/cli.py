"""Command-line entry point: simulate, train, evaluate, ingest, sweep, report.

Exit codes: 0 success, 2 invalid configuration, 3 missing file, 4 data that
violates its schema (ingest CSV, checkpoint, metrics file).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import config as C
from .baselines import GreedyFtPolicy, GreedyOsPolicy, IqlPolicy, RandomPolicy, UcbPolicy
from .demand import EmptyIngestError, IngestError, MissingColumnError, ingest_csv, write_order_cache
from .env import ConfigError, FleetEnv, Metrics
from .grid import BBox, Connectivity, GridMap
from .mappo import (MappoModel, MappoPolicy, eval_seeds, train, train_seeds,
                    write_diagnostics_csv)
from .nn import load_checkpoint, save_checkpoint
from .nn.checkpoint import CheckpointError
from .ranktuner import make_tuner, write_history_csv
from .runner import run_policy_episode

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_SCHEMA = 0, 2, 3, 4
METRIC_COLUMNS = ("episode", "slot_count", "ADI", "ADU", "QoS", "avg_AoI", "orders_served",
                  "orders_expired", "pois_collected", "pois_expired", "conflicts", "rank", "wall_ms")
SUMMARY_METRICS = ("QoS", "ADI", "ADU", "avg_AoI")
WORKERS_ENV = "FLEETSENSE_WORKERS"


class SchemaError(Exception):
    pass


# ------------------------------------------------------------------ output
def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def metrics_row(episode: int, m: Metrics, rank, wall_ms: Optional[float]) -> list:
    return [episode, m.slot_count, m.adi, m.adu, m.qos, m.avg_aoi, m.orders_served,
            m.orders_expired, m.pois_collected, m.pois_expired, m.conflicts, rank,
            None if wall_ms is None else round(wall_ms, 3)]


def write_metrics_csv(path, rows: list, header: str) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


def read_metrics_csv(path) -> tuple[dict, list]:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        first = fh.readline()
        meta = C.parse_header(first)
        if not meta:
            raise SchemaError(f"{path}: missing fleetsense header line")
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
            raise SchemaError(f"{path}: unexpected columns {reader.fieldnames}")
        rows = list(reader)
    return meta, rows


def _run_dir(cfg: C.ExperimentConfig, kind: str, policy: str, dist: str, seed: int) -> Path:
    d = Path(cfg.output_dir) / kind / f"{policy}-{dist}-s{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _rule_policy(cfg: C.ExperimentConfig, env_cfg):
    if cfg.policy == "random":
        return RandomPolicy()
    if cfg.policy == "greedy_os":
        return GreedyOsPolicy()
    if cfg.policy == "greedy_ft":
        return GreedyFtPolicy()
    if cfg.policy == "mab":
        return UcbPolicy(env_cfg.n_actions, cfg.mab.c)
    raise ConfigError(f"policy {cfg.policy!r} is learned; use 'train' then 'evaluate'")


def _tuner(cfg: C.ExperimentConfig, env_cfg, seed: int):
    if cfg.ranktuner == "off":
        return None
    return make_tuner(cfg.ranktuner, env_cfg.rank_model, env_cfg.rank, seed)


def _play(cfg, env_cfg, policy, seeds, tuner=None, events_path=None) -> list:
    """Episodes over ``seeds``; returns metric rows (rank tuner adjusts between episodes)."""
    env = FleetEnv(env_cfg, record_events=events_path is not None)
    rows = []
    events = [] if events_path is not None else None
    for i, s in enumerate(seeds):
        if tuner is not None:
            env.set_rank(tuner.eta)
        t0 = time.perf_counter()
        sink = [] if events is not None else None
        m = run_policy_episode(env, policy, s, sink)
        wall = (time.perf_counter() - t0) * 1e3 if cfg.record_wall_ms else None
        rows.append(metrics_row(i, m, env.rank, wall))
        if sink is not None:
            events.extend({"episode": i, **ev} for ev in sink)
        if tuner is not None:
            tuner.observe(m.adu)
    if events_path is not None:
        with Path(events_path).open("w", encoding="utf-8") as fh:
            for ev in events:
                fh.write(json.dumps(ev, sort_keys=True) + "\n")
    return rows


def _take(it, n: int) -> list:
    return [next(it) for _ in range(n)]


# -------------------------------------------------------------- commands
def run_simulate(cfg: C.ExperimentConfig, seed: int, dist: Optional[str] = None,
                 kind: str = "simulate") -> Path:
    dist = dist or cfg.env.pois.distribution
    env_cfg = C.build_env_config(cfg, dist, seed)
    policy = _rule_policy(cfg, env_cfg)
    out = _run_dir(cfg, kind, cfg.policy, dist, seed)
    tuner = _tuner(cfg, env_cfg, seed)
    header = C.header_line(cfg, seed, policy=cfg.policy, distribution=dist, phase="simulate")
    rows = _play(cfg, env_cfg, policy, _take(train_seeds(seed), cfg.episodes), tuner,
                 out / "events.jsonl" if cfg.record_events else None)
    write_metrics_csv(out / "metrics.csv", rows, header)
    if tuner is not None:
        write_history_csv(tuner.history, out / "rank_history.csv", header)
    return out


def run_train(cfg: C.ExperimentConfig, seed: int, dist: Optional[str] = None,
              kind: str = "train") -> Path:
    if cfg.policy not in C.LEARNED:
        raise ConfigError(f"train needs policy mappo or iql, got {cfg.policy!r}")
    dist = dist or cfg.env.pois.distribution
    env_cfg = C.build_env_config(cfg, dist, seed)
    out = _run_dir(cfg, kind, cfg.policy, dist, seed)
    tuner = _tuner(cfg, env_cfg, seed)
    header = C.header_line(cfg, seed, policy=cfg.policy, distribution=dist, phase="train")
    meta = {"config_hash": C.config_hash(cfg), "seed": seed, "policy": cfg.policy,
            "distribution": dist}
    if cfg.policy == "mappo":
        tc = dataclasses.replace(cfg.train, episodes=cfg.episodes, seed=seed)
        res = train(env_cfg, tc, tuner)
        rows = [metrics_row(i, m, rank, wall if cfg.record_wall_ms else None)
                for i, _, rank, m, wall in res.episodes]
        res.model.save(out / "model.npz", meta)
        write_diagnostics_csv(res.diagnostics, out / "diagnostics.csv", header)
    else:
        policy = IqlPolicy(env_cfg, cfg.iql, seed)
        rows = _play(cfg, env_cfg, policy, _take(train_seeds(seed), cfg.episodes), tuner)
        save_checkpoint(out / "model.npz", policy.state_dict(), meta)
    write_metrics_csv(out / "train_metrics.csv", rows, header)
    if tuner is not None:
        write_history_csv(tuner.history, out / "rank_history.csv", header)
    return out


def _load_learned(cfg: C.ExperimentConfig, env_cfg, ckpt: Path):
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    arrays, _ = load_checkpoint(ckpt)
    if cfg.policy == "mappo":
        model = MappoModel.create(env_cfg, cfg.train)
        try:
            model.load_state_dict(arrays)
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"{ckpt}: {exc}") from None
        return MappoPolicy(model, greedy=True)
    policy = IqlPolicy(env_cfg, cfg.iql)
    try:
        policy.load_state_dict(arrays)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{ckpt}: {exc}") from None
    policy.training = False
    return policy


def run_evaluate(cfg: C.ExperimentConfig, seed: int, dist: Optional[str] = None,
                 checkpoint: Optional[str] = None, kind: str = "evaluate") -> Path:
    dist = dist or cfg.env.pois.distribution
    env_cfg = C.build_env_config(cfg, dist, seed)
    if cfg.policy in C.LEARNED:
        ckpt = checkpoint or cfg.checkpoint
        if ckpt is None:
            raise ConfigError("evaluate of a learned policy needs a checkpoint")
        policy = _load_learned(cfg, env_cfg, C.resolve(cfg, ckpt))
    else:
        policy = _rule_policy(cfg, env_cfg)
    out = _run_dir(cfg, kind, cfg.policy, dist, seed)
    header = C.header_line(cfg, seed, policy=cfg.policy, distribution=dist, phase="evaluate")
    rows = _play(cfg, env_cfg, policy, eval_seeds(seed, cfg.eval_episodes), None,
                 out / "events.jsonl" if cfg.record_events else None)
    write_metrics_csv(out / "metrics.csv", rows, header)
    return out


def run_ingest(cfg: C.ExperimentConfig, csv_path: Optional[str] = None) -> Path:
    src = csv_path or cfg.ingest.csv
    if not src:
        raise ConfigError("ingest needs a CSV path (ingest.csv or --csv)")
    e = cfg.env
    if e.bbox is None:
        raise ConfigError("ingest needs env.bbox to bin coordinates")
    grid = GridMap(e.rows, e.cols, Connectivity(e.connectivity), BBox(**dataclasses.asdict(e.bbox)))
    res = ingest_csv(C.resolve(cfg, src), grid, cfg.ingest.slot_seconds, e.expiry_slots)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / cfg.ingest.output
    write_order_cache(res.orders, target)
    report = {"config_hash": C.config_hash(cfg), "source": str(src), "kept": len(res.orders),
              "dropped": res.dropped, "start": res.start.isoformat() if res.start else None,
              "slots": (max(o.created_at for o in res.orders) + 1) if res.orders else 0}
    (out_dir / "drop_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return target


def _sweep_job(args) -> str:
    cfg, policy, dist, seed = args
    cfg = dataclasses.replace(cfg, policy=policy)
    if policy in C.LEARNED:
        tr = run_train(cfg, seed, dist, kind="sweep/train")
        run_evaluate(cfg, seed, dist, checkpoint=str((tr / "model.npz").resolve()), kind="sweep")
    else:
        run_simulate(cfg, seed, dist, kind="sweep")
    return f"{policy}-{dist}-s{seed}"


def run_sweep(cfg: C.ExperimentConfig) -> list:
    policies = cfg.sweep.policies or [cfg.policy]
    jobs = [(cfg, p, d, s) for p in policies for d in cfg.sweep.distributions for s in cfg.seeds]
    workers = max(1, int(os.environ.get(WORKERS_ENV, "1") or 1))
    if workers == 1 or len(jobs) == 1:
        return [_sweep_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_sweep_job, jobs))


def run_report(cfg: C.ExperimentConfig, inputs: Optional[list] = None) -> tuple[Path, Path, list]:
    """Aggregate every ``metrics.csv`` under the inputs.

    Each file is one run (policy, distribution, seed); a run contributes the
    mean of its episodes. Runs are then grouped by (policy, distribution).
    """
    roots = [Path(p) for p in (inputs or [cfg.output_dir])]
    files = []
    for r in roots:
        if not r.exists():
            raise FileNotFoundError(f"report input not found: {r}")
        files += [r] if r.is_file() else sorted(r.rglob("metrics.csv"))
    runs = []
    long_rows = []
    for f in files:
        meta, rows = read_metrics_csv(f)
        for k in ("policy", "distribution", "seed"):
            if k not in meta:
                raise SchemaError(f"{f}: header lacks {k}")
        run = {"policy": meta["policy"], "distribution": meta["distribution"], "seed": meta["seed"]}
        for col in SUMMARY_METRICS:
            try:
                vals = [float(r[col]) for r in rows if r[col] != ""]
            except ValueError:
                raise SchemaError(f"{f}: non-numeric {col}") from None
            run[col] = float(np.mean(vals)) if vals else None
            for r in rows:
                if r[col] != "":
                    long_rows.append([run["policy"], run["distribution"], run["seed"],
                                      r["episode"], col, r[col]])
        runs.append(run)
    groups: dict = {}
    for run in runs:
        groups.setdefault((run["policy"], run["distribution"]), []).append(run)
    summary = []
    for (pol, dist), rs in sorted(groups.items()):
        row = {"policy": pol, "distribution": dist, "runs": len(rs)}
        for col in SUMMARY_METRICS:
            vals = [r[col] for r in rs if r[col] is not None]
            row[f"{col}_mean"] = float(np.mean(vals)) if vals else None
            row[f"{col}_std"] = float(np.std(vals)) if vals else None
        summary.append(row)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = C.header_line(cfg, cfg.seeds[0], phase="report")
    spath = out_dir / "summary.csv"
    with spath.open("w", newline="", encoding="utf-8") as fh:
        fh.write(header)
        cols = ["policy", "distribution", "runs"] + [f"{c}_{s}" for c in SUMMARY_METRICS
                                                     for s in ("mean", "std")]
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in summary:
            w.writerow([_fmt(row[c]) for c in cols])
    lpath = out_dir / "long.csv"
    with lpath.open("w", newline="", encoding="utf-8") as fh:
        fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "distribution", "seed", "episode", "metric", "value"])
        w.writerows(long_rows)
    return spath, lpath, summary


def format_summary(summary: list) -> str:
    lines = [f"{'policy':<10} {'distribution':<10} {'runs':>4}  "
             + "  ".join(f"{c:>18}" for c in SUMMARY_METRICS)]
    for row in summary:
        cells = []
        for c in SUMMARY_METRICS:
            mu, sd = row[f"{c}_mean"], row[f"{c}_std"]
            cells.append(f"{'n/a':>18}" if mu is None else f"{mu:>10.2f} ± {sd:<5.2f}")
        lines.append(f"{row['policy']:<10} {row['distribution']:<10} {row['runs']:>4}  "
                     + "  ".join(cells))
    return "\n".join(lines)


# ------------------------------------------------------------------ main
def _common(suppress: bool) -> argparse.ArgumentParser:
    # subcommand copies must not clobber options given before the subcommand
    d = argparse.SUPPRESS if suppress else None
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=d, help="YAML experiment file")
    common.add_argument("--set", dest="overrides", action="append",
                        default=argparse.SUPPRESS if suppress else [],
                        metavar="KEY=VALUE", help="dotted override, e.g. env.alpha=0.5")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common(True)
    p = argparse.ArgumentParser(prog="fleetsense", parents=[_common(False)],
                                description="Fleet crowdsensing simulator and learners.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="run a rule-based or bandit policy")
    sub.add_parser("train", parents=[common], help="train mappo or iql")
    ev = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint")
    ing = sub.add_parser("ingest", parents=[common], help="bin a trip CSV into an order cache")
    ing.add_argument("--csv")
    sub.add_parser("sweep", parents=[common], help="seeds x PoI distributions x policies")
    rep = sub.add_parser("report", parents=[common], help="aggregate metrics CSVs")
    rep.add_argument("inputs", nargs="*")
    return p


def _dispatch(args) -> None:
    cfg = C.load_config(args.config, args.overrides)
    cmd = args.command
    if cmd == "simulate":
        for s in cfg.seeds:
            print(run_simulate(cfg, s) / "metrics.csv")
    elif cmd == "train":
        for s in cfg.seeds:
            print(run_train(cfg, s) / "model.npz")
    elif cmd == "evaluate":
        for s in cfg.seeds:
            print(run_evaluate(cfg, s, checkpoint=args.checkpoint) / "metrics.csv")
    elif cmd == "ingest":
        print(run_ingest(cfg, args.csv))
    elif cmd == "sweep":
        for name in run_sweep(cfg):
            print(name)
    elif cmd == "report":
        spath, lpath, summary = run_report(cfg, args.inputs or None)
        print(format_summary(summary))
        print(spath)
        print(lpath)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _dispatch(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (IngestError, MissingColumnError, EmptyIngestError, CheckpointError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
