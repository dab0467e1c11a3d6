"""Acceptance criteria 1-11, one test each.

Every test appends a one-line verdict that ``conftest.py`` prints in the
terminal summary. The learning checks (6 and 10) share one session fixture
that trains on both PoI layouts; they dominate the runtime.
"""

import math
import subprocess
import sys
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from conftest import ACCEPTANCE_LINES
from fleetsense import config as C
from fleetsense.baselines import (GreedyFtPolicy, GreedyOsPolicy, IqlConfig, IqlPolicy,
                                  RandomPolicy, UcbPolicy)
from fleetsense.env import FleetEnv, audit_events
from fleetsense.graph import NODE_TYPES, RELATIONS, TopologyGraph, build_graph, rgcn_forward
from fleetsense.mappo import (MappoModel, MappoPolicy, PpoBatch, TrainConfig, collect_rollout,
                              compute_gae, eval_seeds, evaluate, normalize_advantages, ppo_loss,
                              train)
from fleetsense.nn import grad_check, no_grad
from fleetsense.ranktuner import RankTuner
from fleetsense.runner import run_policy_episode
from fleetsense.sensing import (RankModel, TaskSpec, data_utility, freshness_factor, rank_lookup,
                                volume_factor)

ROOT = Path(__file__).resolve().parents[1]
DESK = ROOT / "configs" / "desk.yaml"
LEARNING = ROOT / "configs" / "learning.yaml"


def verdict(n: int, title: str, ok: bool, detail: str, report_only: bool = False) -> None:
    tag = "PASS" if ok else ("FAIL (report-only)" if report_only else "FAIL")
    ACCEPTANCE_LINES.append(f"criterion {n}: {tag} [{title}] {detail}")
    if not report_only:
        assert ok, detail


def desk_env(distribution="Divergent", overrides=(), seed=0):
    cfg = C.load_config(DESK, list(overrides))
    return C.build_env_config(cfg, distribution, seed)


# ---------------------------------------------------------------- 1
def test_c01_qos_identity():
    cfg = desk_env()
    env = FleetEnv(cfg)
    small = TrainConfig(rgcn_hidden=16, embed_dim=10, mlp_hidden=16)
    policies = [RandomPolicy(), GreedyOsPolicy(), GreedyFtPolicy(), UcbPolicy(cfg.n_actions),
                IqlPolicy(cfg, IqlConfig(warmup=100), seed=0),
                MappoPolicy(MappoModel.create(cfg, small), greedy=True)]
    worst, runs = 0.0, 0
    for pol in policies:
        for s in range(3):
            m = run_policy_episode(env, pol, s)
            want = cfg.alpha * m.adi + cfg.beta * m.adu
            worst = max(worst, abs(m.qos - want) / max(1e-12, abs(want)))
            runs += 1
    verdict(1, "QoS identity", worst <= 1e-9, f"{runs} runs, max rel err {worst:.2e}")


# ---------------------------------------------------------------- 2
def test_c02_constraint_audit():
    cfg = desk_env(overrides=["env.n_vehicles=20"])
    env = FleetEnv(cfg, record_events=True)
    m = run_policy_episode(env, RandomPolicy(), 2024)
    bad = audit_events(env.events, cfg.n_vehicles, cfg.horizon)
    ok = not bad and m.slot_count == 200 and m.orders_served > 0 and m.orders_expired > 0
    verdict(2, "constraint audit", ok,
            f"{len(env.events)} events, {len(bad)} violations, served {m.orders_served}, "
            f"expired {m.orders_expired}")


# ---------------------------------------------------------------- 3
# transcribed by hand from the reference rank table: (rank, time factor, accuracy factor)
REFERENCE_RANKS = [(1, 1.00, 0.70), (2, 1.45, 0.76), (3, 3.71, 0.98),
                   (4, 5.05, 0.99), (5, 6.00, 0.99365), (6, 5.31, 1.00)]


def test_c03_rank_table():
    model = desk_env().rank_model
    got = [(r, *rank_lookup(model, r)) for r in range(1, 7)]
    verdict(3, "rank table", got == REFERENCE_RANKS, f"rank 3 -> {rank_lookup(model, 3)}")


# ---------------------------------------------------------------- 4
TUNER_SEEDS = (0, 1, 2, 3)


def _stationary_adu(env, eta):
    # a stationary landscape: every evaluation replays the same four episodes
    env.set_rank(eta)
    return float(np.mean([run_policy_episode(env, GreedyFtPolicy(), s).adu for s in TUNER_SEEDS]))


def test_c04_ranktuner_oracle():
    cfg = desk_env()
    env = FleetEnv(cfg)
    landscape = {eta: _stationary_adu(env, eta) for eta in range(1, 7)}
    eta_star = max(landscape, key=landscape.get)
    tuner = RankTuner(cfg.rank_model, eta0=1)
    for _ in range(120):
        tuner.observe(_stationary_adu(env, tuner.eta))
    last = [eta for _, eta, _ in tuner.history[-50:]]
    modal = Counter(last).most_common(1)[0][0]
    ok = abs(modal - eta_star) <= 1
    shape = ", ".join(f"{k}:{v:.2f}" for k, v in landscape.items())
    verdict(4, "RankTuner oracle", ok,
            f"oracle eta*={eta_star} (ADU {shape}); tuner modal={modal}; "
            f"rank-3 claim {'reproduced' if eta_star == 3 else 'not reproduced'}")


# ---------------------------------------------------------------- 5
def test_c05_baseline_ordering():
    cfg = desk_env("Divergent")
    env = FleetEnv(cfg)
    seeds = range(100, 110)
    os_ = [run_policy_episode(env, GreedyOsPolicy(), s) for s in seeds]
    ft = [run_policy_episode(env, GreedyFtPolicy(), s) for s in seeds]
    adi_os, adi_ft = [m.adi for m in os_], [m.adi for m in ft]
    adu_os, adu_ft = [m.adu for m in os_], [m.adu for m in ft]
    p_adi = stats.ttest_ind(adi_os, adi_ft, equal_var=False, alternative="greater").pvalue
    p_adu = stats.ttest_ind(adu_ft, adu_os, equal_var=False, alternative="greater").pvalue
    ok = p_adi < 0.05 and p_adu < 0.05
    verdict(5, "baseline ordering", ok,
            f"ADI os {np.mean(adi_os):.1f} vs ft {np.mean(adi_ft):.1f} (p={p_adi:.1e}); "
            f"ADU ft {np.mean(adu_ft):.2f} vs os {np.mean(adu_os):.2f} (p={p_adu:.1e})")


# ------------------------------------------------------------ 6 and 10
@pytest.fixture(scope="session")
def learning_runs():
    """Train one policy per (seed, PoI layout) and evaluate it next to the rule baselines."""
    cfg = C.load_config(LEARNING)
    out = {}
    for dist in ("Divergent", "Aligned"):
        for seed in cfg.seeds:
            env_cfg = C.build_env_config(cfg, dist, seed)
            tc = TrainConfig(**{**cfg.train.__dict__, "episodes": cfg.episodes, "seed": seed})
            res = train(env_cfg, tc)
            mappo = evaluate(env_cfg, res.model, cfg.eval_episodes, seed=seed).qos[0]
            env = FleetEnv(env_cfg)
            # sampled actions on the same seeds; reported only, never part of a verdict
            sampled = float(np.mean([run_policy_episode(env, MappoPolicy(res.model, greedy=False), s).qos
                                     for s in eval_seeds(seed, cfg.eval_episodes)]))
            base = {}
            for pol in (RandomPolicy(), GreedyOsPolicy(), GreedyFtPolicy()):
                base[pol.name] = float(np.mean(
                    [run_policy_episode(env, pol, s).qos for s in eval_seeds(seed, cfg.eval_episodes)]))
            out[dist, seed] = {"mappo": mappo, "sampled": sampled, **base}
    return cfg, out


@pytest.mark.slow
def test_c06_learning_check(learning_runs):
    cfg, runs = learning_runs
    wins, parts = 0, []
    for seed in cfg.seeds:
        r = runs["Divergent", seed]
        ok = r["mappo"] >= 1.15 * r["random"] and r["mappo"] >= max(r["greedy_os"], r["greedy_ft"])
        wins += ok
        parts.append(f"s{seed}: {r['mappo']:.0f} (sampled {r['sampled']:.0f}) vs rnd "
                     f"{r['random']:.0f} os {r['greedy_os']:.0f} ft {r['greedy_ft']:.0f}")
    verdict(6, "learning check", wins >= 3,
            f"{wins}/{len(cfg.seeds)} seeds pass after {cfg.episodes} episodes; " + "; ".join(parts))


@pytest.mark.slow
def test_c10_distribution_robustness(learning_runs):
    cfg, runs = learning_runs
    al = np.array([runs["Aligned", s]["mappo"] for s in cfg.seeds])
    dv = np.array([runs["Divergent", s]["mappo"] for s in cfg.seeds])
    k = int(np.sum(al >= dv))
    p = stats.binomtest(k, len(al), 0.5, alternative="greater").pvalue
    ok = al.mean() >= dv.mean() and p < 0.05
    verdict(10, "distribution robustness", ok,
            f"Aligned {al.mean():.1f} vs Divergent {dv.mean():.1f}; Aligned ahead on {k}/{len(al)} "
            f"seeds (sign test p={p:.3f})", report_only=True)


# ---------------------------------------------------------------- 7
def test_c07_gradient_oracle():
    from conftest import make_config
    cfg = make_config(rows=2, cols=2, n_vehicles=2, horizon=40, order_rate=1.5, poi_rate=1.5)
    tc = TrainConfig(rgcn_hidden=2, embed_dim=2, mlp_hidden=4, value_coef=0.0, entropy_coef=0.0)
    model = MappoModel.create(cfg, tc, seed=5)
    env = FleetEnv(cfg)
    env.reset(3)
    buf = collect_rollout(env, model, 12)
    adv, ret = compute_gae(buf, tc.gamma, tc.gae_lambda)
    batch = PpoBatch.from_buffer(buf, normalize_advantages(adv, buf.available), ret)
    # move away from the behaviour policy so ratios differ from one, staying inside the clip range
    rng = np.random.default_rng(0)
    for p in model.params.values():
        p.data += 0.02 * rng.standard_normal(p.data.shape)
    n = model.n_params()
    loss = lambda params: ppo_loss(model, batch, tc)[0]  # noqa: E731
    err = grad_check(loss, model.params, h=1e-5)
    _, diag = ppo_loss(model, batch, tc)
    ok = n <= 500 and err <= 1e-4 and batch.rows.size > 0
    verdict(7, "gradient oracle", ok,
            f"{n} params, {batch.rows.size} action records, mean ratio {diag['mean_ratio']:.4f}, "
            f"max rel err {err:.2e}")


# ---------------------------------------------------------------- 8
def _relabel(graph, perms):
    feats = {}
    for t, x in graph.features.items():
        out = np.empty_like(x)
        out[perms[t]] = x
        feats[t] = out
    types = {r: (s, d) for r, s, d in RELATIONS}
    edges = {r: (perms[types[r][0]][s], perms[types[r][1]][d]) for r, (s, d) in graph.edges.items()}
    return TopologyGraph(feats, edges)


def test_c08_rgcn_equivariance():
    cfg = desk_env(overrides=["env.demand.total_rate=3.0", "env.pois.total_rate=2.0"])
    model = MappoModel.create(cfg, TrainConfig())
    env = FleetEnv(cfg)
    rng = np.random.default_rng(8)
    worst = 0.0
    for trial in range(100):
        if trial % 10 == 0:
            env.reset(trial)
        env.step({m: int(rng.choice(np.flatnonzero(mk))) for m, mk in env.legal_masks().items()})
        gr = build_graph(env.snapshot())
        perms = {t: rng.permutation(gr.count(t)) for t in NODE_TYPES}
        with no_grad():
            a = rgcn_forward(gr, model.rgcn).data
            b = rgcn_forward(_relabel(gr, perms), model.rgcn).data
        worst = max(worst, float(np.max(np.abs(b[perms["vehicle"]] - a))))
    verdict(8, "R-GCN equivariance", worst <= 1e-9, f"100 trials, max abs diff {worst:.2e}")


# ---------------------------------------------------------------- 9
def test_c09_utility_monotonicity():
    model = RankModel()
    rng = np.random.default_rng(9)
    task = TaskSpec(0, 0.8, 40, 1.5, 12)
    bad = 0
    for _ in range(10_000):
        d = float(rng.uniform(0, 30))
        lam = float(rng.uniform(0, 50))
        eta = int(rng.integers(1, 7))
        u = data_utility(task, d, lam, eta, model)
        bad += not (0.0 <= u <= task.ceiling)
        bad += data_utility(task, d, lam + rng.uniform(0, 10), eta, model) > u
        bad += data_utility(task, d + rng.uniform(0, 10), lam, eta, model) < u
    exact = freshness_factor(task, 0) == 1.0 and volume_factor(task, task.volume_ref) == 1.0
    verdict(9, "utility monotonicity", bad == 0 and exact,
            f"10000 triples, {bad} violations, F(0)=1 and V(d_ref)=1 exact: {exact}")


# ---------------------------------------------------------------- 11
def test_c11_reproducibility(tmp_path):
    outs = []
    out = tmp_path / "out"
    for _ in range(2):
        cmd = [sys.executable, "-m", "fleetsense.cli", "simulate", "--config", str(DESK),
               "--set", "policy=mab", "--set", "episodes=3", "--set", "seeds=[11]",
               "--set", f"output_dir={out}"]
        proc = subprocess.run(cmd, capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        path = out / "simulate" / "mab-Divergent-s11" / "metrics.csv"
        outs.append(path.read_bytes())
        path.unlink()
    same = outs[0] == outs[1]
    verdict(11, "reproducibility", same and len(outs[0]) > 0,
            f"two invocations, {len(outs[0])} bytes each, identical: {same}")
