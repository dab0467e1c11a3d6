"""Typed topology graph of the city and the relational GCN that embeds it."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .env import EnvConfig, Snapshot
from .grid import PHASES, Phase
from .nn import autodiff as ad
from .nn.autodiff import Tensor
from .nn.mlp import init_linear

NODE_TYPES = ("vehicle", "grid", "order", "poi", "shortcut")

# (relation, source type, destination type); each direction is its own relation
RELATIONS = (
    ("vehicle_grid", "vehicle", "grid"),
    ("grid_vehicle", "grid", "vehicle"),
    ("order_grid", "order", "grid"),
    ("grid_order", "grid", "order"),
    ("poi_grid", "poi", "grid"),
    ("grid_poi", "grid", "poi"),
    ("grid_grid", "grid", "grid"),
    ("shortcut_grid", "shortcut", "grid"),
    ("grid_shortcut", "grid", "shortcut"),
)
_REL_TYPES = {name: (s, d) for name, s, d in RELATIONS}


def feature_dims(config: EnvConfig) -> dict:
    return {
        "vehicle": 6 + config.n_vehicles,
        "grid": 3 + config.grid.size,
        "order": 7,
        "poi": 4 + config.n_tasks,
        "shortcut": 1,
    }


@dataclass
class TopologyGraph:
    features: dict            # node type -> (n, f) array
    edges: dict               # relation -> (src index array, dst index array)
    n_graphs: int = 1
    _ops: dict = field(default_factory=dict, repr=False)

    def count(self, node_type: str) -> int:
        return self.features[node_type].shape[0]

    @property
    def n_nodes(self) -> int:
        return sum(self.count(t) for t in NODE_TYPES)

    @property
    def n_edges(self) -> int:
        return sum(len(src) for src, _ in self.edges.values())

    def degree(self, node_type: str, index: int) -> int:
        """Out-degree over all relations (every link is stored in both directions)."""
        n = 0
        for rel, (src, _) in self.edges.items():
            if _REL_TYPES[rel][0] == node_type:
                n += int(np.sum(src == index))
        return n

    def segment_op(self, rel: str):
        """Cached sparse aggregation operator; only batched graphs use one."""
        if self.n_graphs == 1:
            return None
        op = self._ops.get(rel)
        if op is None:
            _, dst = self.edges[rel]
            op = self._ops[rel] = ad.SegmentOp(dst, self.count(_REL_TYPES[rel][1]))
        return op


def _pair(src: list, dst: list) -> tuple:
    return np.asarray(src, dtype=np.intp), np.asarray(dst, dtype=np.intp)


def build_graph(snap: Snapshot, include_shortcut: bool = True) -> TopologyGraph:
    """Topology graph for one slot.

    Features are scaled by configuration bounds (not by the data) so their
    distribution stays stationary across an episode.
    """
    cfg = snap.config
    grid = cfg.grid
    G, M, K = grid.size, cfg.n_vehicles, cfg.n_tasks
    coords = np.array([grid.normalized_coords(g) for g in range(G)]).reshape(G, 2)

    veh = np.zeros((M, 6 + M))
    veh[:, 0:2] = coords[list(snap.vehicle_grid)]
    for m, ph in enumerate(snap.vehicle_phase):
        veh[m, 2 + PHASES.index(ph)] = 1.0
    veh[:, 5] = snap.t / cfg.horizon
    veh[:, 6:] = np.eye(M)

    n_orders = np.zeros(G)
    n_avail = np.zeros(G)
    n_pois = np.zeros(G)
    for o in snap.orders:
        n_orders[o.origin] += 1
    for g, ph in zip(snap.vehicle_grid, snap.vehicle_phase):
        if ph is Phase.AVAILABLE:
            n_avail[g] += 1
    for p in snap.pois:
        n_pois[p.grid] += 1
    grd = np.zeros((G, 3 + G))
    grd[:, 0] = n_orders / cfg.count_norm
    grd[:, 1] = n_avail / cfg.count_norm
    grd[:, 2] = n_pois / cfg.count_norm
    grd[:, 3:] = np.eye(G)

    ords = np.zeros((len(snap.orders), 7))
    for i, o in enumerate(snap.orders):
        ords[i, 0] = o.price / cfg.price_bound
        ords[i, 1] = (snap.t - o.created_at) / o.expiry_slots
        ords[i, 2] = o.travel_time / cfg.max_travel
        ords[i, 3:5] = coords[o.origin]
        ords[i, 5:7] = coords[o.destination]

    pois = np.zeros((len(snap.pois), 4 + K))
    for i, p in enumerate(snap.pois):
        pois[i, 0] = p.volume / cfg.pois.volume_max
        pois[i, 1] = p.aoi(snap.t) / cfg.tasks[p.task].freshness_horizon
        pois[i, 2 + p.task] = 1.0
        pois[i, 2 + K:4 + K] = coords[p.grid]

    adj_src, adj_dst = [], []
    for a, b in grid.adjacent_pairs():
        adj_src += [a, b]
        adj_dst += [b, a]

    veh_grid = list(snap.vehicle_grid)
    ord_grid = [o.origin for o in snap.orders]
    poi_grid = [p.grid for p in snap.pois]
    edges = {
        "vehicle_grid": _pair(range(M), veh_grid),
        "grid_vehicle": _pair(veh_grid, range(M)),
        "order_grid": _pair(range(len(ord_grid)), ord_grid),
        "grid_order": _pair(ord_grid, range(len(ord_grid))),
        "poi_grid": _pair(range(len(poi_grid)), poi_grid),
        "grid_poi": _pair(poi_grid, range(len(poi_grid))),
        "grid_grid": _pair(adj_src, adj_dst),
    }
    if include_shortcut:
        edges["shortcut_grid"] = _pair([0] * G, range(G))
        edges["grid_shortcut"] = _pair(range(G), [0] * G)
        shortcut = np.ones((1, 1))
    else:
        edges["shortcut_grid"] = _pair([], [])
        edges["grid_shortcut"] = _pair([], [])
        shortcut = np.zeros((0, 1))
    feats = {"vehicle": veh, "grid": grd, "order": ords, "poi": pois, "shortcut": shortcut}
    return TopologyGraph(feats, edges)


def batch_graphs(graphs: Sequence[TopologyGraph]) -> TopologyGraph:
    """Disjoint union; node order is graph-major within each type."""
    feats = {t: np.concatenate([g.features[t] for g in graphs], axis=0) for t in NODE_TYPES}
    offsets = {t: np.cumsum([0] + [g.count(t) for g in graphs]) for t in NODE_TYPES}
    edges = {}
    for rel, s, d in RELATIONS:
        srcs = [g.edges[rel][0] + offsets[s][i] for i, g in enumerate(graphs)]
        dsts = [g.edges[rel][1] + offsets[d][i] for i, g in enumerate(graphs)]
        edges[rel] = (np.concatenate(srcs).astype(np.intp), np.concatenate(dsts).astype(np.intp))
    return TopologyGraph(feats, edges, n_graphs=len(graphs))


class RgcnParams:
    """Weights of the R-GCN, stored under ``{prefix}.*`` in a shared dictionary.

    Per node type an input projection lifts raw features to the hidden width;
    then every layer has one self weight and one weight per relation.
    """

    def __init__(self, params: dict, prefix: str, feat_dims: dict, hidden: int = 128,
                 out: int = 10, n_layers: int = 2):
        if n_layers < 1:
            raise ValueError("R-GCN needs at least one layer")
        self.params = params
        self.prefix = prefix
        self.feat_dims = dict(feat_dims)
        self.hidden = hidden
        self.out = out
        self.n_layers = n_layers

    @property
    def widths(self) -> list:
        return [self.hidden] * self.n_layers + [self.out]

    @classmethod
    def create(cls, params: dict, prefix: str, feat_dims: dict, rng: np.random.Generator,
               hidden: int = 128, out: int = 10, n_layers: int = 2) -> "RgcnParams":
        self = cls(params, prefix, feat_dims, hidden, out, n_layers)
        for t in NODE_TYPES:
            params[f"{prefix}.proj.{t}.W"] = Tensor(
                init_linear(rng, feat_dims[t], hidden, 1.0), requires_grad=True)
            params[f"{prefix}.proj.{t}.b"] = Tensor(np.zeros(hidden), requires_grad=True)
        w = self.widths
        for l in range(n_layers):
            # self + mean over up to 5 incoming relations; keep activations O(1)
            gain = np.sqrt(2.0) / np.sqrt(3.0) if l < n_layers - 1 else 1.0 / np.sqrt(3.0)
            params[f"{prefix}.l{l}.self"] = Tensor(init_linear(rng, w[l], w[l + 1], gain),
                                                   requires_grad=True)
            for rel, _, _ in RELATIONS:
                params[f"{prefix}.l{l}.{rel}"] = Tensor(init_linear(rng, w[l], w[l + 1], gain),
                                                        requires_grad=True)
        return self

    def names(self) -> list:
        return [k for k in self.params if k.startswith(self.prefix + ".")]

    def check(self, graph: TopologyGraph) -> None:
        for t in NODE_TYPES:
            W = self.params[f"{self.prefix}.proj.{t}.W"]
            f = graph.features[t].shape[1]
            if W.shape[0] != f:
                raise ad.ShapeError(f"{t} features have width {f}, projection expects {W.shape[0]}")


def _needed_types(n_layers: int) -> list:
    """Node types whose layer-``l`` state is required to produce vehicle outputs."""
    need = [None] * (n_layers + 1)
    need[n_layers] = {"vehicle"}
    for l in range(n_layers - 1, -1, -1):
        s = set(need[l + 1])
        for _, src, dst in RELATIONS:
            if dst in need[l + 1]:
                s.add(src)
        need[l] = s
    return need


def rgcn_forward(graph: TopologyGraph, rp: RgcnParams) -> Tensor:
    """Vehicle-node embeddings after ``n_layers`` rounds of relational message passing.

    ``h_i' = act(W_self h_i + sum_r mean_{j in N_r(i)} W_r h_j)`` with ReLU
    between layers and identity on the last.
    """
    rp.check(graph)
    P = rp.params
    pre = rp.prefix
    need = _needed_types(rp.n_layers)
    h = {}
    for t in need[0]:
        if graph.count(t) == 0:
            continue
        h[t] = ad.add_bias(ad.matmul(Tensor(graph.features[t]), P[f"{pre}.proj.{t}.W"]),
                           P[f"{pre}.proj.{t}.b"])
    for l in range(rp.n_layers):
        nxt = {}
        for dst in need[l + 1]:
            if dst not in h:
                continue
            acc = ad.matmul(h[dst], P[f"{pre}.l{l}.self"])
            for rel, src, d in RELATIONS:
                if d != dst or src not in h:
                    continue
                s_idx, _ = graph.edges[rel]
                if len(s_idx) == 0:
                    continue
                msgs = ad.gather_rows(h[src], s_idx)
                agg = ad.segment_mean(msgs, graph.edges[rel][1], graph.count(dst),
                                      op=graph.segment_op(rel))
                acc = ad.add(acc, ad.matmul(agg, P[f"{pre}.l{l}.{rel}"]))
            nxt[dst] = ad.relu(acc) if l < rp.n_layers - 1 else acc
        h = nxt
    return h["vehicle"]
