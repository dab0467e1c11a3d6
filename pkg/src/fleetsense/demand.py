"""Ride-order streams: NYC-style trip CSV replay or Poisson synthesis."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .grid import OUTSIDE, GridMap, Order

# Sub-stream tags mixed into per-slot seeds so each random source is independent.
STREAM_ORDERS = 1
STREAM_POIS = 2
STREAM_PLACEMENT = 3
STREAM_PERMUTATION = 4
STREAM_POLICY = 5

REQUIRED_COLUMNS = (
    "pickup_datetime",
    "pickup_latitude",
    "pickup_longitude",
    "dropoff_latitude",
    "dropoff_longitude",
    "fare_amount",
)


class IngestError(Exception):
    """Base class for CSV ingestion failures."""


class MissingColumnError(IngestError):
    pass


class EmptyIngestError(IngestError):
    pass


class DemandMode(str, Enum):
    CSV_REPLAY = "CsvReplay"
    SYNTHETIC = "Synthetic"


def slot_rng(seed: int, t: int, stream: int) -> np.random.Generator:
    """Generator that depends only on ``(seed, t, stream)``."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(t), int(stream)])


def center_profile(grid: GridMap, spread: Optional[float] = None) -> np.ndarray:
    """Gaussian hotspot over the lattice centre, normalised to sum 1."""
    spread = spread if spread is not None else max(grid.rows, grid.cols) / 4.0
    rc, cc = (grid.rows - 1) / 2.0, (grid.cols - 1) / 2.0
    w = np.empty(grid.size)
    for g in range(grid.size):
        r, c = grid.coords(g)
        w[g] = math.exp(-((r - rc) ** 2 + (c - cc) ** 2) / (2.0 * spread ** 2))
    return w / w.sum()


@dataclass(frozen=True)
class DemandModel:
    mode: DemandMode = DemandMode.SYNTHETIC
    rate: tuple = ()
    price_base: float = 2.0
    price_per_step: float = 1.0
    seed: int = 0
    expiry_slots: int = 15
    # CsvReplay only: orders keyed by creation slot
    replay: Optional[dict] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "mode", DemandMode(self.mode))
        object.__setattr__(self, "rate", tuple(float(r) for r in self.rate))
        if any(not math.isfinite(r) or r < 0 for r in self.rate):
            raise ValueError("order rates must be finite and non-negative")
        if self.price_base < 0 or self.price_per_step < 0:
            raise ValueError("prices must be non-negative")

    @classmethod
    def synthetic(cls, grid: GridMap, total_rate: float, seed: int = 0, **kw) -> "DemandModel":
        return cls(mode=DemandMode.SYNTHETIC, rate=tuple(center_profile(grid) * total_rate),
                   seed=seed, **kw)

    @classmethod
    def from_orders(cls, orders: Iterable[Order], seed: int = 0) -> "DemandModel":
        by_slot: dict[int, list[Order]] = {}
        for o in orders:
            by_slot.setdefault(o.created_at, []).append(o)
        return cls(mode=DemandMode.CSV_REPLAY, seed=seed, replay=by_slot)


def generate_orders(model: DemandModel, grid: GridMap, t: int,
                    rng: Optional[np.random.Generator] = None,
                    next_id: int = 0) -> list[Order]:
    """Orders created at slot ``t``.

    Without an explicit ``rng`` the draw is a pure function of
    ``(model.seed, t)``, independent of anything that happened before.
    """
    if model.mode is DemandMode.CSV_REPLAY:
        src = (model.replay or {}).get(t, [])
        return [Order(next_id + i, o.origin, o.destination, o.price, t, o.travel_time,
                      o.expiry_slots) for i, o in enumerate(src)]
    if len(model.rate) != grid.size:
        raise ValueError(f"rate has {len(model.rate)} entries, grid has {grid.size}")
    if rng is None:
        rng = slot_rng(model.seed, t, STREAM_ORDERS)
    counts = rng.poisson(model.rate)
    orders = []
    G = grid.size
    for g in range(G):
        for _ in range(int(counts[g])):
            if G > 1:
                dest = int(rng.integers(G - 1))
                dest += dest >= g
            else:
                dest = g
            travel = max(1, grid.manhattan(g, dest))
            price = model.price_base + model.price_per_step * travel
            orders.append(Order(next_id + len(orders), g, dest, price, t, travel,
                                model.expiry_slots))
    return orders


@dataclass
class IngestResult:
    orders: list
    dropped: int
    start: Optional[datetime] = None


def _parse_dt(s: str) -> datetime:
    return datetime.fromisoformat(s.strip().replace("Z", "+00:00"))


def ingest_csv(path, grid: GridMap, slot_seconds: int = 60,
               expiry_slots: int = 15) -> IngestResult:
    """Bin a taxi-trip CSV into orders on ``grid``.

    Rows with an endpoint outside the bounding box, a non-positive fare, or an
    unparseable field are dropped and counted.
    """
    path = Path(path)
    if slot_seconds < 1:
        raise ValueError("slot_seconds must be positive")
    if grid.bbox is None:
        raise ValueError("ingestion needs a grid map with a bounding box")
    if not path.is_file():
        raise FileNotFoundError(f"no such CSV file: {path}")

    kept = []
    dropped = 0
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in REQUIRED_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise MissingColumnError(f"{path}: missing column(s) {', '.join(missing)}")
        for row in reader:
            try:
                when = _parse_dt(row["pickup_datetime"])
                fare = float(row["fare_amount"])
                o = grid.bin_coordinate(float(row["pickup_latitude"]), float(row["pickup_longitude"]))
                d = grid.bin_coordinate(float(row["dropoff_latitude"]), float(row["dropoff_longitude"]))
            except (ValueError, TypeError, AttributeError):
                dropped += 1
                continue
            if o is OUTSIDE or d is OUTSIDE or not math.isfinite(fare) or fare <= 0:
                dropped += 1
                continue
            kept.append((when, o, d, fare))

    if not kept:
        raise EmptyIngestError(f"{path}: no usable rows ({dropped} dropped)")

    start = min(k[0] for k in kept)
    staged = []
    for when, o, d, fare in kept:
        slot = int((when - start).total_seconds() // slot_seconds)
        staged.append((slot, o, d, fare))
    # stable sort keeps input order within a slot
    staged.sort(key=lambda s: s[0])
    orders = [Order(i, o, d, fare, slot, max(1, grid.manhattan(o, d)), expiry_slots)
              for i, (slot, o, d, fare) in enumerate(staged)]
    return IngestResult(orders, dropped, start)


def write_order_cache(orders: Sequence[Order], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for o in orders:
            fh.write(json.dumps(o.to_dict(), sort_keys=True) + "\n")


def read_order_cache(path) -> list[Order]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such order cache: {path}")
    out = []
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(Order(**json.loads(line)))
    return out
