"""Grid-city geometry and the domain records shared across the simulator.

Grid indices are row-major: ``g = row * cols + col``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional


class Connectivity(str, Enum):
    VON_NEUMANN4 = "VonNeumann4"
    MOORE8 = "Moore8"


# (drow, dcol) in the fixed order N, S, W, E, then diagonals NW, NE, SW, SE.
_DIRECTIONS_4 = ((-1, 0), (1, 0), (0, -1), (0, 1))
_DIRECTIONS_8 = _DIRECTIONS_4 + ((-1, -1), (-1, 1), (1, -1), (1, 1))


class Phase(str, Enum):
    AVAILABLE = "Available"
    SERVING = "Serving"
    COLLECTING = "Collecting"


PHASES = (Phase.AVAILABLE, Phase.SERVING, Phase.COLLECTING)

OUTSIDE = None  # bin_coordinate result for points outside the bounding box


@dataclass(frozen=True)
class BBox:
    min_lat: float
    max_lat: float
    min_lon: float
    max_lon: float

    def __post_init__(self):
        if not (self.max_lat > self.min_lat and self.max_lon > self.min_lon):
            raise ValueError(f"degenerate bounding box: {self}")


@dataclass(frozen=True)
class GridMap:
    rows: int
    cols: int
    connectivity: Connectivity = Connectivity.VON_NEUMANN4
    bbox: Optional[BBox] = None

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")
        object.__setattr__(self, "connectivity", Connectivity(self.connectivity))

    @property
    def size(self) -> int:
        return self.rows * self.cols

    @property
    def directions(self) -> tuple:
        if self.connectivity is Connectivity.MOORE8:
            return _DIRECTIONS_8
        return _DIRECTIONS_4

    @property
    def n_directions(self) -> int:
        return len(self.directions)

    def _check(self, g: int) -> None:
        if not 0 <= g < self.size:
            raise IndexError(f"grid index {g} out of range [0, {self.size})")

    def coords(self, g: int) -> tuple[int, int]:
        self._check(g)
        return divmod(g, self.cols)

    def index(self, row: int, col: int) -> int:
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise IndexError(f"cell ({row}, {col}) is off the lattice")
        return row * self.cols + col

    def direction_targets(self, g: int) -> list[Optional[int]]:
        """Target grid for every move direction, ``None`` where it leaves the lattice."""
        r, c = self.coords(g)
        out = []
        for dr, dc in self.directions:
            rr, cc = r + dr, c + dc
            if 0 <= rr < self.rows and 0 <= cc < self.cols:
                out.append(rr * self.cols + cc)
            else:
                out.append(None)
        return out

    def neighbors(self, g: int) -> list[int]:
        """``g`` itself followed by its on-lattice neighbours in direction order."""
        return [g] + [t for t in self.direction_targets(g) if t is not None]

    def adjacent_pairs(self) -> list[tuple[int, int]]:
        """Unordered adjacent pairs ``(a, b)`` with ``a < b``."""
        pairs = []
        for g in range(self.size):
            for t in self.direction_targets(g):
                if t is not None and g < t:
                    pairs.append((g, t))
        return pairs

    def manhattan(self, a: int, b: int) -> int:
        ra, ca = self.coords(a)
        rb, cb = self.coords(b)
        return abs(ra - rb) + abs(ca - cb)

    def normalized_coords(self, g: int) -> tuple[float, float]:
        r, c = self.coords(g)
        return (r / (self.rows - 1) if self.rows > 1 else 0.0,
                c / (self.cols - 1) if self.cols > 1 else 0.0)

    def bin_coordinate(self, lat: float, lon: float) -> Optional[int]:
        """Uniformly bin a point of the bounding box into a cell.

        Rows run along latitude and columns along longitude. Points on the
        max edge fall into the last row/column; anything outside the box
        yields ``OUTSIDE``.
        """
        if self.bbox is None:
            raise ValueError("grid map has no bounding box")
        b = self.bbox
        if not (b.min_lat <= lat <= b.max_lat and b.min_lon <= lon <= b.max_lon):
            return OUTSIDE
        row = int((lat - b.min_lat) / (b.max_lat - b.min_lat) * self.rows)
        col = int((lon - b.min_lon) / (b.max_lon - b.min_lon) * self.cols)
        return min(row, self.rows - 1) * self.cols + min(col, self.cols - 1)


@dataclass(frozen=True)
class Order:
    id: int
    origin: int
    destination: int
    price: float
    created_at: int
    travel_time: int
    expiry_slots: int = 15

    def __post_init__(self):
        if self.price < 0:
            raise ValueError(f"order {self.id}: negative price {self.price}")
        if self.travel_time < 1:
            raise ValueError(f"order {self.id}: travel_time must be >= 1")
        if self.expiry_slots < 1:
            raise ValueError(f"order {self.id}: expiry_slots must be >= 1")

    def is_valid(self, t: int) -> bool:
        return self.created_at <= t < self.created_at + self.expiry_slots

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "origin": self.origin,
            "destination": self.destination,
            "price": self.price,
            "created_at": self.created_at,
            "travel_time": self.travel_time,
            "expiry_slots": self.expiry_slots,
        }


@dataclass(frozen=True)
class PoI:
    id: int
    grid: int
    task: int
    volume: int
    created_at: int

    def __post_init__(self):
        if self.volume < 1:
            raise ValueError(f"PoI {self.id}: volume must be >= 1")

    def aoi(self, t: int) -> int:
        if t < self.created_at:
            raise ValueError(f"PoI {self.id} does not exist yet at slot {t}")
        return t - self.created_at

    def to_dict(self) -> dict:
        return {"id": self.id, "grid": self.grid, "task": self.task,
                "volume": self.volume, "created_at": self.created_at}


@dataclass(frozen=True)
class VehicleState:
    id: int
    grid: int
    phase: Phase = Phase.AVAILABLE
    busy_until: int = 0
    release_grid: Optional[int] = None

    def available_at(self, t: int) -> bool:
        return self.busy_until <= t
