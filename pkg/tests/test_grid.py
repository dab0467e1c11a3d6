import pytest
from hypothesis import given, strategies as st

from fleetsense.grid import OUTSIDE, BBox, Connectivity, GridMap, Order, PoI, Phase, VehicleState


def test_corner_neighbors_von_neumann():
    g = GridMap(4, 4)
    nb = g.neighbors(g.index(0, 0))
    assert nb[0] == 0
    assert len(nb) == 3
    assert set(nb[1:]) == {g.index(0, 1), g.index(1, 0)}


def test_neighbor_order_is_north_south_west_east():
    g = GridMap(3, 3)
    assert g.neighbors(4) == [4, 1, 7, 3, 5]


def test_interior_degree():
    g = GridMap(4, 4)
    assert len(g.neighbors(g.index(1, 1))) == 5
    assert len(GridMap(4, 4, Connectivity.MOORE8).neighbors(g.index(1, 1))) == 9


@pytest.mark.parametrize("conn", list(Connectivity))
def test_degenerate_lattice(conn):
    assert GridMap(1, 1, conn).neighbors(0) == [0]


def test_out_of_range_grid_rejected():
    with pytest.raises(IndexError):
        GridMap(2, 2).neighbors(4)


@given(st.integers(1, 6), st.integers(1, 6), st.sampled_from(list(Connectivity)))
def test_neighbors_symmetric(rows, cols, conn):
    g = GridMap(rows, cols, conn)
    for a in range(g.size):
        for b in g.neighbors(a)[1:]:
            assert a in g.neighbors(b)


@given(st.integers(1, 8), st.integers(1, 8))
def test_index_coords_bijection(rows, cols):
    g = GridMap(rows, cols)
    assert [g.index(*g.coords(i)) for i in range(g.size)] == list(range(g.size))


def test_bin_coordinate_examples():
    g = GridMap(2, 2, bbox=BBox(0.0, 1.0, 0.0, 1.0))
    assert g.bin_coordinate(0.25, 0.25) == g.index(0, 0)
    assert g.bin_coordinate(1.0, 1.0) == g.size - 1
    assert g.bin_coordinate(1.5, 0.5) is OUTSIDE


def test_bin_coordinate_needs_bbox():
    with pytest.raises(ValueError):
        GridMap(2, 2).bin_coordinate(0.1, 0.1)


@given(st.floats(0, 1), st.floats(0, 1))
def test_bin_partitions_bbox(lat, lon):
    g = GridMap(3, 5, bbox=BBox(0.0, 1.0, 0.0, 1.0))
    cell = g.bin_coordinate(lat, lon)
    assert cell is not OUTSIDE and 0 <= cell < g.size


def test_order_validity_window_length():
    o = Order(0, 0, 1, 5.0, created_at=10, travel_time=1, expiry_slots=15)
    valid = [t for t in range(0, 40) if o.is_valid(t)]
    assert valid == list(range(10, 25))


def test_order_invariants():
    with pytest.raises(ValueError):
        Order(0, 0, 1, -1.0, 0, 1)
    with pytest.raises(ValueError):
        Order(0, 0, 1, 1.0, 0, 0)


def test_poi_aoi_grows_one_per_slot():
    p = PoI(0, 0, 0, 5, created_at=3)
    assert [p.aoi(t) for t in range(3, 7)] == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        PoI(0, 0, 0, 0, 0)


def test_vehicle_state_availability():
    v = VehicleState(0, 2, Phase.SERVING, busy_until=5, release_grid=3)
    assert not v.available_at(4)
    assert v.available_at(5)
