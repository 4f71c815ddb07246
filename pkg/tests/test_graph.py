import math

import numpy as np
import pytest

from tailcast.errors import ParameterDomainError, ValidationError
from tailcast.graph import (
    EARTH_RADIUS_KM,
    Station,
    build_graph,
    geodesic_distance,
    read_stations_csv,
    write_edges_csv,
    write_stations_csv,
)

KM_PER_DEG = math.pi * EARTH_RADIUS_KM / 180.0


def on_equator(*km):
    return [Station(f"E{i}", 0.0, d / KM_PER_DEG) for i, d in enumerate(km)]


def test_one_degree_of_longitude_on_equator():
    d = geodesic_distance(Station("a", 0, 0), Station("b", 0, 1))
    assert d == pytest.approx(111.195, abs=1e-3)


def test_distance_symmetric_and_antipodal():
    a, b = Station("a", 10, 20), Station("b", -10, -160)
    assert geodesic_distance(a, b) == pytest.approx(geodesic_distance(b, a))
    assert geodesic_distance(a, b) == pytest.approx(math.pi * EARTH_RADIUS_KM)


def test_far_pair_has_no_edge():
    g = build_graph(on_equator(0, 400), 300)
    assert g.edges == ()
    assert g.neighbours(0) == []


def test_collinear_normalised_weights():
    g = build_graph(on_equator(0, 100, 250), 300)
    assert g.weights[(0, 1)] == pytest.approx(1.0)
    assert g.weights[(1, 2)] == pytest.approx(2 / 3)
    assert g.weights[(0, 2)] == pytest.approx(0.4)
    for (i, j), w in g.weights.items():
        assert g.weights[(j, i)] == w


def test_self_loops_have_unit_weight():
    g = build_graph(on_equator(0, 100, 250), 300)
    for i in range(3):
        assert g.weights[(i, i)] == 1.0
    assert len(g.message_src) == len(g.edges) + 3


def test_single_station_has_only_a_self_loop():
    g = build_graph([Station("only", 45, 7)], 300)
    assert g.edges == ()
    assert list(zip(g.message_src, g.message_dst)) == [(0, 0)]
    assert g.message_weight.tolist() == [1.0]


def test_edges_grow_with_threshold():
    rng = np.random.default_rng(1)
    stations = [Station(f"S{i}", rng.uniform(44, 48), rng.uniform(5, 12)) for i in range(25)]
    previous: set = set()
    for d_max in (50, 100, 200, 300, 600, 2000):
        edges = set(build_graph(stations, d_max).edges)
        assert previous <= edges
        previous = edges
    assert len(previous) == 25 * 24


def test_per_node_normalisation_peaks_at_one():
    g = build_graph(on_equator(0, 100, 250), 300, normalization="per_node")
    for j in range(3):
        incoming = [w for (a, b), w in g.weights.items() if b == j and a != j]
        assert max(incoming) == pytest.approx(1.0)


@pytest.mark.parametrize("stations, d_max", [
    ([], 300),
    ([Station("a", 0, 0), Station("a", 1, 1)], 300),
    ([Station("a", 0, 0), Station("b", 0, 0)], 300),
    ([Station("a", 0, 0)], 0),
])
def test_invalid_graph_inputs(stations, d_max):
    with pytest.raises(ValidationError):
        build_graph(stations, d_max)


def test_station_coordinate_validation():
    with pytest.raises(ParameterDomainError):
        Station("x", 91.0, 0.0)


def test_station_csv_round_trip(tmp_path):
    stations = [Station("A", 45.12345, 7.5, 300.0), Station("B", -12.0, 130.25, 5.0)]
    write_stations_csv(tmp_path / "s.csv", stations)
    assert read_stations_csv(tmp_path / "s.csv") == stations


def test_edge_csv_lists_every_message(tmp_path):
    g = build_graph(on_equator(0, 100, 250), 300)
    write_edges_csv(tmp_path / "e.csv", g)
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "src,dst,distance_km,weight"
    assert len(lines) - 1 == len(g.weights)


def test_graph_invariants_on_random_layouts():
    rng = np.random.default_rng(2)
    stations = [Station(f"S{i}", rng.uniform(40, 50), rng.uniform(0, 15)) for i in range(30)]
    g = build_graph(stations, 300)
    h = build_graph(stations, 300)
    assert g.edges == h.edges == tuple(sorted(g.edges))
    assert max(w for (i, j), w in g.weights.items() if i != j) == 1.0
    for (i, j) in g.edges:
        assert (j, i) in g.edges and g.weights[(i, j)] == g.weights[(j, i)]
