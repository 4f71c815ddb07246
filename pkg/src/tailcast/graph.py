"""Station graph: haversine distances, distance-threshold edges, inverse-distance weights."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ParameterDomainError, ValidationError

EARTH_RADIUS_KM = 6371.0
DEFAULT_D_MAX_KM = 300.0
STATION_COLUMNS = ("station_id", "lat", "lon", "alt")


@dataclass(frozen=True)
class Station:
    id: str
    latitude: float
    longitude: float
    altitude: float = 0.0

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise ParameterDomainError(f"station {self.id}: latitude {self.latitude} out of range")
        if not -180.0 <= self.longitude <= 180.0:
            raise ParameterDomainError(f"station {self.id}: longitude {self.longitude} out of range")


def geodesic_distance(a: Station, b: Station) -> float:
    """Great-circle distance in km (haversine, spherical Earth)."""
    lat1, lat2 = math.radians(a.latitude), math.radians(b.latitude)
    dlat = lat2 - lat1
    dlon = math.radians(b.longitude - a.longitude)
    h = math.sin(dlat / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


@dataclass(frozen=True)
class StationGraph:
    """Undirected graph stored as directed pairs in both directions.

    ``edges`` excludes self-loops; ``weights`` holds every edge plus
    ``(i, i) -> 1``.  Message passing uses :attr:`message_src`,
    :attr:`message_dst` and :attr:`message_weight`, which include self-loops.
    """

    stations: tuple[Station, ...]
    distance_matrix: np.ndarray
    edges: tuple[tuple[int, int], ...]
    weights: dict
    d_max: float
    message_src: np.ndarray = field(repr=False)
    message_dst: np.ndarray = field(repr=False)
    message_weight: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.stations)

    @property
    def station_ids(self) -> list[str]:
        return [s.id for s in self.stations]

    def neighbours(self, i: int) -> list[int]:
        return [j for (a, j) in self.edges if a == i]


def build_graph(stations: Sequence[Station], d_max: float = DEFAULT_D_MAX_KM,
                normalization: str = "global") -> StationGraph:
    """Connect stations closer than ``d_max`` km.

    Raw weights are ``1 / d``.  With ``normalization="global"`` they are
    divided by the largest raw weight in the graph (so the closest pair gets
    1); ``"per_node"`` divides each node's incoming weights by that node's
    maximum instead (not symmetric).  Self-loops get weight 1 afterwards.
    """
    stations = tuple(stations)
    if not stations:
        raise ValidationError("graph needs at least one station")
    if d_max <= 0:
        raise ValidationError(f"d_max must be positive, got {d_max}")
    if normalization not in ("global", "per_node"):
        raise ValidationError(f"unknown weight normalization {normalization!r}")
    ids = [s.id for s in stations]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ValidationError(f"duplicate station ids: {dupes}")

    n = len(stations)
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = geodesic_distance(stations[i], stations[j])
            if d == 0.0:
                raise ValidationError(f"stations {ids[i]} and {ids[j]} share a location")
            dist[i, j] = dist[j, i] = d

    edges = tuple((i, j) for i in range(n) for j in range(n) if i != j and dist[i, j] <= d_max)
    raw = {e: 1.0 / dist[e] for e in edges}
    weights: dict = {}
    if normalization == "global":
        top = max(raw.values(), default=1.0)
        weights = {e: w / top for e, w in raw.items()}
    else:
        node_max: dict[int, float] = {}
        for (i, j), w in raw.items():
            node_max[j] = max(node_max.get(j, 0.0), w)
        weights = {(i, j): w / node_max[j] for (i, j), w in raw.items()}
    for i in range(n):
        weights[(i, i)] = 1.0

    pairs = sorted(weights)
    dist.setflags(write=False)
    return StationGraph(
        stations=stations,
        distance_matrix=dist,
        edges=edges,
        weights=weights,
        d_max=float(d_max),
        message_src=np.array([i for i, _ in pairs], dtype=np.intp),
        message_dst=np.array([j for _, j in pairs], dtype=np.intp),
        message_weight=np.array([weights[e] for e in pairs]),
    )


def read_stations_csv(path: str | Path) -> list[Station]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in STATION_COLUMNS[:3] if c not in (reader.fieldnames or [])]
        if missing:
            raise ValidationError(f"{path}: station file lacks column(s) {missing}")
        out = []
        for row in reader:
            alt = row.get("alt") or "0"
            out.append(Station(row["station_id"], float(row["lat"]), float(row["lon"]), float(alt)))
    return out


def write_stations_csv(path: str | Path, stations: Sequence[Station]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(STATION_COLUMNS)
        for s in stations:
            writer.writerow([s.id, f"{s.latitude:.5f}", f"{s.longitude:.5f}", f"{s.altitude:.1f}"])


def write_edges_csv(path: str | Path, graph: StationGraph) -> None:
    """Plot-ready edge list including self-loops."""
    ids = graph.station_ids
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["src", "dst", "distance_km", "weight"])
        for (i, j) in sorted(graph.weights):
            writer.writerow([ids[i], ids[j], f"{graph.distance_matrix[i, j]:.6f}",
                             repr(graph.weights[(i, j)])])
