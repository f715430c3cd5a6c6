"""Station sets, the distance-thresholded spatial graph, and hop-count SPD tables."""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

EARTH_RADIUS_KM = 6371.0
UNREACHABLE = -1


class DataValidationError(ValueError):
    """Raised for malformed station or series inputs."""


@dataclass(frozen=True)
class GeoCoord:
    lat_deg: float
    lon_deg: float

    def __post_init__(self):
        if not (math.isfinite(self.lat_deg) and math.isfinite(self.lon_deg)):
            raise DataValidationError(f"non-finite coordinate {self}")
        if not -90.0 <= self.lat_deg <= 90.0:
            raise DataValidationError(f"latitude out of range: {self.lat_deg}")
        if not -180.0 < self.lon_deg <= 180.0:
            raise DataValidationError(f"longitude out of range: {self.lon_deg}")


@dataclass(frozen=True)
class StationSet:
    ids: tuple[str, ...]
    coords: tuple[GeoCoord, ...]

    def __post_init__(self):
        if len(self.ids) == 0:
            raise DataValidationError("station set is empty")
        if len(self.ids) != len(self.coords):
            raise DataValidationError("ids and coords differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise DataValidationError("station ids are not unique")

    @classmethod
    def from_arrays(cls, ids: Sequence, lat: Sequence[float], lon: Sequence[float]) -> "StationSet":
        coords = tuple(GeoCoord(float(a), float(b)) for a, b in zip(lat, lon))
        return cls(tuple(str(i) for i in ids), coords)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def lat(self) -> np.ndarray:
        return np.array([c.lat_deg for c in self.coords], dtype=np.float64)

    @property
    def lon(self) -> np.ndarray:
        return np.array([c.lon_deg for c in self.coords], dtype=np.float64)

    def subset(self, order: Sequence[int]) -> "StationSet":
        return StationSet(tuple(self.ids[i] for i in order), tuple(self.coords[i] for i in order))


def read_stations_csv(path) -> StationSet:
    """Read a ``id,lat,lon`` CSV file."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [h.strip() for h in reader.fieldnames] != ["id", "lat", "lon"]:
            raise DataValidationError(f"{path}: expected header id,lat,lon, got {reader.fieldnames}")
        ids, lat, lon = [], [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                ids.append(row["id"].strip())
                lat.append(float(row["lat"]))
                lon.append(float(row["lon"]))
            except (TypeError, ValueError) as exc:
                raise DataValidationError(f"{path}:{lineno}: bad row {row}") from exc
    return StationSet.from_arrays(ids, lat, lon)


def write_stations_csv(stations: StationSet, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "lat", "lon"])
        for sid, c in zip(stations.ids, stations.coords):
            writer.writerow([sid, repr(c.lat_deg), repr(c.lon_deg)])


def haversine_km(a: GeoCoord, b: GeoCoord) -> float:
    lat1, lon1 = math.radians(a.lat_deg), math.radians(a.lon_deg)
    lat2, lon2 = math.radians(b.lat_deg), math.radians(b.lon_deg)
    h = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def haversine_matrix(lat1, lon1, lat2, lon2) -> np.ndarray:
    """Pairwise great-circle distances (km) between two coordinate arrays given in degrees."""
    p1, l1 = np.radians(np.asarray(lat1))[:, None], np.radians(np.asarray(lon1))[:, None]
    p2, l2 = np.radians(np.asarray(lat2))[None, :], np.radians(np.asarray(lon2))[None, :]
    h = np.sin((p2 - p1) / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin((l2 - l1) / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.minimum(1.0, np.sqrt(h)))


@dataclass
class SpatialGraph:
    """Undirected, unweighted graph stored as sorted neighbour lists."""

    n: int
    neighbors: list[list[int]] = field(repr=False)

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int]]) -> "SpatialGraph":
        nbrs: list[set[int]] = [set() for _ in range(n)]
        for i, j in edges:
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"edge ({i}, {j}) out of range for n={n}")
            if i == j:
                raise ValueError(f"self-loop at {i}")
            nbrs[i].add(j)
            nbrs[j].add(i)
        return cls(n, [sorted(s) for s in nbrs])

    @property
    def edges(self) -> set[tuple[int, int]]:
        return {(i, j) for i in range(self.n) for j in self.neighbors[i] if i < j}

    @property
    def degree(self) -> list[int]:
        return [len(nb) for nb in self.neighbors]

    @property
    def num_edges(self) -> int:
        return sum(self.degree) // 2

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n, self.n), dtype=np.int8)
        for i, nb in enumerate(self.neighbors):
            a[i, nb] = 1
        return a


def build_spatial_graph(stations: StationSet, epsilon_km: float, chunk: int = 512) -> SpatialGraph:
    """Connect every pair of distinct stations closer than ``epsilon_km`` (strict)."""
    if len(stations) == 0:
        raise DataValidationError("cannot build a graph over zero stations")
    if epsilon_km < 0:
        raise ValueError("epsilon_km must be non-negative")
    lat, lon = stations.lat, stations.lon
    n = len(stations)
    neighbors: list[list[int]] = [[] for _ in range(n)]
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        d = haversine_matrix(lat[start:stop], lon[start:stop], lat, lon)
        rows, cols = np.nonzero(d < epsilon_km)
        for r, c in zip((rows + start).tolist(), cols.tolist()):
            if r != c:
                neighbors[r].append(c)
    return SpatialGraph(n, neighbors)


def epsilon_from_knn(stations: StationSet, k: int = 8, quantile: float = 0.9) -> float:
    """Convenience threshold: the ``quantile`` of each station's k-th nearest-neighbour distance.

    Not part of the method itself; a practical default when no threshold is known.
    """
    n = len(stations)
    if n < 2:
        return 0.0
    k = min(k, n - 1)
    lat, lon = stations.lat, stations.lon
    kth = np.empty(n)
    for start in range(0, n, 512):
        d = haversine_matrix(lat[start:start + 512], lon[start:start + 512], lat, lon)
        kth[start:start + 512] = np.partition(d, k, axis=1)[:, k]
    # Nudge above the quantile so the strict inequality still admits that neighbour.
    return float(np.quantile(kth, quantile)) * (1 + 1e-9) + 1e-9


def spd_table(graph: SpatialGraph, subset: Sequence[int]) -> np.ndarray:
    """Hop-count distances within the subgraph induced by ``subset``.

    Entry ``(i, j)`` refers to ``subset[i]`` and ``subset[j]``; unreachable pairs are -1.
    """
    subset = [int(s) for s in subset]
    local = {node: i for i, node in enumerate(subset)}
    if len(local) != len(subset):
        raise ValueError("subset contains duplicate nodes")
    for s in subset:
        if not 0 <= s < graph.n:
            raise ValueError(f"node {s} out of range")
    k = len(subset)
    local_nbrs = [[local[v] for v in graph.neighbors[u] if v in local] for u in subset]
    table = np.full((k, k), UNREACHABLE, dtype=np.int64)
    for src in range(k):
        row = table[src]
        row[src] = 0
        queue = deque([src])
        while queue:
            u = queue.popleft()
            du = row[u] + 1
            for v in local_nbrs[u]:
                if row[v] == UNREACHABLE:
                    row[v] = du
                    queue.append(v)
    return table
