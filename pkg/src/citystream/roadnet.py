"""Synthetic city road network: perturbed-grid generation, shortest paths,
and the JSON file format shared by the simulator and the road-attribute stub.

Generation is a pure function of (center, radius, seed): the same inputs
produce byte-identical files, which keeps simulation runs reproducible.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from pathlib import Path

import networkx as nx

from .events import RoadType
from .geo import EARTH_RADIUS_M, GeoPoint, haversine_distance

KMH_TO_MS = 1.0 / 3.6


@dataclass(frozen=True)
class RoadEdge:
    node_a: str
    node_b: str
    length_m: float
    speed_limit: float
    road_type: RoadType


@dataclass(frozen=True)
class PathSpec:
    nodes: tuple[str, ...]
    length_m: float
    travel_time_s: float


class RoadGraph:
    def __init__(self, nodes: dict[str, GeoPoint], edges: list[RoadEdge],
                 meta: dict | None = None):
        self.nodes = nodes
        self.edges = edges
        self.meta = meta or {}
        self._adjacency: dict[str, list[RoadEdge]] | None = None
        self._edge_map = {}
        for e in edges:
            self._edge_map[(e.node_a, e.node_b)] = e
            self._edge_map[(e.node_b, e.node_a)] = e

    def edge_between(self, a: str, b: str) -> RoadEdge:
        return self._edge_map[(a, b)]

    def adjacency(self) -> dict[str, list[RoadEdge]]:
        if self._adjacency is None:
            adj: dict[str, list[RoadEdge]] = {n: [] for n in self.nodes}
            for e in self.edges:
                adj[e.node_a].append(e)
                adj[e.node_b].append(e)
            self._adjacency = adj
        return self._adjacency

    def to_json(self) -> str:
        obj = {
            "meta": self.meta,
            "nodes": [{"id": nid, "lat": p.latitude, "lon": p.longitude}
                      for nid, p in sorted(self.nodes.items())],
            "edges": [{"a": e.node_a, "b": e.node_b, "length_m": e.length_m,
                       "speed_limit": e.speed_limit, "road_type": e.road_type.value}
                      for e in self.edges],
        }
        return json.dumps(obj, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "RoadGraph":
        obj = json.loads(text)
        nodes = {n["id"]: GeoPoint(n["lat"], n["lon"]) for n in obj["nodes"]}
        edges = [RoadEdge(e["a"], e["b"], e["length_m"], e["speed_limit"],
                          RoadType(e["road_type"])) for e in obj["edges"]]
        return cls(nodes, edges, obj.get("meta", {}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "RoadGraph":
        return cls.from_json(Path(path).read_text())


def _limit_to_type(limit: float) -> RoadType:
    if limit >= 90:
        return RoadType.HIGHWAY
    return RoadType.URBAN


def generate_graph(center: GeoPoint, radius_m: float, seed: int,
                   spacing_m: float = 200.0, jitter: float = 0.2,
                   ring_frac: float = 0.93, urban_weight: float = 0.9) -> RoadGraph:
    """Build a jittered street grid clipped to a disk around the center.

    The 90 km/h arterial subset forms a peripheral ring road at ring_frac of
    the radius (a continuous fast diameter would soak up most minimal-time
    routes and distort the per-driver event rate far above a city's). The
    interior draws 30 or 50 km/h per edge, weighted urban_weight toward 30.
    Only the largest connected component is kept, so every generated pair of
    nodes is routable.
    """
    if not (1_000.0 <= radius_m <= 30_000.0):
        raise ValueError("radius must be between 1 and 30 km")
    rng = random.Random(seed)
    lat_step = spacing_m / (EARTH_RADIUS_M * math.pi / 180.0)
    lon_step = lat_step / math.cos(math.radians(center.latitude))
    half = math.ceil(radius_m / spacing_m)
    ring = round(half * ring_frac)

    nodes: dict[str, GeoPoint] = {}
    grid: dict[tuple[int, int], str] = {}
    for i in range(-half, half + 1):
        for j in range(-half, half + 1):
            lat = center.latitude + i * lat_step + rng.uniform(-jitter, jitter) * lat_step
            lon = center.longitude + j * lon_step + rng.uniform(-jitter, jitter) * lon_step
            point = GeoPoint(lat, lon)
            if haversine_distance(center, point) <= radius_m:
                nid = f"n{i}_{j}"
                nodes[nid] = point
                grid[(i, j)] = nid

    edges: list[RoadEdge] = []
    for (i, j), nid in sorted(grid.items()):
        for di, dj in ((1, 0), (0, 1)):
            other = grid.get((i + di, j + dj))
            if other is None:
                continue
            on_ring = (di == 1 and abs(j) == ring and abs(i) < ring) or \
                      (dj == 1 and abs(i) == ring and abs(j) < ring)
            if on_ring:
                limit = 90.0
            else:
                limit = 30.0 if rng.random() < urban_weight else 50.0
            edges.append(RoadEdge(nid, other,
                                  haversine_distance(nodes[nid], nodes[other]),
                                  limit, _limit_to_type(limit)))

    # Keep the largest component (disk clipping can strand corner nodes).
    parent = {n: n for n in nodes}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for e in edges:
        ra, rb = find(e.node_a), find(e.node_b)
        if ra != rb:
            parent[ra] = rb
    components: dict[str, list[str]] = {}
    for n in nodes:
        components.setdefault(find(n), []).append(n)
    keep = set(max(components.values(), key=lambda ns: (len(ns), ns[0])))
    nodes = {n: p for n, p in nodes.items() if n in keep}
    edges = [e for e in edges if e.node_a in keep and e.node_b in keep]

    meta = {"center_lat": center.latitude, "center_lon": center.longitude,
            "radius_m": radius_m, "seed": seed, "spacing_m": spacing_m,
            "ring_frac": ring_frac, "urban_weight": urban_weight}
    return RoadGraph(nodes, edges, meta)


def _nx_graph(graph: RoadGraph) -> nx.Graph:
    g = nx.Graph()
    for e in graph.edges:
        g.add_edge(e.node_a, e.node_b,
                   seconds=e.length_m / (e.speed_limit * KMH_TO_MS),
                   length=e.length_m)
    return g


def generate_paths(graph: RoadGraph, p: int, seed: int) -> list[PathSpec]:
    """p minimal-travel-time routes between random distinct node pairs."""
    rng = random.Random(seed)
    node_ids = sorted(graph.nodes)
    g = _nx_graph(graph)
    paths: list[PathSpec] = []
    while len(paths) < p:
        start, end = rng.choice(node_ids), rng.choice(node_ids)
        if start == end:
            continue
        route = nx.shortest_path(g, start, end, weight="seconds")
        length = 0.0
        seconds = 0.0
        for a, b in zip(route, route[1:]):
            edge = graph.edge_between(a, b)
            length += edge.length_m
            seconds += edge.length_m / (edge.speed_limit * KMH_TO_MS)
        if length <= 0:
            continue
        paths.append(PathSpec(tuple(route), length, seconds))
    return paths


def save_paths(paths: list[PathSpec], path: str | Path) -> None:
    obj = [{"nodes": list(p.nodes), "length_m": p.length_m,
            "travel_time_s": p.travel_time_s} for p in paths]
    Path(path).write_text(json.dumps(obj, sort_keys=True, separators=(",", ":")))


def load_paths(path: str | Path) -> list[PathSpec]:
    obj = json.loads(Path(path).read_text())
    return [PathSpec(tuple(p["nodes"]), p["length_m"], p["travel_time_s"]) for p in obj]
