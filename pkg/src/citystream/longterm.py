"""Road-attribute provider: a pluggable stand-in for full long-term services.

Answers "what road is under this point" from the synthetic road graph by
snapping to the nearest edge within 50 m. The recommended speed is a fixed
policy (90 % of the limit, rounded to the nearest 5 km/h). A real GIS-backed
service can replace this behind the same two-method surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .events import RoadType
from .geo import EARTH_RADIUS_M, GeoPoint
from .roadnet import RoadGraph

_M_PER_DEG = EARTH_RADIUS_M * math.pi / 180.0


@dataclass(frozen=True)
class RoadAttributes:
    road_type: RoadType
    speed_limit: float
    recommended_speed: float

    def __post_init__(self) -> None:
        if self.recommended_speed > self.speed_limit:
            raise ValueError("recommended speed above the limit")


def recommended_for(limit: float) -> float:
    return 5.0 * round(0.9 * limit / 5.0)


def point_segment_distance_m(point: GeoPoint, a: GeoPoint, b: GeoPoint) -> float:
    """Distance from a point to a segment, in a local planar frame.

    Good to well under a meter at street scale, which is all the 50 m snap
    needs.
    """
    cos_lat = math.cos(math.radians(point.latitude))
    ax = (a.longitude - point.longitude) * cos_lat * _M_PER_DEG
    ay = (a.latitude - point.latitude) * _M_PER_DEG
    bx = (b.longitude - point.longitude) * cos_lat * _M_PER_DEG
    by = (b.latitude - point.latitude) * _M_PER_DEG
    dx, dy = bx - ax, by - ay
    seg_len_sq = dx * dx + dy * dy
    if seg_len_sq == 0.0:
        return math.hypot(ax, ay)
    t = max(0.0, min(1.0, -(ax * dx + ay * dy) / seg_len_sq))
    return math.hypot(ax + t * dx, ay + t * dy)


class RoadAttributeProvider:
    """Nearest-road lookups over a grid bucketing of the graph's edges.

    Pure function of the graph: identical (graph, point) inputs always give
    identical answers. Keeps a lookup counter so callers can verify that
    advancement-rule suppression actually avoids queries.
    """

    def __init__(self, graph: RoadGraph, snap_m: float = 50.0,
                 cell_size_deg: float = 0.005):
        self.graph = graph
        self.snap_m = snap_m
        self.cell_size_deg = cell_size_deg
        self.lookups = 0
        self._buckets: dict[tuple[int, int], list[int]] = {}
        # Inflating by 2x the snap distance keeps every in-range edge in the
        # query point's own cell for |lat| < 60 (cos factor on longitude).
        pad_deg = snap_m / _M_PER_DEG * 2.0
        for idx, edge in enumerate(graph.edges):
            pa, pb = graph.nodes[edge.node_a], graph.nodes[edge.node_b]
            lo_lat = min(pa.latitude, pb.latitude) - pad_deg
            hi_lat = max(pa.latitude, pb.latitude) + pad_deg
            lo_lon = min(pa.longitude, pb.longitude) - pad_deg
            hi_lon = max(pa.longitude, pb.longitude) + pad_deg
            for ix in range(math.floor(lo_lat / cell_size_deg),
                            math.floor(hi_lat / cell_size_deg) + 1):
                for iy in range(math.floor(lo_lon / cell_size_deg),
                                math.floor(hi_lon / cell_size_deg) + 1):
                    self._buckets.setdefault((ix, iy), []).append(idx)

    def road_attributes(self, point: GeoPoint) -> RoadAttributes | None:
        """Attributes of the nearest edge within the snap distance, else None."""
        self.lookups += 1
        cell = (math.floor(point.latitude / self.cell_size_deg),
                math.floor(point.longitude / self.cell_size_deg))
        best_dist = math.inf
        best_edge = None
        for idx in self._buckets.get(cell, ()):
            edge = self.graph.edges[idx]
            d = point_segment_distance_m(
                point, self.graph.nodes[edge.node_a], self.graph.nodes[edge.node_b])
            if d < best_dist or (d == best_dist and best_edge is not None
                                 and (edge.node_a, edge.node_b) < (best_edge.node_a, best_edge.node_b)):
                best_dist, best_edge = d, edge
        if best_edge is None or best_dist > self.snap_m:
            return None
        return RoadAttributes(
            road_type=best_edge.road_type,
            speed_limit=best_edge.speed_limit,
            recommended_speed=recommended_for(best_edge.speed_limit),
        )
