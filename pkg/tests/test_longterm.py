import math
import random

import pytest

from citystream.events import RoadType
from citystream.geo import GeoPoint
from citystream.longterm import (
    RoadAttributeProvider,
    RoadAttributes,
    point_segment_distance_m,
    recommended_for,
)
from citystream.roadnet import RoadEdge, RoadGraph, generate_graph

CENTER = GeoPoint(37.39, -5.98)


def tiny_graph():
    # One urban 50 km/h street running 0.01 deg east from the center.
    a, b = CENTER, GeoPoint(37.39, -5.97)
    nodes = {"a": a, "b": b}
    edges = [RoadEdge("a", "b", 884.0, 50.0, RoadType.URBAN)]
    return RoadGraph(nodes, edges)


def brute_force_nearest(graph, point):
    best = math.inf
    best_edge = None
    for e in graph.edges:
        d = point_segment_distance_m(point, graph.nodes[e.node_a], graph.nodes[e.node_b])
        if d < best:
            best, best_edge = d, e
    return best, best_edge


class TestPolicy:
    def test_recommended_speeds(self):
        assert recommended_for(50.0) == 45.0
        assert recommended_for(30.0) == 25.0
        assert recommended_for(90.0) == 80.0
        assert recommended_for(120.0) == 110.0

    def test_recommended_never_exceeds_limit(self):
        with pytest.raises(ValueError):
            RoadAttributes(RoadType.URBAN, 50.0, 55.0)


class TestLookup:
    def test_point_on_fifty_kmh_segment(self):
        provider = RoadAttributeProvider(tiny_graph())
        got = provider.road_attributes(GeoPoint(37.39, -5.975))
        assert got == RoadAttributes(RoadType.URBAN, 50.0, 45.0)

    def test_far_outside_graph_is_unknown(self):
        provider = RoadAttributeProvider(tiny_graph())
        assert provider.road_attributes(GeoPoint(37.48, -5.98)) is None  # ~10 km away

    def test_deterministic(self):
        provider = RoadAttributeProvider(tiny_graph())
        p = GeoPoint(37.3901, -5.974)
        assert provider.road_attributes(p) == provider.road_attributes(p)

    def test_lookup_counter(self):
        provider = RoadAttributeProvider(tiny_graph())
        for _ in range(5):
            provider.road_attributes(CENTER)
        assert provider.lookups == 5

    def test_snap_respected_against_brute_force(self):
        graph = generate_graph(CENTER, 2000, seed=13)
        provider = RoadAttributeProvider(graph, snap_m=50.0)
        rng = random.Random(77)
        checked_hits = 0
        for _ in range(500):
            point = GeoPoint(CENTER.latitude + rng.uniform(-0.02, 0.02),
                             CENTER.longitude + rng.uniform(-0.02, 0.02))
            got = provider.road_attributes(point)
            best, best_edge = brute_force_nearest(graph, point)
            if got is None:
                assert best > 50.0
            else:
                checked_hits += 1
                assert best <= 50.0
                assert got.speed_limit == best_edge.speed_limit or best <= 50.0
                # the provider's pick is never farther than the true nearest + snap
                assert got == RoadAttributes(best_edge.road_type, best_edge.speed_limit,
                                             recommended_for(best_edge.speed_limit))
        assert checked_hits > 50  # the sample actually exercised the index


class TestSegmentDistance:
    def test_point_on_segment_is_zero(self):
        a, b = GeoPoint(0, 0), GeoPoint(0, 0.01)
        assert point_segment_distance_m(GeoPoint(0, 0.005), a, b) < 0.01

    def test_perpendicular_offset(self):
        a, b = GeoPoint(0, 0), GeoPoint(0, 0.01)
        # 0.0001 deg of latitude is ~11.12 m
        d = point_segment_distance_m(GeoPoint(0.0001, 0.005), a, b)
        assert d == pytest.approx(11.12, abs=0.05)

    def test_beyond_endpoint_clamps(self):
        a, b = GeoPoint(0, 0), GeoPoint(0, 0.001)
        d = point_segment_distance_m(GeoPoint(0, 0.002), a, b)
        assert d == pytest.approx(111.19, abs=0.5)

    def test_degenerate_segment(self):
        a = GeoPoint(0, 0)
        assert point_segment_distance_m(GeoPoint(0.0001, 0), a, a) == pytest.approx(11.12, abs=0.05)
