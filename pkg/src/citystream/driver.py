"""Single-driver simulation: kinematics along a road path and event emission.

Each driver advances once per tick at a speed pulled toward the segment limit
scaled by a personal bias and small per-tick noise, bounded by acceleration
and braking limits, slowing ahead of sharp turns and slower segments. Event
cadences: a location every 10 s of driven time, a detail section every 500 m,
and an abnormal-situation report the moment a detector threshold is crossed
(edge-triggered with hysteresis and a per-kind cooldown so a lingering
condition does not flood the stream).

Everything is driven by the state's own RNG and clock: a given (profile,
path, behavior) triple replays the identical event sequence.
"""

from __future__ import annotations

import bisect
import random
import statistics
import uuid
from dataclasses import dataclass, field

from .events import (
    AbnormalKind,
    AbnormalSituation,
    DrivingSection,
    EventEnvelope,
    EventType,
    SectionSample,
    SpeedVariation,
    VehicleLocation,
)
from .geo import GeoPoint, bearing, haversine_distance
from .roadnet import PathSpec, RoadGraph

KMH_TO_MS = 1.0 / 3.6
MS_TO_KMH = 3.6
_EPS_M = 1e-6


@dataclass(frozen=True)
class BehaviorConfig:
    accel_limit_ms2: float = 2.5
    decel_limit_ms2: float = 4.0
    # Planned braking (turn and slow-zone approaches) uses this fraction of
    # the physical deceleration limit; full braking is reserved for abrupt
    # target drops, which is what the deceleration detector is for.
    comfort_brake_frac: float = 0.55
    speed_noise: float = 0.05
    turn_angle_deg: float = 45.0
    turn_speed_kmh: float = 18.0
    hr_base: float = 70.0
    hr_per_kmh: float = 0.35
    hr_noise: float = 2.0
    abnormal_accel_ms2: float = 3.5
    abnormal_speed_factor: float = 1.2
    abnormal_heart_rate: float = 120.0
    abnormal_cooldown_ms: int = 60_000
    abnormal_rearm: float = 0.95
    location_period_ms: int = 10_000
    section_length_m: float = 500.0
    loop_paths: bool = True


@dataclass(frozen=True)
class DriverProfile:
    driver_id: str
    speed_bias: float
    aggressiveness: float
    start_offset_ms: int
    path_index: int
    rng_seed: int


def build_profiles(n: int, p: int, seed: int) -> list[DriverProfile]:
    """Randomized per-driver parameters; drivers round-robin over the p paths."""
    rng = random.Random(seed)
    profiles = []
    for i in range(n):
        profiles.append(DriverProfile(
            driver_id=f"driver-{i:05d}",
            speed_bias=rng.uniform(0.8, 1.2),
            aggressiveness=rng.uniform(0.8, 1.2),
            start_offset_ms=rng.randrange(0, 60_000),
            path_index=i % p,
            rng_seed=seed * 1_000_003 + i + 1,
        ))
    return profiles


@dataclass(frozen=True)
class _Segment:
    start: GeoPoint
    end: GeoPoint
    length_m: float
    limit_kmh: float
    turn_after_deg: float  # heading change into the next segment (0 at path end)


class PathGeometry:
    """A path flattened to segments with cumulative lengths and turn angles."""

    def __init__(self, graph: RoadGraph, path: PathSpec):
        headings = []
        raw = []
        for a, b in zip(path.nodes, path.nodes[1:]):
            edge = graph.edge_between(a, b)
            pa, pb = graph.nodes[a], graph.nodes[b]
            raw.append((pa, pb, edge.length_m, edge.speed_limit))
            headings.append(bearing(pa, pb))
        self.segments: list[_Segment] = []
        for i, (pa, pb, length, limit) in enumerate(raw):
            if i + 1 < len(raw):
                diff = abs(headings[i + 1] - headings[i]) % 360.0
                turn = min(diff, 360.0 - diff)
            else:
                turn = 0.0
            self.segments.append(_Segment(pa, pb, length, limit, turn))
        self.cum_len = []
        total = 0.0
        for seg in self.segments:
            total += seg.length_m
            self.cum_len.append(total)
        self.total_m = total

    def locate(self, pos_m: float) -> tuple[int, GeoPoint]:
        """Segment index and interpolated point at pos_m meters from the start."""
        pos_m = min(max(pos_m, 0.0), self.total_m)
        idx = min(bisect.bisect_right(self.cum_len, pos_m), len(self.segments) - 1)
        seg = self.segments[idx]
        seg_start = self.cum_len[idx] - seg.length_m
        frac = (pos_m - seg_start) / seg.length_m if seg.length_m > 0 else 0.0
        return idx, GeoPoint(
            seg.start.latitude + frac * (seg.end.latitude - seg.start.latitude),
            seg.start.longitude + frac * (seg.end.longitude - seg.start.longitude),
        )


class DriverState:
    """Mutable per-driver simulation state; touched by exactly one task."""

    def __init__(self, profile: DriverProfile, path: PathGeometry,
                 behavior: BehaviorConfig | None = None,
                 sim_epoch_ms: int = 0, initial_speed_kmh: float = 0.0):
        self.profile = profile
        self.path = path
        self.behavior = behavior or BehaviorConfig()
        self.rng = random.Random(profile.rng_seed)
        self.sim_time_ms = sim_epoch_ms
        self.pos_m = 0.0
        self.speed_ms = initial_speed_kmh * KMH_TO_MS
        self.heart_rate = self.behavior.hr_base
        self.score = 75.0
        self.time_since_location_ms = 0
        self.dist_since_section_m = 0.0
        _, start_point = path.locate(0.0)
        self.samples: list[SectionSample] = [SectionSample(
            self.sim_time_ms, start_point.latitude, start_point.longitude,
            initial_speed_kmh, self.heart_rate)]
        # Per-kind detector latches: armed means the next crossing may fire.
        self._armed = {kind: True for kind in AbnormalKind}
        self._last_fired = {kind: -10**12 for kind in AbnormalKind}

    def _new_event_id(self) -> str:
        return str(uuid.UUID(int=self.rng.getrandbits(128), version=4))

    def _envelope(self, event_type: EventType, body) -> EventEnvelope:
        return EventEnvelope(
            event_id=self._new_event_id(),
            source_id=self.profile.driver_id,
            event_type=event_type,
            created_at=self.sim_time_ms,
            body=body,
        )


def _target_speed(state: DriverState, seg_idx: int, dist_to_node: float) -> float:
    b = state.behavior
    p = state.profile
    seg = state.path.segments[seg_idx]
    noise = state.rng.uniform(-b.speed_noise, b.speed_noise)
    target = seg.limit_kmh * KMH_TO_MS * p.speed_bias * (1.0 + noise)
    # Brake toward turns, slower segments, and the path end.
    constraint_kmh = None
    if seg_idx + 1 == len(state.path.segments):
        constraint_kmh = b.turn_speed_kmh
    else:
        nxt = state.path.segments[seg_idx + 1]
        if seg.turn_after_deg > b.turn_angle_deg:
            constraint_kmh = b.turn_speed_kmh
        if nxt.limit_kmh < seg.limit_kmh:
            slower = nxt.limit_kmh * p.speed_bias
            constraint_kmh = slower if constraint_kmh is None else min(constraint_kmh, slower)
    if constraint_kmh is not None:
        v_node = constraint_kmh * KMH_TO_MS
        decel = b.comfort_brake_frac * b.decel_limit_ms2 * p.aggressiveness
        allowed = (v_node * v_node + 2.0 * decel * max(dist_to_node, 0.0)) ** 0.5
        target = min(target, allowed)
    return target


def _section_from_samples(samples: list[SectionSample]) -> DrivingSection:
    speeds = [s.speed for s in samples]
    hrs = [s.heart_rate for s in samples]
    max_delta = 0.0
    flips = 0
    last_sign = 0
    for prev, cur in zip(samples, samples[1:]):
        gap_s = (cur.timestamp - prev.timestamp) / 1000.0
        delta = cur.speed - prev.speed
        max_delta = max(max_delta, abs(delta) / gap_s)
        sign = (delta > 0) - (delta < 0)
        if sign != 0:
            if last_sign != 0 and sign != last_sign:
                flips += 1
            last_sign = sign
    return DrivingSection(
        start_timestamp=samples[0].timestamp,
        end_timestamp=samples[-1].timestamp,
        samples=tuple(samples),
        mean_speed=statistics.fmean(speeds),
        stddev_speed=statistics.pstdev(speeds),
        mean_heart_rate=statistics.fmean(hrs),
        stddev_heart_rate=statistics.pstdev(hrs),
        speed_variation_stats=SpeedVariation(max_delta, flips),
    )


def step_driver(state: DriverState, dt_ms: int) -> list[EventEnvelope]:
    """Advance one tick; return the events this tick emits (possibly none)."""
    b = state.behavior
    p = state.profile
    path = state.path
    dt_s = dt_ms / 1000.0
    state.sim_time_ms += dt_ms

    seg_idx, _ = path.locate(state.pos_m)
    seg = path.segments[seg_idx]
    dist_to_node = path.cum_len[seg_idx] - state.pos_m
    target = _target_speed(state, seg_idx, dist_to_node)

    max_up = b.accel_limit_ms2 * p.aggressiveness * dt_s
    max_down = b.decel_limit_ms2 * p.aggressiveness * dt_s
    new_speed = min(max(target, state.speed_ms - max_down), state.speed_ms + max_up)
    new_speed = max(0.0, new_speed)
    accel = (new_speed - state.speed_ms) / dt_s
    state.speed_ms = new_speed

    moved = new_speed * dt_s
    state.pos_m += moved
    wrapped = False
    if state.pos_m >= path.total_m:
        if b.loop_paths:
            state.pos_m -= path.total_m
            wrapped = True
        else:
            state.pos_m = path.total_m
    _, point = path.locate(state.pos_m)

    speed_kmh = new_speed * MS_TO_KMH
    state.heart_rate = max(
        40.0, b.hr_base + b.hr_per_kmh * speed_kmh + state.rng.gauss(0.0, b.hr_noise))
    state.score = min(100.0, max(0.0, state.score + state.rng.uniform(-0.5, 0.5)))

    sample = SectionSample(state.sim_time_ms, point.latitude, point.longitude,
                           speed_kmh, state.heart_rate)
    if wrapped:
        # The teleport back to the path start must not leak into a section.
        state.samples = [sample]
        state.dist_since_section_m = 0.0
    else:
        state.samples.append(sample)
        state.dist_since_section_m += moved
    state.time_since_location_ms += dt_ms

    out: list[EventEnvelope] = []
    out.extend(_detect_abnormal(state, accel, speed_kmh, seg.limit_kmh))

    if state.dist_since_section_m >= b.section_length_m - _EPS_M and len(state.samples) >= 2:
        out.append(state._envelope(EventType.DRIVING_SECTION,
                                   _section_from_samples(state.samples)))
        state.samples = [sample]
        state.dist_since_section_m = 0.0

    if state.time_since_location_ms >= b.location_period_ms:
        state.time_since_location_ms -= b.location_period_ms
        out.append(state._envelope(EventType.VEHICLE_LOCATION, VehicleLocation(
            timestamp=state.sim_time_ms,
            latitude=point.latitude, longitude=point.longitude,
            accuracy=state.rng.uniform(3.0, 15.0),
            speed=speed_kmh, driving_score=state.score)))
    return out


def _detect_abnormal(state: DriverState, accel: float, speed_kmh: float,
                     limit_kmh: float) -> list[EventEnvelope]:
    b = state.behavior
    readings = {
        AbnormalKind.HIGH_ACCELERATION: (accel, b.abnormal_accel_ms2),
        AbnormalKind.HIGH_DECELERATION: (-accel, b.abnormal_accel_ms2),
        AbnormalKind.HIGH_SPEED: (speed_kmh, b.abnormal_speed_factor * limit_kmh),
        AbnormalKind.HIGH_HEART_RATE: (state.heart_rate, b.abnormal_heart_rate),
    }
    _, point = state.path.locate(state.pos_m)
    out = []
    for kind, (value, threshold) in readings.items():
        if value > threshold:
            cooled = state.sim_time_ms - state._last_fired[kind] >= b.abnormal_cooldown_ms
            if state._armed[kind] and cooled:
                state._armed[kind] = False
                state._last_fired[kind] = state.sim_time_ms
                out.append(state._envelope(EventType.ABNORMAL_SITUATION, AbnormalSituation(
                    timestamp=state.sim_time_ms,
                    latitude=point.latitude, longitude=point.longitude,
                    kind=kind, magnitude=value)))
        elif value < b.abnormal_rearm * threshold:
            state._armed[kind] = True
    return out


def section_path_length_m(section: DrivingSection) -> float:
    """Driven length of a section: sum of consecutive sample distances."""
    total = 0.0
    for prev, cur in zip(section.samples, section.samples[1:]):
        total += haversine_distance(GeoPoint(prev.latitude, prev.longitude),
                                    GeoPoint(cur.latitude, cur.longitude))
    return total
