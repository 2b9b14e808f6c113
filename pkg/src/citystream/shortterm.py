"""RAM-resident short-term location services.

Three structures cover the real-time needs of the pipeline: a rotating
two-tier map holding each driver's last location (entries live between one
and two rotation periods without refresh), a grid-backed driver-score index
answering rectangle queries with sliding one-hour retention, and a ring of
recent abnormal events serving vicinity traffic alerts.

All times are caller-supplied epoch milliseconds; nothing here reads the wall
clock, so behavior is deterministic under test. Every operation is a plain
synchronous method, which makes each one atomic when the service is driven
from a single event loop.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

from .events import AbnormalSituation, TrafficAlert
from .geo import GeoPoint, GeoRect, haversine_distance, rect_around
from .metrics import Counters


@dataclass
class ShortTermConfig:
    rotation_period_ms: int = 30_000
    retention_ms: int = 3_600_000
    alert_retention_ms: int = 600_000
    default_half_side_m: float = 500.0
    result_limit: int = 50
    advancement_threshold_m: float = 10.0
    # Apply the advancement rule to score writes as well (skips writes for
    # stopped or crawling vehicles).
    suppress_score_writes: bool = True
    cell_size_deg: float = 0.005
    evict_interval_ms: int = 60_000


class TwoTierLocationStore:
    """Last-location map built from two generations of dicts.

    Writes always land in the current tier; lookups fall back to the previous
    tier. Each rotation drops the previous tier wholesale, so an unrefreshed
    entry survives at least one and at most two rotation periods without any
    per-entry timer bookkeeping.
    """

    def __init__(self, rotation_period_ms: int = 30_000, now: int = 0):
        self.rotation_period_ms = rotation_period_ms
        self.last_rotation_at = now
        self._current: dict[str, tuple[GeoPoint, int]] = {}
        self._previous: dict[str, tuple[GeoPoint, int]] = {}

    def record(self, driver_id: str, point: GeoPoint, now: int) -> None:
        self._current[driver_id] = (point, now)

    def last_location(self, driver_id: str) -> tuple[GeoPoint, int] | None:
        hit = self._current.get(driver_id)
        if hit is None:
            hit = self._previous.get(driver_id)
        return hit

    def rotate(self, now: int) -> bool:
        """Drop the oldest generation if a full period has elapsed.

        Early calls are no-ops; the caller owns the schedule.
        """
        if now < self.last_rotation_at + self.rotation_period_ms:
            return False
        self._previous = self._current
        self._current = {}
        self.last_rotation_at = now
        return True

    def has_advanced(self, driver_id: str, new_point: GeoPoint,
                     threshold_m: float = 10.0) -> bool:
        """True when the driver moved at least threshold_m since the stored
        location, or when no location is stored. Does not record new_point."""
        stored = self.last_location(driver_id)
        if stored is None:
            return True
        return haversine_distance(stored[0], new_point) >= threshold_m

    def __len__(self) -> int:
        return len(self._current.keys() | self._previous.keys())


class ScoreIndex:
    """Driver score/location index with rectangle queries and 1 h retention.

    Entries are bucketed in a uniform degree grid, so a query touches only
    the cells its rectangle overlaps instead of the whole population.
    """

    def __init__(self, retention_ms: int = 3_600_000, cell_size_deg: float = 0.005):
        self.retention_ms = retention_ms
        self.cell_size_deg = cell_size_deg
        self._entries: dict[str, tuple[GeoPoint, float, int]] = {}
        self._grid: dict[tuple[int, int], set[str]] = {}

    def _cell(self, point: GeoPoint) -> tuple[int, int]:
        return (math.floor(point.latitude / self.cell_size_deg),
                math.floor(point.longitude / self.cell_size_deg))

    def record(self, driver_id: str, point: GeoPoint, score: float, now: int) -> None:
        if not (0.0 <= score <= 100.0):
            raise ValueError(f"driving score {score} outside [0, 100]")
        old = self._entries.get(driver_id)
        if old is not None:
            old_cell = self._cell(old[0])
            new_cell = self._cell(point)
            if old_cell != new_cell:
                self._remove_from_grid(driver_id, old_cell)
                self._grid.setdefault(new_cell, set()).add(driver_id)
        else:
            self._grid.setdefault(self._cell(point), set()).add(driver_id)
        self._entries[driver_id] = (point, score, now)

    def _remove_from_grid(self, driver_id: str, cell: tuple[int, int]) -> None:
        bucket = self._grid.get(cell)
        if bucket is not None:
            bucket.discard(driver_id)
            if not bucket:
                del self._grid[cell]

    def nearby(self, center: GeoPoint, half_side: float, requester_id: str,
               now: int, limit: int = 50) -> list[tuple[str, float, GeoPoint]]:
        """Fresh entries inside the query rectangle, nearest-first.

        Excludes the requester, drops entries older than the retention window,
        orders by ascending distance from the center (ties by driver id), and
        truncates to limit.
        """
        rect = rect_around(center, half_side)
        cutoff = now - self.retention_ms
        matches: list[tuple[float, str, float, GeoPoint]] = []
        lo_lat = math.floor(rect.min_lat / self.cell_size_deg)
        hi_lat = math.floor(rect.max_lat / self.cell_size_deg)
        lo_lon = math.floor(rect.min_lon / self.cell_size_deg)
        hi_lon = math.floor(rect.max_lon / self.cell_size_deg)
        for ix in range(lo_lat, hi_lat + 1):
            for iy in range(lo_lon, hi_lon + 1):
                for driver_id in self._grid.get((ix, iy), ()):
                    if driver_id == requester_id:
                        continue
                    point, score, last_update = self._entries[driver_id]
                    if last_update < cutoff or not rect.contains(point):
                        continue
                    matches.append((haversine_distance(center, point), driver_id, score, point))
        matches.sort(key=lambda m: (m[0], m[1]))
        return [(driver_id, score, point) for _, driver_id, score, point in matches[:limit]]

    def evict_expired(self, now: int) -> int:
        cutoff = now - self.retention_ms
        stale = [d for d, (_, _, ts) in self._entries.items() if ts < cutoff]
        for driver_id in stale:
            point, _, _ = self._entries.pop(driver_id)
            self._remove_from_grid(driver_id, self._cell(point))
        return len(stale)

    def __len__(self) -> int:
        return len(self._entries)


class AlertWindow:
    """Ring of recent abnormal events answering rectangle queries.

    Retention is keyed on the service-side record time, not the client
    timestamp, so skewed client clocks cannot pin alerts alive.
    """

    def __init__(self, retention_ms: int = 600_000, max_results: int = 50):
        self.retention_ms = retention_ms
        self.max_results = max_results
        self._ring: deque[tuple[int, str, GeoPoint, int]] = deque()

    def record(self, event: AbnormalSituation, now: int) -> None:
        self._ring.append((now, event.kind.value,
                           GeoPoint(event.latitude, event.longitude), event.timestamp))

    def query(self, rect: GeoRect, now: int) -> list[TrafficAlert]:
        cutoff = now - self.retention_ms
        hits = [TrafficAlert(kind, point.latitude, point.longitude, ts)
                for recorded, kind, point, ts in self._ring
                if recorded >= cutoff and rect.contains(point)]
        return hits[-self.max_results:]

    def evict_expired(self, now: int) -> int:
        cutoff = now - self.retention_ms
        evicted = 0
        while self._ring and self._ring[0][0] < cutoff:
            self._ring.popleft()
            evicted += 1
        return evicted

    def __len__(self) -> int:
        return len(self._ring)


@dataclass
class FeedbackBundle:
    advanced: bool
    nearby: list[tuple[str, float, GeoPoint]]
    alerts: list[TrafficAlert]


class ShortTermService:
    """Facade collectors talk to; owns the three stores plus metrics.

    Collectors reach it in-process (single event loop, atomic ops) or over
    the local HTTP API in multi-process deployments.
    """

    def __init__(self, config: ShortTermConfig | None = None, now: int = 0):
        self.config = config or ShortTermConfig()
        self.locations = TwoTierLocationStore(self.config.rotation_period_ms, now)
        self.scores = ScoreIndex(self.config.retention_ms, self.config.cell_size_deg)
        self.alerts = AlertWindow(self.config.alert_retention_ms, self.config.result_limit)
        self.counters = Counters()
        self._last_evict_at = now

    def observe_location(self, driver_id: str, point: GeoPoint, score: float,
                         now: int) -> bool:
        """Record one vehicle-location observation; returns the advancement verdict.

        The advancement test runs against the previously stored location, then
        the new location is always recorded. The score write is skipped for
        non-advancing drivers when suppression is on.
        """
        with self.counters.busy.track():
            advanced = self.locations.has_advanced(
                driver_id, point, self.config.advancement_threshold_m)
            self.locations.record(driver_id, point, now)
            self.counters.inc("locations_recorded")
            self.counters.inc("advanced_true" if advanced else "advanced_false")
            if advanced or not self.config.suppress_score_writes:
                self.scores.record(driver_id, point, score, now)
                self.counters.inc("score_writes")
            else:
                self.counters.inc("score_writes_suppressed")
            return advanced

    def feedback_bundle(self, driver_id: str, point: GeoPoint, score: float,
                        now: int, half_side: float | None = None) -> FeedbackBundle:
        """One-shot observe + nearby-score + alert query used per feedback build."""
        advanced = self.observe_location(driver_id, point, score, now)
        with self.counters.busy.track():
            half = self.config.default_half_side_m if half_side is None else half_side
            nearby = self.scores.nearby(point, half, driver_id, now,
                                        self.config.result_limit)
            alerts = self.alerts.query(rect_around(point, half), now)
            self.counters.inc("nearby_queries")
        return FeedbackBundle(advanced=advanced, nearby=nearby, alerts=alerts)

    def record_abnormal(self, event: AbnormalSituation, now: int) -> None:
        with self.counters.busy.track():
            self.alerts.record(event, now)
            self.counters.inc("alerts_recorded")

    def maintenance(self, now: int) -> None:
        """Periodic upkeep: rotation when due, evictions on their own cadence."""
        with self.counters.busy.track():
            if self.locations.rotate(now):
                self.counters.inc("rotations")
            if now - self._last_evict_at >= self.config.evict_interval_ms:
                self.counters.inc("score_evictions", self.scores.evict_expired(now))
                self.counters.inc("alert_evictions", self.alerts.evict_expired(now))
                self._last_evict_at = now

    def metrics(self) -> dict[str, float]:
        snap = self.counters.snapshot()
        snap["score_index_size"] = len(self.scores)
        snap["location_store_size"] = len(self.locations)
        return snap
