"""Load generator: drives n synthetic drivers against a collector endpoint.

Each driver owns one dedicated HTTP connection (reconnecting on failure, never
sharing with other drivers), starts at a random offset inside the first
minute, ticks on an absolute schedule so the aggregate post rate holds even
under scheduling jitter, and posts every emitted event immediately. Client-side
results (response code and latency per event) are recorded to CSV.

time_scale compresses wall time for correctness tests; performance runs use
the default real-time scale.
"""

from __future__ import annotations

import asyncio
import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import events as ev
from .driver import (
    BehaviorConfig,
    DriverProfile,
    DriverState,
    PathGeometry,
    build_profiles,
    step_driver,
)
from .geo import GeoPoint
from .httpkit import ClientConnection, parse_address
from .roadnet import PathSpec, RoadGraph, generate_graph, generate_paths


@dataclass
class SimulationConfig:
    drivers: int
    paths: int
    center: GeoPoint
    radius_m: float
    seed: int
    duration_s: float
    target: str
    out_dir: str | None = None
    tick_ms: int = 1000
    time_scale: float = 1.0
    start_window_ms: int = 60_000
    graph_file: str | None = None
    behavior: BehaviorConfig = field(default_factory=BehaviorConfig)
    abort_failure_ratio: float = 0.5
    abort_after_s: int = 30

    @property
    def r_min(self) -> float:
        """Minimum aggregate request rate: one location per driver per 10 s."""
        return self.drivers / 10.0


@dataclass
class PostRecord:
    event_id: str
    event_type: str
    created_at: int
    response_code: int
    response_ms: float


@dataclass
class SimulationReport:
    config: SimulationConfig
    records: list[PostRecord]
    wall_start_ms: int
    wall_end_ms: int
    aborted: bool = False

    @property
    def ok_count(self) -> int:
        return sum(1 for r in self.records if r.response_code == 200)

    def counts_by_type(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.records:
            out[r.event_type] = out.get(r.event_type, 0) + 1
        return out

    def steady_post_rate(self) -> float:
        """Posts per wall second once every driver has started."""
        scale = self.config.time_scale
        window_start = self.wall_start_ms + self.config.start_window_ms / scale
        window_s = (self.wall_end_ms - window_start) / 1000.0
        if window_s <= 0:
            return 0.0
        n = sum(1 for r in self.records if r.created_at >= window_start)
        return n / window_s

    def ok_event_ids(self) -> set[str]:
        return {r.event_id for r in self.records if r.response_code == 200}


def build_world(config: SimulationConfig) -> tuple[RoadGraph, list[PathSpec], list[DriverProfile]]:
    if config.graph_file:
        graph = RoadGraph.load(config.graph_file)
    else:
        graph = generate_graph(config.center, config.radius_m, config.seed)
    paths = generate_paths(graph, config.paths, config.seed)
    profiles = build_profiles(config.drivers, config.paths, config.seed)
    return graph, paths, profiles


def run_offline(config: SimulationConfig, sim_epoch_ms: int = 0) -> dict[str, list[ev.EventEnvelope]]:
    """Pure simulation without any network: per-driver event sequences.

    Deterministic for a given (config.seed, sim_epoch_ms); used by the
    determinism and cadence tests.
    """
    graph, paths, profiles = build_world(config)
    geometries = [PathGeometry(graph, p) for p in paths]
    duration_ms = int(config.duration_s * 1000)
    out: dict[str, list[ev.EventEnvelope]] = {}
    for profile in profiles:
        state = DriverState(profile, geometries[profile.path_index], config.behavior,
                            sim_epoch_ms=sim_epoch_ms + profile.start_offset_ms)
        emitted: list[ev.EventEnvelope] = []
        elapsed = profile.start_offset_ms
        while elapsed + config.tick_ms <= duration_ms:
            elapsed += config.tick_ms
            emitted.extend(step_driver(state, config.tick_ms))
        out[profile.driver_id] = emitted
    return out


class _FailureMonitor:
    """Aborts the run when most requests keep failing for too long."""

    def __init__(self, ratio: float, consecutive_s: int):
        self.ratio = ratio
        self.consecutive_s = consecutive_s
        self._buckets: dict[int, list[int]] = {}
        self._bad_streak = 0
        self.tripped = False

    def record(self, ok: bool) -> None:
        bucket = self._buckets.setdefault(int(time.time()), [0, 0])
        bucket[0 if ok else 1] += 1

    def tick(self) -> None:
        second = int(time.time()) - 1
        counts = self._buckets.pop(second, None)
        stale = [s for s in self._buckets if s < second]
        for s in stale:
            del self._buckets[s]
        if counts is None:
            return
        ok, bad = counts
        if ok + bad > 0 and bad / (ok + bad) > self.ratio:
            self._bad_streak += 1
        else:
            self._bad_streak = 0
        if self._bad_streak >= self.consecutive_s:
            self.tripped = True


async def _drive(config: SimulationConfig, profile: DriverProfile,
                 geometry: PathGeometry, records: list[PostRecord],
                 monitor: _FailureMonitor, wall_start: float) -> None:
    scale = config.time_scale
    await asyncio.sleep(max(0.0, wall_start + profile.start_offset_ms / 1000.0 / scale
                            - time.monotonic()))
    host, port = parse_address(config.target)
    conn = ClientConnection(host, port)
    state = DriverState(profile, geometry, config.behavior,
                        sim_epoch_ms=ev.now_ms())
    task_start = time.monotonic()
    duration_ms = int(config.duration_s * 1000)
    tick = 0
    try:
        while profile.start_offset_ms + (tick + 1) * config.tick_ms <= duration_ms:
            tick += 1
            scheduled = task_start + tick * config.tick_ms / 1000.0 / scale
            delay = scheduled - time.monotonic()
            if delay > 0:
                await asyncio.sleep(delay)
            for env in step_driver(state, config.tick_ms):
                env = dataclasses.replace(env, created_at=ev.now_ms())
                await _post_event(conn, env, records, monitor)
    finally:
        await conn.close()


async def _post_event(conn: ClientConnection, env: ev.EventEnvelope,
                      records: list[PostRecord], monitor: _FailureMonitor) -> None:
    body = ev.encode_batch([env])
    t0 = time.perf_counter()
    status = 0
    for attempt in (0, 1):
        try:
            status, _, _ = await conn.request("POST", "/v1/events", body, timeout=10.0)
            break
        except Exception:
            if attempt == 1:
                status = 0
    elapsed_ms = (time.perf_counter() - t0) * 1000.0
    records.append(PostRecord(env.event_id, env.event_type.value,
                              env.created_at, status, elapsed_ms))
    monitor.record(status == 200)


async def run_simulation(config: SimulationConfig) -> SimulationReport:
    graph, paths, profiles = build_world(config)
    geometries = [PathGeometry(graph, p) for p in paths]
    records: list[PostRecord] = []
    monitor = _FailureMonitor(config.abort_failure_ratio, config.abort_after_s)
    wall_start_ms = ev.now_ms()
    wall_start = time.monotonic()

    tasks = [asyncio.ensure_future(
        _drive(config, prof, geometries[prof.path_index], records, monitor, wall_start))
        for prof in profiles]

    aborted = False
    try:
        pending = set(tasks)
        while pending:
            done, pending = await asyncio.wait(pending, timeout=1.0)
            monitor.tick()
            if monitor.tripped:
                aborted = True
                for t in pending:
                    t.cancel()
                await asyncio.gather(*pending, return_exceptions=True)
                break
        if not aborted:
            await asyncio.gather(*tasks)
    finally:
        for t in tasks:
            if not t.done():
                t.cancel()

    report = SimulationReport(config, records, wall_start_ms, ev.now_ms(), aborted)
    if config.out_dir:
        write_report(report, Path(config.out_dir), graph, paths)
    return report


def write_report(report: SimulationReport, out_dir: Path,
                 graph: RoadGraph | None = None,
                 paths: list[PathSpec] | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "client_events.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["event_id", "event_type", "created_at", "response_code", "response_ms"])
        for r in report.records:
            writer.writerow([r.event_id, r.event_type, r.created_at,
                             r.response_code, f"{r.response_ms:.3f}"])
    summary = {
        "drivers": report.config.drivers,
        "paths": report.config.paths,
        "duration_s": report.config.duration_s,
        "seed": report.config.seed,
        "posts": len(report.records),
        "ok": report.ok_count,
        "aborted": report.aborted,
        "counts_by_type": report.counts_by_type(),
        "steady_post_rate_per_s": report.steady_post_rate(),
        "r_min_per_s": report.config.r_min,
        "wall_start_ms": report.wall_start_ms,
        "wall_end_ms": report.wall_end_ms,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    if graph is not None:
        graph.save(out_dir / "graph.json")
    if paths is not None:
        from .roadnet import save_paths
        save_paths(paths, out_dir / "paths.json")
