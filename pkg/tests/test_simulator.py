import asyncio
import csv
import json

from citystream import events as ev
from citystream.driver import BehaviorConfig
from citystream.geo import GeoPoint
from citystream.httpkit import Response, serve
from citystream.simulator import (
    SimulationConfig,
    _FailureMonitor,
    build_world,
    run_offline,
    run_simulation,
)
from conftest import run_async

CENTER = GeoPoint(37.39, -5.98)


def config(**kwargs):
    base = dict(drivers=5, paths=2, center=CENTER, radius_m=1500.0, seed=11,
                duration_s=120.0, target="http://127.0.0.1:1")
    base.update(kwargs)
    return SimulationConfig(**base)


class TestOffline:
    def test_identical_seeds_identical_streams(self):
        a = run_offline(config(), sim_epoch_ms=1_000_000)
        b = run_offline(config(), sim_epoch_ms=1_000_000)
        assert a == b

    def test_different_seed_differs(self):
        a = run_offline(config(), sim_epoch_ms=0)
        b = run_offline(config(seed=12), sim_epoch_ms=0)
        assert a != b

    def test_all_events_validate(self):
        for events in run_offline(config(), sim_epoch_ms=5_000_000).values():
            assert events
            for env in events:
                ev.validate(env, clock_ms=env.created_at)

    def test_location_count_window(self):
        # 10 drivers for 120 s with starts staggered inside the first minute:
        # each one emits one location per 10 s of its own driving time.
        out = run_offline(config(drivers=10, paths=2, duration_s=120.0), sim_epoch_ms=0)
        total = sum(1 for events in out.values() for e in events
                    if e.event_type == ev.EventType.VEHICLE_LOCATION)
        assert 60 <= total <= 120

    def test_build_world_reuses_graph_file(self, tmp_path):
        cfg = config()
        graph, paths, profiles = build_world(cfg)
        f = tmp_path / "g.json"
        graph.save(f)
        graph2, _, _ = build_world(config(graph_file=str(f)))
        assert graph2.to_json() == graph.to_json()
        assert len(profiles) == cfg.drivers


class TestFailureMonitor:
    def test_trips_after_consecutive_bad_seconds(self):
        import time as _time
        m = _FailureMonitor(0.5, 3)
        for _ in range(4):
            second = int(_time.time())
            m._buckets[second - 1] = [1, 9]  # 90 % failures
            m.tick()
        assert m.tripped

    def test_recovery_resets_streak(self):
        import time as _time
        m = _FailureMonitor(0.5, 3)
        second = int(_time.time())
        m._buckets[second - 1] = [0, 5]
        m.tick()
        m._buckets[second - 1] = [9, 1]  # healthy second
        m.tick()
        m._buckets[second - 1] = [0, 5]
        m.tick()
        m._buckets[second - 1] = [0, 5]
        m.tick()
        assert not m.tripped


class CollectorStub:
    """Accepts every POST, counting events and distinct client connections."""

    def __init__(self):
        self.events = 0
        self.peers = set()
        self.server = None

    async def start(self):
        async def handler(req):
            self.peers.add(req.peer)
            self.events += len([l for l in req.body.split(b"\n") if l.strip()])
            return Response(200, b"")
        self.server = await serve(handler)
        return self.server.address


class TestLiveRun:
    def test_posts_land_and_connections_are_dedicated(self, tmp_path):
        async def main():
            stub = CollectorStub()
            addr = await stub.start()
            # 100 s simulated: every driver outlives its start offset by at
            # least a few location periods, so each one opens a connection.
            cfg = config(drivers=6, paths=2, duration_s=100.0, time_scale=25.0,
                         target=f"http://{addr[0]}:{addr[1]}",
                         out_dir=str(tmp_path))
            report = await run_simulation(cfg)
            assert not report.aborted
            assert report.ok_count == len(report.records) > 0
            assert stub.events == len(report.records)
            assert len(stub.peers) >= 6  # one connection per driver, never shared
            await stub.server.close()
            return report
        report = run_async(main())
        with open(tmp_path / "client_events.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == len(report.records)
        assert {r["event_type"] for r in rows} <= {
            "vehicle_location", "driving_section", "abnormal_situation"}
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["ok"] == report.ok_count
        assert (tmp_path / "graph.json").exists()
        assert (tmp_path / "paths.json").exists()

    def test_unreachable_target_records_failures(self, tmp_path):
        async def main():
            cfg = config(drivers=3, paths=1, duration_s=90.0, time_scale=45.0,
                         target="http://127.0.0.1:9", out_dir=None)
            report = await run_simulation(cfg)
            assert report.records
            assert report.ok_count == 0
            assert all(r.response_code == 0 for r in report.records)
        run_async(main())
