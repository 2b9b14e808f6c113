import asyncio
import json
import uuid

import pytest

from citystream import events as ev
from citystream.bench import (
    MetricsPoller,
    TranscriptSubscriber,
    in_delay_sample,
    run_saturation_probe,
    run_suite,
)
from citystream.streamhub import HubConfig, HubServer
from citystream.topology import TopologyConfig
from conftest import make_location_event, make_section_event, run_async


class TestDelaySampling:
    def test_deterministic(self):
        eid = str(uuid.uuid4())
        assert in_delay_sample(eid, 0.05) == in_delay_sample(eid, 0.05)

    def test_fraction_close_to_rate(self):
        import random
        rng = random.Random(1)
        ids = [str(uuid.UUID(int=rng.getrandbits(128))) for _ in range(20_000)]
        hits = sum(1 for e in ids if in_delay_sample(e, 0.05))
        assert 0.04 < hits / len(ids) < 0.06

    def test_extremes(self):
        eid = str(uuid.uuid4())
        assert not in_delay_sample(eid, 0.0)
        assert in_delay_sample(eid, 1.0)


class TestPoller:
    def test_utilization_from_busy_deltas(self):
        async def main():
            busy = {"v": 0.0}
            poller = MetricsPoller({}, interval_s=0.1,
                                   extra_sources={"c": lambda: {"busy_seconds": busy["v"]}})
            await poller.poll()
            busy["v"] = 0.05
            await asyncio.sleep(0.1)
            await poller.poll()
            sample = poller.samples[-1]
            assert sample["component"] == "c"
            # 0.05 busy seconds over ~0.1 s of wall time
            assert sample["utilization"] * sample["window_s"] == pytest.approx(0.05, rel=0.05)
        run_async(main())

    def test_unreachable_target_is_skipped(self):
        async def main():
            poller = MetricsPoller({"ghost": ("127.0.0.1", 9)}, interval_s=0.1)
            await poller.poll()
            await poller.poll()
            assert poller.samples == []
        run_async(main())


class TestTranscriptSubscriber:
    def test_collects_and_catches_up(self):
        async def main():
            hub = HubServer(HubConfig())
            await hub.start()
            sub = await TranscriptSubscriber(hub.address, "main").start()
            try:
                batch = [make_location_event(), make_section_event()]
                from citystream.httpkit import fetch
                await fetch(hub.address, "POST", "/v1/publish", ev.encode_batch(batch))
                assert await sub.wait_seq(2, timeout=5.0)
                assert [r.event_id for r in sub.records] == [e.event_id for e in batch]
                assert sub.counters.busy.busy_seconds > 0
            finally:
                await sub.close()
                await hub.close()
        run_async(main())


class TestSaturationProbe:
    def test_paused_subscriber_forces_rejections_then_full_recovery(self):
        outcome = run_async(run_saturation_probe(capacity=128, post_events=800))
        assert outcome["saturated_503s"] > 0
        assert outcome["acked"] > 0
        assert outcome["lost"] == 0
        assert outcome["recovered_after_resume"]


class TestSuiteSmoke:
    def test_two_tiny_loads_end_to_end(self, tmp_path):
        template = TopologyConfig(collector_count=2, graph_radius_m=1500.0)
        report = run_async(run_suite(
            loads=[4, 8], duration_s=90.0, out_dir=tmp_path, template=template,
            seed=5, paths=3, sample_rate=1.0, time_scale=30.0, poll_interval_s=1.0))
        assert len(report.levels) == 2
        for lv in report.levels:
            assert not lv.aborted
            assert lv.ok_count == lv.posts_total > 0
            assert lv.lost == 0
            assert lv.admitted == lv.main_count == lv.ok_count
            assert lv.storage_exact
            assert lv.collector_delay.count > 0
            assert "hub" in lv.utilization
        assert report.first_saturated is None
        assert (tmp_path / "suite.json").exists()
        assert (tmp_path / "rates_by_load.csv").exists()
        assert (tmp_path / "utilization_by_load.csv").exists()
        assert (tmp_path / "delays_by_load.csv").exists()
        assert (tmp_path / "rate_vs_n.png").exists()
        assert (tmp_path / "utilization_vs_n.png").exists()
        assert (tmp_path / "delay_vs_n.png").exists()
        for lv in report.levels:
            assert lv.balancer_connections >= lv.n  # dedicated driver connections
        level_dir = tmp_path / "load_0004"
        assert (level_dir / "rates.csv").exists()
        assert (level_dir / "delays.csv").exists()
        with open(level_dir / "utilization.csv") as f:
            import csv as _csv
            header = next(_csv.reader(f))
        assert header == ["component", "minute", "utilization"]
        assert json.loads((level_dir / "level.json").read_text())["n"] == 4
