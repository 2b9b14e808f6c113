import asyncio
import socket

import pytest

from citystream import events as ev
from citystream.httpkit import fetch
from citystream.topology import ComponentFailure, TopologyConfig, launch
from conftest import make_location_event, make_section_event, run_async

FAST = dict(graph_radius_m=1500.0, collector_count=2)


def test_config_validation():
    with pytest.raises(ValueError):
        TopologyConfig(mode="clustered")
    with pytest.raises(ValueError):
        TopologyConfig(collector_count=0)
    with pytest.raises(ValueError):
        TopologyConfig(hub_port=9000, shortterm_port=9000)
    with pytest.raises(ValueError):
        TopologyConfig(collector_count=2, collector_ports=[9100])


def test_config_round_trip(tmp_path):
    cfg = TopologyConfig(collector_count=3, hub_capacity=128)
    f = tmp_path / "topology.json"
    import json
    f.write_text(json.dumps(cfg.to_dict()))
    assert TopologyConfig.from_file(f) == cfg


def test_default_deployment_comes_up_healthy():
    async def main():
        topo = await launch(TopologyConfig(graph_radius_m=1500.0))
        try:
            assert set(topo.addresses) == {"balancer", "hub", "shortterm"} | {
                f"collector_{i}" for i in range(6)}
            report = await topo.health()
            assert all(report.values())
            assert await topo.healthy()
        finally:
            await topo.shutdown()
    run_async(main())


def test_end_to_end_post_through_balancer():
    async def main():
        topo = await launch(TopologyConfig(**FAST))
        try:
            env = make_location_event(lat=37.39, lon=-5.98)
            status, body = await fetch(topo.addresses["balancer"], "POST", "/v1/events",
                                       ev.encode_batch([env]))
            assert status == 200
            fb = ev.decode_feedback(body)
            assert fb.road_type is not None
            assert topo.hub.hub.head_seq == 1
        finally:
            await topo.shutdown()
    run_async(main())


def test_shutdown_is_idempotent():
    async def main():
        topo = await launch(TopologyConfig(**FAST))
        await topo.shutdown()
        await topo.shutdown()  # second call is a no-op
        assert not await topo.healthy()
    run_async(main())


def test_composite_health_is_conjunction():
    async def main():
        topo = await launch(TopologyConfig(**FAST))
        try:
            assert await topo.healthy()
            await topo.collectors[0].close()
            report = await topo.health()
            assert report["collector_1"]
            assert not report["collector_0"]
            assert not await topo.healthy()
        finally:
            await topo.shutdown()
    run_async(main())


def test_occupied_port_fails_launch_and_tears_down():
    async def main():
        blocker = socket.socket()
        blocker.bind(("127.0.0.1", 0))
        blocker.listen(1)
        port = blocker.getsockname()[1]
        try:
            with pytest.raises(ComponentFailure):
                await launch(TopologyConfig(hub_port=port, **FAST))
        finally:
            blocker.close()
    run_async(main())


def test_shutdown_preserves_acknowledged_events():
    async def main():
        from test_streamhub import Transcript
        topo = await launch(TopologyConfig(**FAST))
        sub = await Transcript(topo.addresses["hub"], "storage").start()
        acked = []
        try:
            for i in range(10):
                env = make_section_event(source_id=f"d{i}")
                status, _ = await fetch(topo.addresses["balancer"], "POST",
                                        "/v1/events", ev.encode_batch([env]))
                if status == 200:
                    acked.append(env.event_id)
            await topo.shutdown()  # drains subscribers before closing the hub
            got = {e.event_id for e in sub.events}
            assert set(acked) <= got
        finally:
            await sub.close()
            await topo.shutdown()
    run_async(main())


def test_multi_process_smoke(tmp_path):
    async def main():
        topo = await launch(TopologyConfig(mode="multi_process", **FAST),
                            run_dir=tmp_path)
        try:
            assert await topo.healthy()
            env = make_location_event(lat=37.39, lon=-5.98)
            status, body = await fetch(topo.addresses["balancer"], "POST", "/v1/events",
                                       ev.encode_batch([env]))
            assert status == 200
            assert ev.decode_feedback(body).nearby_scores == ()
            status, _ = await fetch(topo.addresses["hub"], "GET", "/v1/metrics")
            assert status == 200
        finally:
            await topo.shutdown()
    run_async(main())
