#!/usr/bin/env python3
"""Two-minute tour: bring up an in-process deployment, drive a bit of
time-compressed load through the balancer, and print what the pipeline saw.

Usage: python3 scripts/quick_demo.py [drivers] [simulated_seconds]
"""

import asyncio
import sys

from citystream.bench import TranscriptSubscriber
from citystream.geo import GeoPoint
from citystream.httpkit import fetch
from citystream.metrics import parse_metrics
from citystream.simulator import SimulationConfig, run_simulation
from citystream.topology import TopologyConfig, launch


async def main(drivers: int, duration_s: float) -> None:
    topo = await launch(TopologyConfig(collector_count=3, graph_radius_m=2000.0))
    print(f"topology up: {sorted(topo.addresses)}")
    main_sub = await TranscriptSubscriber(topo.addresses["hub"], "main").start()
    storage_sub = await TranscriptSubscriber(topo.addresses["hub"], "storage").start()
    try:
        host, port = topo.addresses["balancer"]
        report = await run_simulation(SimulationConfig(
            drivers=drivers, paths=5, center=GeoPoint(37.39, -5.98),
            radius_m=2000.0, seed=7, duration_s=duration_s,
            target=f"http://{host}:{port}", time_scale=20.0))
        await asyncio.sleep(0.5)

        print(f"\nsimulator: {len(report.records)} posts, {report.ok_count} ok")
        for kind, count in sorted(report.counts_by_type().items()):
            print(f"  {kind}: {count}")
        print(f"main stream transcript: {len(main_sub.records)} events")
        print(f"storage stream transcript: {len(storage_sub.records)} events "
              "(locations filtered out)")
        _, body = await fetch(topo.addresses["hub"], "GET", "/v1/metrics")
        hub = parse_metrics(body)
        print(f"hub: admitted={hub['events_admitted']:.0f} "
              f"rejected={hub.get('events_rejected', 0):.0f} "
              f"busy={hub['busy_seconds'] * 1000:.1f} ms")
        _, body = await fetch(topo.addresses["shortterm"], "GET", "/v1/metrics")
        st = parse_metrics(body)
        print(f"shortterm: locations={st.get('locations_recorded', 0):.0f} "
              f"score_writes={st.get('score_writes', 0):.0f} "
              f"suppressed={st.get('score_writes_suppressed', 0):.0f}")
    finally:
        await main_sub.close()
        await storage_sub.close()
        await topo.shutdown()


if __name__ == "__main__":
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 20
    secs = float(sys.argv[2]) if len(sys.argv) > 2 else 120.0
    asyncio.run(main(n, secs))
