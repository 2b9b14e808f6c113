"""Command-line entry points.

    city up --config topology.json     run a deployment until SIGTERM
    city down --config topology.json   signal a running deployment
    simulate --drivers N --paths P ... generate driver load against a target
    bench suite --loads 50,100,...     multi-load measurement suite
    bench plots --dir DIR              re-render plots from suite CSVs
    bench saturation --out DIR         forced-saturation probe
    genmap --center LAT,LON ...        write graph.json / paths.json for reuse

The installed aliases `city`, `simulate`, and `bench` front the matching
subcommands.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import os
import signal
import sys
import time
from pathlib import Path

from .geo import GeoPoint
from .topology import TopologyConfig, launch, run_component


def _parse_center(text: str) -> GeoPoint:
    lat, _, lon = text.partition(",")
    return GeoPoint(float(lat), float(lon))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="citystream")
    sub = parser.add_subparsers(dest="command", required=True)

    city = sub.add_parser("city", help="launch or stop a deployment")
    city_sub = city.add_subparsers(dest="city_command", required=True)
    up = city_sub.add_parser("up")
    up.add_argument("--config", required=True)
    up.add_argument("--ports-file", default=None)
    up.add_argument("--pidfile", default=None)
    up.add_argument("--set", dest="overrides", action="append", default=[],
                    metavar="KEY=VALUE", help="override a config field")
    down = city_sub.add_parser("down")
    down.add_argument("--config", default=None)
    down.add_argument("--pidfile", default=None)

    sim = sub.add_parser("simulate", help="drive synthetic load at a collector endpoint")
    sim.add_argument("--drivers", type=int, required=True)
    sim.add_argument("--paths", type=int, required=True)
    sim.add_argument("--center", type=_parse_center, default=GeoPoint(37.39, -5.98))
    sim.add_argument("--radius", type=float, default=3000.0)
    sim.add_argument("--seed", type=int, default=7)
    sim.add_argument("--duration", type=float, required=True)
    sim.add_argument("--target", required=True)
    sim.add_argument("--out", required=True)
    sim.add_argument("--tick", type=int, default=1000)
    sim.add_argument("--time-scale", type=float, default=1.0)
    sim.add_argument("--graph", default=None)

    bench = sub.add_parser("bench", help="measurement suite and reports")
    bench_sub = bench.add_subparsers(dest="bench_command", required=True)
    suite = bench_sub.add_parser("suite")
    suite.add_argument("--loads", required=True, help="comma-separated driver counts")
    suite.add_argument("--duration", type=float, default=300.0)
    suite.add_argument("--topology", default=None, help="topology config template")
    suite.add_argument("--out", required=True)
    suite.add_argument("--seed", type=int, default=7)
    suite.add_argument("--paths", type=int, default=20)
    suite.add_argument("--sample-rate", type=float, default=0.05)
    suite.add_argument("--time-scale", type=float, default=1.0)
    suite.add_argument("--poll-interval", type=float, default=60.0)
    plots = bench_sub.add_parser("plots")
    plots.add_argument("--dir", required=True)
    saturation = bench_sub.add_parser("saturation")
    saturation.add_argument("--out", default=None)
    saturation.add_argument("--capacity", type=int, default=512)

    genmap = sub.add_parser("genmap", help="generate a road graph and paths")
    genmap.add_argument("--center", type=_parse_center, default=GeoPoint(37.39, -5.98))
    genmap.add_argument("--radius", type=float, default=3000.0)
    genmap.add_argument("--seed", type=int, default=7)
    genmap.add_argument("--paths", type=int, default=20)
    genmap.add_argument("--out", required=True)

    component = sub.add_parser("component", help="internal: run one child component")
    component.add_argument("--role", required=True)
    component.add_argument("--config", required=True)
    component.add_argument("--ports-file", required=True)
    return parser


async def _city_up(args) -> int:
    obj = json.loads(Path(args.config).read_text())
    for override in args.overrides:
        key, sep, raw = override.partition("=")
        if not sep:
            print(f"--set needs KEY=VALUE, got {override!r}", file=sys.stderr)
            return 2
        try:
            obj[key] = json.loads(raw)
        except json.JSONDecodeError:
            obj[key] = raw
    config = TopologyConfig.from_dict(obj)
    topo = await launch(config)
    ports_file = args.ports_file or str(Path(args.config).with_suffix(".ports.json"))
    pidfile = args.pidfile or str(Path(args.config).with_suffix(".pid"))
    Path(ports_file).write_text(json.dumps({
        "pid": os.getpid(),
        "addresses": {k: list(v) for k, v in topo.addresses.items()},
    }, indent=2))
    Path(pidfile).write_text(str(os.getpid()))
    print(f"city up: {len(topo.addresses)} components healthy; "
          f"balancer at {topo.addresses['balancer']}", flush=True)

    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGTERM, signal.SIGINT):
        loop.add_signal_handler(sig, stop.set)
    await stop.wait()
    await topo.shutdown()
    for path in (ports_file, pidfile):
        try:
            os.unlink(path)
        except OSError:
            pass
    print("city down: shutdown complete", flush=True)
    return 0


def _city_down(args) -> int:
    pidfile = args.pidfile
    if pidfile is None:
        if args.config is None:
            print("city down needs --config or --pidfile", file=sys.stderr)
            return 2
        pidfile = str(Path(args.config).with_suffix(".pid"))
    try:
        pid = int(Path(pidfile).read_text().strip())
    except (OSError, ValueError):
        print(f"no running deployment recorded at {pidfile}", file=sys.stderr)
        return 1
    try:
        os.kill(pid, signal.SIGTERM)
    except ProcessLookupError:
        print(f"process {pid} already gone", file=sys.stderr)
        return 0
    for _ in range(100):
        # The up process removes its pidfile as the last step of a clean
        # shutdown; that is the reliable signal (a zombie still "accepts"
        # signal 0 until its parent reaps it).
        if not Path(pidfile).exists():
            return 0
        try:
            os.kill(pid, 0)
        except ProcessLookupError:
            return 0
        time.sleep(0.1)
    print(f"process {pid} did not exit after SIGTERM", file=sys.stderr)
    return 1


async def _simulate(args) -> int:
    from .driver import BehaviorConfig
    from .simulator import SimulationConfig, run_simulation

    config = SimulationConfig(
        drivers=args.drivers, paths=args.paths, center=args.center,
        radius_m=args.radius, seed=args.seed, duration_s=args.duration,
        target=args.target, out_dir=args.out, tick_ms=args.tick,
        time_scale=args.time_scale, graph_file=args.graph,
        behavior=BehaviorConfig(),
    )
    report = await run_simulation(config)
    print(f"simulate: {len(report.records)} posts, {report.ok_count} ok, "
          f"aborted={report.aborted}", flush=True)
    return 3 if report.aborted else 0


async def _bench(args) -> int:
    from . import bench

    if args.bench_command == "suite":
        loads = [int(x) for x in args.loads.split(",") if x]
        template = (TopologyConfig.from_file(args.topology)
                    if args.topology else TopologyConfig())
        report = await bench.run_suite(
            loads, args.duration, args.out, template, seed=args.seed,
            paths=args.paths, sample_rate=args.sample_rate,
            time_scale=args.time_scale, poll_interval_s=args.poll_interval)
        print(f"suite: slope={report.rate_slope:.2f} events/min/driver "
              f"r2={report.rate_r2:.4f} first_saturated={report.first_saturated}",
              flush=True)
        return 0
    if args.bench_command == "plots":
        made = bench.plot_suite(args.dir)
        print("plots: " + ", ".join(str(p) for p in made), flush=True)
        return 0
    outcome = await bench.run_saturation_probe(capacity=args.capacity,
                                               out_dir=args.out)
    print(f"saturation: 503s={outcome['saturated_503s']} lost={outcome['lost']} "
          f"recovered={outcome['recovered_after_resume']}", flush=True)
    return 0 if outcome["lost"] == 0 else 1


def _genmap(args) -> int:
    from .roadnet import generate_graph, generate_paths, save_paths

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    graph = generate_graph(args.center, args.radius, args.seed)
    graph.save(out / "graph.json")
    save_paths(generate_paths(graph, args.paths, args.seed), out / "paths.json")
    print(f"genmap: {len(graph.nodes)} nodes, {len(graph.edges)} edges, "
          f"{args.paths} paths -> {out}", flush=True)
    return 0


async def _component(args) -> int:
    config = json.loads(Path(args.config).read_text())
    await run_component(args.role, config, args.ports_file)
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "city":
        if args.city_command == "up":
            return asyncio.run(_city_up(args))
        return _city_down(args)
    if args.command == "simulate":
        return asyncio.run(_simulate(args))
    if args.command == "bench":
        return asyncio.run(_bench(args))
    if args.command == "genmap":
        return _genmap(args)
    if args.command == "component":
        return asyncio.run(_component(args))
    return 2


def city_entry() -> int:
    return main(["city"] + sys.argv[1:])


def simulate_entry() -> int:
    return main(["simulate"] + sys.argv[1:])


def bench_entry() -> int:
    return main(["bench"] + sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
