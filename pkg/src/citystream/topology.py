"""Deployment glue: bring up any subset of the pipeline from one config.

in_process mode runs every component on the current event loop (desk scale);
multi_process mode spawns one child process per component, wiring addresses
through per-role ports files. Either way the launch gate is the same: every
component's health endpoint must go green within 10 seconds or the whole
topology is torn down with the failing component named.
"""

from __future__ import annotations

import asyncio
import json
import os
import signal
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

from .balancer import Balancer, BalancerConfig
from .collector import Collector, CollectorConfig
from .events import now_ms
from .geo import GeoPoint
from .httpkit import fetch
from .longterm import RoadAttributeProvider
from .roadnet import RoadGraph, generate_graph
from .shortterm import ShortTermConfig, ShortTermService
from .shortterm_api import LocalShortTerm, ShortTermServer
from .streamhub import HubConfig, HubServer

HEALTH_DEADLINE_S = 10.0


class ComponentFailure(RuntimeError):
    def __init__(self, component: str, detail: str = ""):
        super().__init__(f"component {component} failed to start: {detail}")
        self.component = component


@dataclass
class TopologyConfig:
    mode: str = "in_process"
    host: str = "127.0.0.1"
    balancer_port: int = 0
    collector_count: int = 6
    collector_ports: list[int] = field(default_factory=list)
    hub_port: int = 0
    hub_capacity: int = 65536
    hub_sndbuf: int | None = None
    keepalive_s: float = 15.0
    shortterm_port: int = 0
    rotation_period_ms: int = 30_000
    retention_ms: int = 3_600_000
    alert_retention_ms: int = 600_000
    advancement_threshold_m: float = 10.0
    feedback_rect_half_side_m: float = 500.0
    suppress_score_writes: bool = True
    max_batch: int = 100
    graph_file: str | None = None
    graph_center: tuple[float, float] = (37.39, -5.98)
    graph_radius_m: float = 3000.0
    graph_seed: int = 7
    snap_m: float = 50.0

    def __post_init__(self) -> None:
        if self.mode not in ("in_process", "multi_process"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.collector_count < 1:
            raise ValueError("need at least one collector")
        if self.collector_ports and len(self.collector_ports) != self.collector_count:
            raise ValueError("collector_ports length disagrees with collector_count")
        explicit = [p for p in ([self.balancer_port, self.hub_port, self.shortterm_port]
                                + list(self.collector_ports)) if p]
        if len(explicit) != len(set(explicit)):
            raise ValueError("port collision in topology config")

    @classmethod
    def from_dict(cls, obj: dict) -> "TopologyConfig":
        kwargs = dict(obj)
        if "graph_center" in kwargs:
            kwargs["graph_center"] = tuple(kwargs["graph_center"])
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "TopologyConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["graph_center"] = list(self.graph_center)
        return out

    def shortterm_config(self) -> ShortTermConfig:
        return ShortTermConfig(
            rotation_period_ms=self.rotation_period_ms,
            retention_ms=self.retention_ms,
            alert_retention_ms=self.alert_retention_ms,
            default_half_side_m=self.feedback_rect_half_side_m,
            advancement_threshold_m=self.advancement_threshold_m,
            suppress_score_writes=self.suppress_score_writes,
        )

    def collector_config(self, index: int) -> CollectorConfig:
        return CollectorConfig(
            advancement_threshold_m=self.advancement_threshold_m,
            feedback_rect_half_side_m=self.feedback_rect_half_side_m,
            max_batch=self.max_batch,
            name=f"collector_{index}",
        )

    def hub_config(self) -> HubConfig:
        return HubConfig(capacity=self.hub_capacity, keepalive_s=self.keepalive_s,
                         sndbuf=self.hub_sndbuf)

    def load_graph(self) -> RoadGraph:
        if self.graph_file:
            return RoadGraph.load(self.graph_file)
        return generate_graph(GeoPoint(*self.graph_center), self.graph_radius_m,
                              self.graph_seed)


class Topology:
    """Handle for a running deployment; shutdown is idempotent."""

    def __init__(self, config: TopologyConfig):
        self.config = config
        self.addresses: dict[str, tuple[str, int]] = {}
        self._closed = False
        # in_process members
        self.hub: HubServer | None = None
        self.shortterm: ShortTermService | None = None
        self.shortterm_server: ShortTermServer | None = None
        self.collectors: list[Collector] = []
        self.balancer: Balancer | None = None
        # multi_process members
        self.processes: list[tuple[str, asyncio.subprocess.Process]] = []
        self.run_dir: Path | None = None

    async def health(self) -> dict[str, bool]:
        out = {}
        for name, address in self.addresses.items():
            try:
                status, _ = await fetch(address, "GET", "/v1/health", timeout=3.0)
                out[name] = status == 200
            except Exception:
                out[name] = False
        return out

    async def healthy(self) -> bool:
        report = await self.health()
        return bool(report) and all(report.values())

    async def shutdown(self) -> None:
        if self._closed:
            return
        self._closed = True
        if self.balancer is not None:
            await self.balancer.close()
        for collector in self.collectors:
            await collector.close()
        if self.hub is not None:
            await self.hub.wait_drained(timeout=5.0)
            await self.hub.close()
        if self.shortterm_server is not None:
            await self.shortterm_server.close()
        for name, proc in reversed(self.processes):
            if proc.returncode is None:
                proc.terminate()
        for name, proc in self.processes:
            try:
                await asyncio.wait_for(proc.wait(), timeout=10.0)
            except asyncio.TimeoutError:
                proc.kill()
                await proc.wait()


async def _await_health(topology: Topology) -> None:
    deadline = time.monotonic() + HEALTH_DEADLINE_S
    pending = dict(topology.addresses)
    while pending and time.monotonic() < deadline:
        done = []
        for name, address in pending.items():
            try:
                status, _ = await fetch(address, "GET", "/v1/health", timeout=2.0)
                if status == 200:
                    done.append(name)
            except Exception:
                pass
        for name in done:
            del pending[name]
        if pending:
            await asyncio.sleep(0.1)
    if pending:
        failed = sorted(pending)
        await topology.shutdown()
        raise ComponentFailure(failed[0], f"unhealthy after {HEALTH_DEADLINE_S}s "
                                          f"(also pending: {failed[1:]})")


async def launch(config: TopologyConfig, run_dir: str | Path | None = None) -> Topology:
    if config.mode == "in_process":
        return await _launch_in_process(config)
    return await _launch_multi_process(config, run_dir)


async def _launch_in_process(config: TopologyConfig) -> Topology:
    topo = Topology(config)
    try:
        graph = config.load_graph()
        topo.shortterm = ShortTermService(config.shortterm_config(), now=now_ms())
        topo.shortterm_server = ShortTermServer(topo.shortterm)
        st_addr = await topo.shortterm_server.start(config.host, config.shortterm_port)
        topo.addresses["shortterm"] = st_addr

        topo.hub = HubServer(config.hub_config())
        hub_addr = await topo.hub.start(config.host, config.hub_port)
        topo.addresses["hub"] = hub_addr

        handle = LocalShortTerm(topo.shortterm)
        ports = config.collector_ports or [0] * config.collector_count
        for i in range(config.collector_count):
            collector = Collector(config.collector_config(i), handle, hub_addr,
                                  RoadAttributeProvider(graph, config.snap_m))
            addr = await collector.start(config.host, ports[i])
            topo.collectors.append(collector)
            topo.addresses[f"collector_{i}"] = addr

        topo.balancer = Balancer([c.address for c in topo.collectors])
        topo.addresses["balancer"] = await topo.balancer.start(
            config.host, config.balancer_port)
    except ComponentFailure:
        raise
    except Exception as exc:
        await topo.shutdown()
        raise ComponentFailure("launch", str(exc))
    await _await_health(topo)
    return topo


# -- multi-process deployment -------------------------------------------------

async def _spawn(topo: Topology, role: str, child_config: dict,
                 run_dir: Path) -> tuple[str, int]:
    config_path = run_dir / f"{role}.json"
    ports_path = run_dir / f"{role}.ports.json"
    if ports_path.exists():
        ports_path.unlink()
    config_path.write_text(json.dumps(child_config))
    log = open(run_dir / f"{role}.log", "ab")
    proc = await asyncio.create_subprocess_exec(
        sys.executable, "-m", "citystream.cli", "component",
        "--role", role.split("_")[0], "--config", str(config_path),
        "--ports-file", str(ports_path),
        stdout=log, stderr=log)
    log.close()
    topo.processes.append((role, proc))
    deadline = time.monotonic() + HEALTH_DEADLINE_S
    while time.monotonic() < deadline:
        if ports_path.exists():
            try:
                obj = json.loads(ports_path.read_text())
                return obj["host"], obj["port"]
            except (json.JSONDecodeError, KeyError):
                pass
        if proc.returncode is not None:
            await topo.shutdown()
            raise ComponentFailure(role, f"exited with {proc.returncode}, "
                                         f"see {run_dir / (role + '.log')}")
        await asyncio.sleep(0.05)
    await topo.shutdown()
    raise ComponentFailure(role, "did not report its address in time")


async def _launch_multi_process(config: TopologyConfig,
                                run_dir: str | Path | None) -> Topology:
    topo = Topology(config)
    topo.run_dir = Path(run_dir) if run_dir else Path(tempfile.mkdtemp(prefix="citystream-"))
    topo.run_dir.mkdir(parents=True, exist_ok=True)
    base = config.to_dict()

    if not config.graph_file:
        graph_path = topo.run_dir / "graph.json"
        config.load_graph().save(graph_path)
        base["graph_file"] = str(graph_path)

    hub_addr = await _spawn(topo, "hub", {**base, "port": config.hub_port}, topo.run_dir)
    topo.addresses["hub"] = hub_addr
    st_addr = await _spawn(topo, "shortterm", {**base, "port": config.shortterm_port},
                           topo.run_dir)
    topo.addresses["shortterm"] = st_addr
    collector_addrs = []
    ports = config.collector_ports or [0] * config.collector_count
    for i in range(config.collector_count):
        addr = await _spawn(topo, f"collector_{i}", {
            **base, "port": ports[i], "index": i,
            "hub_address": list(hub_addr), "shortterm_address": list(st_addr),
        }, topo.run_dir)
        topo.addresses[f"collector_{i}"] = addr
        collector_addrs.append(addr)
    balancer_addr = await _spawn(topo, "balancer", {
        **base, "port": config.balancer_port,
        "backends": [list(a) for a in collector_addrs],
    }, topo.run_dir)
    topo.addresses["balancer"] = balancer_addr
    await _await_health(topo)
    return topo


async def run_component(role: str, child_config: dict, ports_file: str) -> None:
    """Child-process entry: start one component, report its port, serve until
    terminated."""
    config = TopologyConfig.from_dict({k: v for k, v in child_config.items()
                                       if k in TopologyConfig.__dataclass_fields__})
    port = child_config.get("port", 0)
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGTERM, signal.SIGINT):
        loop.add_signal_handler(sig, stop.set)

    closers = []
    if role == "hub":
        server = HubServer(config.hub_config())
        address = await server.start(config.host, port)
        closers.append(server.close)
    elif role == "shortterm":
        service = ShortTermService(config.shortterm_config(), now=now_ms())
        server = ShortTermServer(service)
        address = await server.start(config.host, port)
        closers.append(server.close)
    elif role == "collector":
        from .shortterm_api import RemoteShortTerm
        index = child_config.get("index", 0)
        hub_addr = tuple(child_config["hub_address"])
        st_addr = tuple(child_config["shortterm_address"])
        handle = RemoteShortTerm(*st_addr)
        provider = RoadAttributeProvider(config.load_graph(), config.snap_m)
        collector = Collector(config.collector_config(index), handle, hub_addr, provider)
        address = await collector.start(config.host, port)
        closers.append(collector.close)
        closers.append(handle.close)
    elif role == "balancer":
        backends = [tuple(b) for b in child_config["backends"]]
        balancer = Balancer(backends, BalancerConfig())
        address = await balancer.start(config.host, port)
        closers.append(balancer.close)
    else:
        raise ValueError(f"unknown role {role!r}")

    Path(ports_file).write_text(json.dumps({"host": address[0], "port": address[1],
                                            "pid": os.getpid()}))
    await stop.wait()
    for close in closers:
        await close()
