"""Benchmark harness: rate, utilization, and delay measurements over a running
topology, the multi-load experiment suite, and the saturation probe.

Per load level the suite launches a fresh in-process topology as a child
process, attaches main and storage transcript subscribers in this process,
runs the simulator as its own process against the balancer, polls every
component's self-reported busy time once a minute, then joins client, hub, and
transcript views of the run: conservation (nothing acknowledged may be
missing), per-event admission delays for a deterministic id sample, and
per-minute rates. Results land as CSV files, a summary JSON, and plots.
"""

from __future__ import annotations

import asyncio
import csv
import json
import sys
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from . import events as ev
from .geo import GeoPoint
from .httpkit import ClientConnection, fetch
from .metrics import Counters, MetricSummary, linear_fit, parse_metrics
from .roadnet import generate_graph, generate_paths, save_paths
from .topology import TopologyConfig

STORAGE_TYPES = ("driving_section", "abnormal_situation")


def in_delay_sample(event_id: str, rate: float) -> bool:
    """Deterministic uniform sampling keyed on the event id."""
    return (uuid.UUID(event_id).int & 0xFFFF) / 65536.0 < rate


def _os_cpu_source(pid: int):
    import psutil
    proc = psutil.Process(pid)

    def read() -> dict[str, float]:
        times = proc.cpu_times()
        return {"busy_seconds": times.user + times.system}
    return read


@dataclass
class TranscriptRecord:
    event_id: str
    event_type: str
    created_at: int
    accepted_at: int | None
    arrival_ms: int


class TranscriptSubscriber:
    """Drains one hub stream from before traffic starts until fully caught up."""

    def __init__(self, hub_address: tuple[str, int], stream: str):
        self.hub_address = hub_address
        self.stream = stream
        self.records: list[TranscriptRecord] = []
        self.last_seq = 0
        self.counters = Counters()
        self._conn: ClientConnection | None = None
        self._task: asyncio.Task | None = None

    async def start(self) -> "TranscriptSubscriber":
        self._conn = ClientConnection(*self.hub_address)
        status, _, lines, body = await self._conn.open_stream(
            f"/v1/streams/{self.stream}")
        if status != 200:
            raise RuntimeError(f"subscribe {self.stream} failed: {status} {body!r}")
        self._task = asyncio.ensure_future(self._pump(lines))
        return self

    async def _pump(self, lines) -> None:
        try:
            async for line in lines:
                if line.startswith(b"#seq="):
                    self.last_seq = int(line[5:])
                    continue
                if line.startswith(b"#"):
                    continue
                arrival = ev.now_ms()
                with self.counters.busy.track():
                    env = ev.decode(line)
                    self.records.append(TranscriptRecord(
                        env.event_id, env.event_type.value, env.created_at,
                        env.accepted_at, arrival))
        except (ConnectionError, asyncio.IncompleteReadError, OSError):
            pass

    async def wait_seq(self, target: int, timeout: float = 30.0) -> bool:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if self.last_seq >= target:
                return True
            await asyncio.sleep(0.05)
        return self.last_seq >= target

    async def wait_count(self, target: int, timeout: float = 30.0) -> bool:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if len(self.records) >= target:
                return True
            await asyncio.sleep(0.05)
        return len(self.records) >= target

    async def close(self) -> None:
        if self._task is not None:
            self._task.cancel()
            try:
                await self._task
            except asyncio.CancelledError:
                pass
        if self._conn is not None:
            await self._conn.close()


class MetricsPoller:
    """Samples each component's busy counter on a fixed cadence.

    utilization = busy-time delta / wall window, per the one-minute CPU
    accounting convention. extra_sources lets the bench add its own local
    counters (the storage transcript subscriber) to the same table, and
    os_pids adds OS process accounting (utime+stime via psutil) as an
    optional cross-check on the self-reported numbers.
    """

    def __init__(self, targets: dict[str, tuple[str, int]], interval_s: float = 60.0,
                 extra_sources: dict | None = None,
                 os_pids: dict[str, int] | None = None):
        self.targets = targets
        self.interval_s = interval_s
        self.extra_sources = dict(extra_sources or {})
        for name, pid in (os_pids or {}).items():
            self.extra_sources[f"{name}_os"] = _os_cpu_source(pid)
        self.samples: list[dict] = []
        self.raw_history: list[dict] = []
        self._last: dict[str, tuple[float, float]] = {}
        self._minute = 0
        self._task: asyncio.Task | None = None

    async def _read(self, name: str) -> dict[str, float] | None:
        if name in self.extra_sources:
            try:
                return self.extra_sources[name]()
            except Exception:
                return None
        try:
            status, body = await fetch(self.targets[name], "GET", "/v1/metrics",
                                       timeout=5.0)
            if status != 200:
                return None
            return parse_metrics(body)
        except Exception:
            return None

    async def poll(self) -> None:
        now = time.monotonic()
        for name in list(self.targets) + list(self.extra_sources):
            metrics = await self._read(name)
            if metrics is None:
                continue  # skipped and visible as a gap, per the sampling contract
            busy = metrics.get("busy_seconds", 0.0)
            prev = self._last.get(name)
            if prev is not None:
                prev_t, prev_busy = prev
                window = now - prev_t
                if window > 0:
                    self.samples.append({
                        "component": name, "minute": self._minute,
                        "utilization": (busy - prev_busy) / window,
                        "window_s": window,
                    })
            self._last[name] = (now, busy)
            self.raw_history.append({"t": now, "component": name, "metrics": metrics})
        self._minute += 1

    async def run(self) -> None:
        await self.poll()  # baseline
        while True:
            await asyncio.sleep(self.interval_s)
            await self.poll()

    def start(self) -> None:
        self._task = asyncio.ensure_future(self.run())

    async def stop(self) -> None:
        if self._task is not None:
            self._task.cancel()
            try:
                await self._task
            except asyncio.CancelledError:
                pass
        await self.poll()

    def mean_utilization(self, component_prefix: str) -> float:
        vals = [s["utilization"] for s in self.samples
                if s["component"].startswith(component_prefix)]
        return sum(vals) / len(vals) if vals else 0.0


@dataclass
class DelayRow:
    event_id: str
    event_type: str
    d_collector_ms: float
    d_storage_ms: float | None


@dataclass
class LoadLevelResult:
    n: int
    duration_s: float
    posts_total: int = 0
    ok_count: int = 0
    steady_post_rate: float = 0.0
    r_min: float = 0.0
    admitted: int = 0
    rejected_events: int = 0
    main_count: int = 0
    storage_count: int = 0
    lost: int = 0
    storage_exact: bool = False
    events_per_min_steady: float = 0.0
    collector_delay: MetricSummary | None = None
    storage_delay: MetricSummary | None = None
    delay_rows: list[DelayRow] = field(default_factory=list)
    utilization: dict[str, float] = field(default_factory=dict)
    utilization_samples: list[dict] = field(default_factory=list)
    minutes: list[dict] = field(default_factory=list)
    balancer_connections: int = 0
    aborted: bool = False
    saturated: bool = False

    def to_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items()
               if k not in ("delay_rows", "utilization_samples")}
        for key in ("collector_delay", "storage_delay"):
            summary = out[key]
            out[key] = None if summary is None else {
                "mean_ms": summary.mean, "ci95_low": summary.ci95_low,
                "ci95_high": summary.ci95_high, "count": summary.count}
        return out


async def _wait_ports_file(path: Path, proc, timeout: float = 20.0) -> dict:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if proc.returncode is not None:
            raise RuntimeError(f"child exited with {proc.returncode}")
        if path.exists():
            try:
                obj = json.loads(path.read_text())
                if obj:
                    return obj
            except json.JSONDecodeError:
                pass
        await asyncio.sleep(0.05)
    raise RuntimeError(f"no ports file at {path}")


async def _spawn_cli(args: list[str], log_path: Path):
    log = open(log_path, "ab")
    proc = await asyncio.create_subprocess_exec(
        sys.executable, "-m", "citystream.cli", *args, stdout=log, stderr=log)
    log.close()
    return proc


async def run_load_level(template: TopologyConfig, n: int, duration_s: float,
                         level_dir: Path, seed: int, paths: int,
                         graph_file: Path, sample_rate: float = 0.05,
                         time_scale: float = 1.0,
                         poll_interval_s: float = 60.0) -> LoadLevelResult:
    """One complete measured run at n drivers against a fresh topology."""
    level_dir.mkdir(parents=True, exist_ok=True)
    result = LoadLevelResult(n=n, duration_s=duration_s, r_min=n / 10.0)

    topo_cfg = TopologyConfig.from_dict({**template.to_dict(),
                                         "graph_file": str(graph_file)})
    cfg_path = level_dir / "topology.json"
    cfg_path.write_text(json.dumps(topo_cfg.to_dict(), indent=2))
    ports_path = level_dir / "city.ports.json"
    city = await _spawn_cli(["city", "up", "--config", str(cfg_path),
                             "--ports-file", str(ports_path)],
                            level_dir / "city.log")
    try:
        ports = await _wait_ports_file(ports_path, city)
        addresses = {name: tuple(addr) for name, addr in ports["addresses"].items()}
        hub_addr = addresses["hub"]
        balancer_addr = addresses["balancer"]

        main_sub = await TranscriptSubscriber(hub_addr, "main").start()
        storage_sub = await TranscriptSubscriber(hub_addr, "storage").start()
        os_pids = {"city_process": ports["pid"]} if "pid" in ports else {}
        poller = MetricsPoller(
            addresses, interval_s=poll_interval_s,
            extra_sources={"storage_subscriber": lambda: {
                "busy_seconds": storage_sub.counters.busy.busy_seconds}},
            os_pids=os_pids)
        await poller.poll()
        poller.start()

        center = topo_cfg.graph_center
        sim = await _spawn_cli([
            "simulate", "--drivers", str(n), "--paths", str(paths),
            "--center", f"{center[0]},{center[1]}",
            "--radius", str(topo_cfg.graph_radius_m), "--seed", str(seed),
            "--duration", str(duration_s),
            "--target", f"http://{balancer_addr[0]}:{balancer_addr[1]}",
            "--out", str(level_dir), "--graph", str(graph_file),
            "--time-scale", str(time_scale),
        ], level_dir / "simulate.log")
        sim_timeout = duration_s / time_scale + 180.0
        try:
            await asyncio.wait_for(sim.wait(), timeout=sim_timeout)
        except asyncio.TimeoutError:
            sim.kill()
            raise RuntimeError(f"simulator did not finish within {sim_timeout}s")

        # Drain: the hub's head defines what a complete transcript means.
        status, body = await fetch(hub_addr, "GET", "/v1/metrics")
        hub_metrics = parse_metrics(body)
        head = int(hub_metrics.get("head_seq", 0))
        await main_sub.wait_seq(head, timeout=60.0)
        expected_storage = [r.event_id for r in main_sub.records
                            if r.event_type in STORAGE_TYPES]
        await storage_sub.wait_count(len(expected_storage), timeout=60.0)
        try:
            _, body = await fetch(balancer_addr, "GET", "/v1/metrics")
            result.balancer_connections = int(
                parse_metrics(body).get("connections_total", 0))
        except Exception:
            pass  # an external proxy may not expose this endpoint
        await poller.stop()

        _assemble_result(result, level_dir, main_sub, storage_sub, hub_metrics,
                         poller, sample_rate, time_scale)
        await main_sub.close()
        await storage_sub.close()
    finally:
        if city.returncode is None:
            city.terminate()
            try:
                await asyncio.wait_for(city.wait(), timeout=15.0)
            except asyncio.TimeoutError:
                city.kill()
                await city.wait()
    _write_level_files(result, level_dir)
    return result


def _assemble_result(result: LoadLevelResult, level_dir: Path,
                     main_sub: TranscriptSubscriber,
                     storage_sub: TranscriptSubscriber,
                     hub_metrics: dict, poller: MetricsPoller,
                     sample_rate: float, time_scale: float) -> None:
    sim_summary = json.loads((level_dir / "summary.json").read_text())
    result.posts_total = sim_summary["posts"]
    result.ok_count = sim_summary["ok"]
    result.steady_post_rate = sim_summary["steady_post_rate_per_s"]
    result.aborted = sim_summary["aborted"]

    result.admitted = int(hub_metrics.get("events_admitted", 0))
    result.rejected_events = int(hub_metrics.get("events_rejected", 0))
    result.saturated = result.rejected_events > 0
    result.main_count = len(main_sub.records)
    result.storage_count = len(storage_sub.records)

    acked = set()
    with open(level_dir / "client_events.csv") as f:
        for row in csv.DictReader(f):
            if int(row["response_code"]) == 200:
                acked.add(row["event_id"])
    main_ids = [r.event_id for r in main_sub.records]
    result.lost = len(acked - set(main_ids))
    want_storage = [r.event_id for r in main_sub.records
                    if r.event_type in STORAGE_TYPES]
    result.storage_exact = [r.event_id for r in storage_sub.records] == want_storage

    # Steady-state main-stream rate: events created after every driver started.
    wall_start = sim_summary["wall_start_ms"]
    window_start = wall_start + 60_000 / time_scale
    window_end = wall_start + result.duration_s * 1000 / time_scale
    window_min = (window_end - window_start) / 60_000
    steady = [r for r in main_sub.records if window_start <= r.created_at <= window_end]
    result.events_per_min_steady = len(steady) / window_min if window_min > 0 else 0.0

    # Delay joins over the deterministic id sample.
    storage_arrival = {r.event_id: r.arrival_ms for r in storage_sub.records}
    collector_delays = []
    storage_delays = []
    for r in main_sub.records:
        if not in_delay_sample(r.event_id, sample_rate):
            continue
        if r.accepted_at is None:
            continue
        d_collector = r.accepted_at - r.created_at
        d_storage = None
        if r.event_id in storage_arrival:
            d_storage = storage_arrival[r.event_id] - r.created_at
            storage_delays.append(d_storage)
        collector_delays.append(d_collector)
        result.delay_rows.append(DelayRow(r.event_id, r.event_type,
                                          d_collector, d_storage))
    result.collector_delay = MetricSummary.from_samples(collector_delays)
    result.storage_delay = MetricSummary.from_samples(storage_delays)

    result.utilization_samples = list(poller.samples)
    for name in list(poller.targets) + list(poller.extra_sources):
        result.utilization[name] = poller.mean_utilization(name)
    collector_utils = [v for k, v in result.utilization.items()
                       if k.startswith("collector_")]
    if collector_utils:
        result.utilization["collectors_mean"] = sum(collector_utils) / len(collector_utils)
        result.utilization["collectors_sum"] = sum(collector_utils)

    # Per-minute rates from the transcripts and the client's rejections.
    rejected_by_minute: dict[int, int] = {}
    with open(level_dir / "client_events.csv") as f:
        for row in csv.DictReader(f):
            if int(row["response_code"]) == 503:
                minute = int((int(row["created_at"]) - wall_start) // 60_000)
                rejected_by_minute[minute] = rejected_by_minute.get(minute, 0) + 1
    minutes: dict[int, dict] = {}
    for r in main_sub.records:
        minute = int((r.arrival_ms - wall_start) // 60_000)
        row = minutes.setdefault(minute, {"minute": minute, "events_main": 0,
                                          "events_storage": 0, "rejected": 0})
        row["events_main"] += 1
        if r.event_type in STORAGE_TYPES:
            row["events_storage"] += 1
    for minute, count in rejected_by_minute.items():
        row = minutes.setdefault(minute, {"minute": minute, "events_main": 0,
                                          "events_storage": 0, "rejected": 0})
        row["rejected"] = count
    result.minutes = [minutes[m] for m in sorted(minutes)]


def _write_level_files(result: LoadLevelResult, level_dir: Path) -> None:
    with open(level_dir / "utilization.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["component", "minute", "utilization"])
        for s in result.utilization_samples:
            w.writerow([s["component"], s["minute"], f"{s['utilization']:.6f}"])
    with open(level_dir / "delays.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["event_id", "type", "d_collector_ms", "d_storage_ms"])
        for row in result.delay_rows:
            w.writerow([row.event_id, row.event_type, f"{row.d_collector_ms:.3f}",
                        "" if row.d_storage_ms is None else f"{row.d_storage_ms:.3f}"])
    with open(level_dir / "rates.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["minute", "events_main", "events_storage", "rejected"])
        for row in result.minutes:
            w.writerow([row["minute"], row["events_main"], row["events_storage"],
                        row["rejected"]])
    (level_dir / "level.json").write_text(json.dumps(result.to_dict(), indent=2))


@dataclass
class SuiteReport:
    levels: list[LoadLevelResult]
    rate_slope: float = 0.0
    rate_intercept: float = 0.0
    rate_r2: float = 0.0
    hub_util_slope: float = 0.0
    hub_util_r2: float = 0.0
    first_saturated: int | None = None
    util_ordering: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "levels": [lv.to_dict() for lv in self.levels],
            "rate_slope_events_per_min_per_driver": self.rate_slope,
            "rate_intercept": self.rate_intercept,
            "rate_r2": self.rate_r2,
            "hub_util_slope": self.hub_util_slope,
            "hub_util_r2": self.hub_util_r2,
            "first_saturated_load": self.first_saturated,
            "utilization_ordering": self.util_ordering,
        }


async def run_suite(loads: list[int], duration_s: float, out_dir: str | Path,
                    template: TopologyConfig | None = None, seed: int = 7,
                    paths: int = 20, sample_rate: float = 0.05,
                    time_scale: float = 1.0,
                    poll_interval_s: float = 60.0) -> SuiteReport:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    template = template or TopologyConfig()

    graph_file = out / "graph.json"
    graph = generate_graph(GeoPoint(*template.graph_center),
                           template.graph_radius_m, template.graph_seed)
    graph.save(graph_file)
    save_paths(generate_paths(graph, paths, seed), out / "paths.json")

    levels: list[LoadLevelResult] = []
    for n in loads:
        level_dir = out / f"load_{n:04d}"
        try:
            levels.append(await run_load_level(
                template, n, duration_s, level_dir, seed, paths, graph_file,
                sample_rate, time_scale, poll_interval_s))
        except Exception as exc:
            # Abort this level cleanly; earlier levels' data stays intact.
            (level_dir / "failed.txt").write_text(str(exc))
            failed = LoadLevelResult(n=n, duration_s=duration_s, aborted=True)
            levels.append(failed)
    report = SuiteReport(levels=levels)

    complete = [lv for lv in levels if not lv.aborted]
    if len(complete) >= 2:
        xs = [float(lv.n) for lv in complete]
        report.rate_slope, report.rate_intercept, report.rate_r2 = linear_fit(
            xs, [lv.events_per_min_steady for lv in complete])
        rates = [lv.events_per_min_steady / 60.0 for lv in complete]
        utils = [lv.utilization.get("hub", 0.0) for lv in complete]
        report.hub_util_slope, _, report.hub_util_r2 = linear_fit(rates, utils)
    for lv in levels:
        if lv.saturated and report.first_saturated is None:
            report.first_saturated = lv.n

    if complete:
        ordering_keys = ["collectors_mean", "shortterm", "hub",
                         "storage_subscriber", "balancer"]
        means = {k: sum(lv.utilization.get(k, 0.0) for lv in complete) / len(complete)
                 for k in ordering_keys}
        report.util_ordering = sorted(means, key=lambda k: -means[k])

    (out / "suite.json").write_text(json.dumps(report.to_dict(), indent=2))
    write_suite_csvs(report, out)
    try:
        plot_suite(out)
    except Exception as exc:  # plotting must never sink a finished run
        (out / "plots_failed.txt").write_text(str(exc))
    return report


def write_suite_csvs(report: SuiteReport, out: Path) -> None:
    # Per-run files with the canonical schemas live in each load_NNNN dir;
    # these *_by_load files hold the cross-load comparison the plots use.
    with open(out / "rates_by_load.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["n", "events_per_min_steady", "post_rate_per_s", "r_min",
                    "rejected", "lost"])
        for lv in report.levels:
            w.writerow([lv.n, f"{lv.events_per_min_steady:.2f}",
                        f"{lv.steady_post_rate:.3f}", lv.r_min,
                        lv.rejected_events, lv.lost])
    with open(out / "utilization_by_load.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["n", "component", "utilization"])
        for lv in report.levels:
            for component, util in sorted(lv.utilization.items()):
                w.writerow([lv.n, component, f"{util:.6f}"])
    with open(out / "delays_by_load.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["n", "mean_collector_ms", "ci_low", "ci_high",
                    "mean_storage_ms", "storage_ci_low", "storage_ci_high", "count"])
        for lv in report.levels:
            c, s = lv.collector_delay, lv.storage_delay
            if c is None:
                continue
            w.writerow([lv.n, f"{c.mean:.3f}", f"{c.ci95_low:.3f}", f"{c.ci95_high:.3f}",
                        f"{s.mean:.3f}" if s and s.count else "",
                        f"{s.ci95_low:.3f}" if s and s.count else "",
                        f"{s.ci95_high:.3f}" if s and s.count else "", c.count])


def plot_suite(out_dir: str | Path) -> list[Path]:
    """Render the comparison plots from the suite CSV files."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    made = []

    ns, rates = [], []
    with open(out / "rates_by_load.csv") as f:
        for row in csv.DictReader(f):
            ns.append(int(row["n"]))
            rates.append(float(row["events_per_min_steady"]))
    fig, ax = plt.subplots()
    ax.plot(ns, rates, "o-")
    ax.set_xlabel("drivers")
    ax.set_ylabel("main-stream events per minute")
    ax.set_title("Event rate vs number of clients")
    fig.savefig(out / "rate_vs_n.png", dpi=120)
    plt.close(fig)
    made.append(out / "rate_vs_n.png")

    series: dict[str, list[tuple[int, float]]] = {}
    with open(out / "utilization_by_load.csv") as f:
        for row in csv.DictReader(f):
            series.setdefault(row["component"], []).append(
                (int(row["n"]), float(row["utilization"])))
    fig, ax = plt.subplots()
    for component, points in sorted(series.items()):
        if component.startswith("collector_"):
            continue  # individual replicas stay in the CSV; plot the mean
        points.sort()
        ax.plot([p[0] for p in points], [p[1] for p in points], "o-", label=component)
    ax.set_xlabel("drivers")
    ax.set_ylabel("utilization (busy s per s)")
    ax.set_title("Component utilization vs load")
    ax.legend(fontsize=7)
    fig.savefig(out / "utilization_vs_n.png", dpi=120)
    plt.close(fig)
    made.append(out / "utilization_vs_n.png")

    rows = []
    with open(out / "delays_by_load.csv") as f:
        rows = list(csv.DictReader(f))
    if rows:
        fig, ax = plt.subplots()
        ns = [int(r["n"]) for r in rows]
        means = [float(r["mean_collector_ms"]) for r in rows]
        err_low = [m - float(r["ci_low"]) for m, r in zip(means, rows)]
        err_high = [float(r["ci_high"]) - m for m, r in zip(means, rows)]
        ax.errorbar(ns, means, yerr=[err_low, err_high], fmt="o-",
                    capsize=4, label="collector admission")
        st = [(int(r["n"]), float(r["mean_storage_ms"]))
              for r in rows if r["mean_storage_ms"]]
        if st:
            ax.plot([p[0] for p in st], [p[1] for p in st], "s--",
                    label="storage stream")
        ax.set_xlabel("drivers")
        ax.set_ylabel("mean delay (ms, 95% CI)")
        ax.set_title("Event delays vs load")
        ax.legend()
        fig.savefig(out / "delay_vs_n.png", dpi=120)
        plt.close(fig)
        made.append(out / "delay_vs_n.png")
    return made


def _probe_event(i: int) -> ev.EventEnvelope:
    now = ev.now_ms()
    return ev.EventEnvelope(
        event_id=str(uuid.uuid4()),
        source_id=f"probe-{i % 7}",
        event_type=ev.EventType.ABNORMAL_SITUATION,
        created_at=now,
        body=ev.AbnormalSituation(timestamp=now, latitude=37.39, longitude=-5.98,
                                  kind=ev.AbnormalKind.HIGH_SPEED, magnitude=80.0),
    )


async def run_saturation_probe(capacity: int = 512, post_events: int = 1500,
                               out_dir: str | Path | None = None) -> dict:
    """Forced-saturation probe: a paused storage subscriber must drive the hub
    to reject-new, collectors must answer 503, and a resume must recover every
    acknowledged event.
    """
    from .topology import launch

    config = TopologyConfig(collector_count=2, hub_capacity=capacity,
                            hub_sndbuf=8192, graph_radius_m=1500)
    topo = await launch(config)
    outcome = {"saturated_503s": 0, "acked": 0, "received": 0, "lost": -1,
               "recovered_after_resume": False}
    try:
        hub_addr = topo.addresses["hub"]
        balancer_addr = topo.addresses["balancer"]

        # Paused consumer: tiny receive buffer, then simply stop reading.
        paused = ClientConnection(*hub_addr, rcvbuf=4096)
        status, _, lines, _ = await paused.open_stream("/v1/streams/storage")
        if status != 200:
            raise RuntimeError(f"storage subscribe failed: {status}")

        acked: list[str] = []
        rejected = 0
        conn = ClientConnection(*balancer_addr)
        try:
            for i in range(post_events):
                env = _probe_event(i)
                code, _, _ = await conn.request("POST", "/v1/events",
                                                ev.encode_batch([env]))
                if code == 200:
                    acked.append(env.event_id)
                elif code == 503:
                    rejected += 1
                    if rejected >= 30:
                        break
            outcome["saturated_503s"] = rejected
            outcome["acked"] = len(acked)
            _, body = await fetch(hub_addr, "GET", "/v1/metrics")
            outcome["hub_rejected_events"] = int(
                parse_metrics(body).get("events_rejected", 0))

            # Resume: read everything the paused subscription piled up.
            received: set[str] = set()
            want = set(acked)

            async def drain():
                async for line in lines:
                    if line.startswith(b"#"):
                        continue
                    received.add(ev.decode(line).event_id)
                    if want <= received:
                        return
            try:
                await asyncio.wait_for(drain(), timeout=60.0)
            except asyncio.TimeoutError:
                pass
            outcome["received"] = len(received & want)
            outcome["lost"] = len(want - received)

            # Publishing must work again once the backlog cleared.
            env = _probe_event(post_events)
            code, _, _ = await conn.request("POST", "/v1/events",
                                            ev.encode_batch([env]))
            outcome["recovered_after_resume"] = code == 200
        finally:
            await conn.close()
            await paused.close()
    finally:
        await topo.shutdown()
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "saturation.json").write_text(json.dumps(outcome, indent=2))
    return outcome
