"""Measurement plumbing: busy-time counters, named counters, mean/CI summaries,
least-squares fits, and the key,value metrics text format components expose
over GET /v1/metrics.
"""

from __future__ import annotations

import math
import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterable, Iterator


class BusyCounter:
    """Accumulates wall time spent inside instrumented code sections.

    Components wrap their synchronous processing segments (never awaits), so
    the total approximates CPU busy time attributable to the component even
    when several components share a process.
    """

    def __init__(self) -> None:
        self._busy = 0.0
        self._entries = 0

    @contextmanager
    def track(self) -> Iterator[None]:
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self._busy += time.perf_counter() - t0
            self._entries += 1

    @property
    def busy_seconds(self) -> float:
        return self._busy

    @property
    def entries(self) -> int:
        return self._entries


class Counters:
    """Named monotonic counters plus a busy-time counter, one per component."""

    def __init__(self) -> None:
        self.busy = BusyCounter()
        self._values: dict[str, float] = {}

    def inc(self, name: str, amount: float = 1) -> None:
        self._values[name] = self._values.get(name, 0) + amount

    def set(self, name: str, value: float) -> None:
        self._values[name] = value

    def get(self, name: str) -> float:
        return self._values.get(name, 0)

    def snapshot(self) -> dict[str, float]:
        out = dict(self._values)
        out["busy_seconds"] = self.busy.busy_seconds
        return out


@dataclass(frozen=True)
class MetricSummary:
    """Sample mean with a normal-approximation 95 % confidence interval.

    The interval is mean +/- 1.96 * stddev / sqrt(count); it is the intended
    estimator for count >= 30 and is reported as-is (flagged by count) below.
    """

    mean: float
    ci95_low: float
    ci95_high: float
    count: int

    @classmethod
    def from_samples(cls, samples: Iterable[float]) -> "MetricSummary":
        xs = list(samples)
        n = len(xs)
        if n == 0:
            return cls(math.nan, math.nan, math.nan, 0)
        mean = sum(xs) / n
        if n < 2:
            return cls(mean, mean, mean, n)
        var = sum((x - mean) ** 2 for x in xs) / (n - 1)
        half = 1.96 * math.sqrt(var / n)
        return cls(mean, mean - half, mean + half, n)

    @property
    def ci_width(self) -> float:
        return self.ci95_high - self.ci95_low


def linear_fit(xs: list[float], ys: list[float]) -> tuple[float, float, float]:
    """Least-squares line fit; returns (slope, intercept, r_squared)."""
    if len(xs) != len(ys) or len(xs) < 2:
        raise ValueError("need at least two paired points")
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    sxx = sum((x - mx) ** 2 for x in xs)
    if sxx == 0:
        raise ValueError("x values are all identical")
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    slope = sxy / sxx
    intercept = my - slope * mx
    ss_res = sum((y - (slope * x + intercept)) ** 2 for x, y in zip(xs, ys))
    ss_tot = sum((y - my) ** 2 for y in ys)
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return slope, intercept, r2


def render_metrics(values: dict[str, float]) -> bytes:
    """Serialize metrics as CSV 'key,value' lines."""
    lines = [f"{k},{values[k]}" for k in sorted(values)]
    return ("\n".join(lines) + "\n").encode()


def parse_metrics(data: bytes) -> dict[str, float]:
    out: dict[str, float] = {}
    for line in data.decode().splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition(",")
        out[key] = float(value)
    return out
