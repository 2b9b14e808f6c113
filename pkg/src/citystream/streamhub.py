"""Pub-sub stream hub: the main event stream and its filtered storage stream.

Admission is serialized through one point: every accepted event gets a gapless
sequence number, lands in a bounded ring, and is fanned out to per-subscriber
queues. Duplicate event ids are silently dropped. When the slowest active
subscriber falls more than the ring capacity behind, new batches are rejected
whole (reject-new backpressure) so that no already-admitted event a live
subscriber still needs can be evicted.

Subscriptions are held-open chunked HTTP responses of newline-delimited
events, resumable by sequence number, with '#keepalive' comment lines on idle.
"""

from __future__ import annotations

import asyncio
import json
from collections import OrderedDict, deque
from dataclasses import dataclass

from . import events as ev
from .httpkit import HttpServer, Request, Response, StreamResponse, serve
from .metrics import Counters

MAIN_STREAM = "main"
STORAGE_STREAM = "storage"


@dataclass
class HubConfig:
    capacity: int = 65536
    keepalive_s: float = 15.0
    # Event types the storage stream keeps; locations feed only the
    # real-time services and are filtered out by default.
    storage_types: tuple[str, ...] = ("driving_section", "abnormal_situation")
    # Optional small SO_SNDBUF for subscriber sockets so a paused consumer's
    # backpressure reaches the hub promptly (used by saturation experiments).
    sndbuf: int | None = None


class Saturated(Exception):
    """Raised when a publish would push the backlog past capacity."""


class _Subscriber:
    __slots__ = ("stream", "queue", "wakeup", "delivered_seq", "delivered_count")

    def __init__(self, stream: str, start_seq: int):
        self.stream = stream
        self.queue: deque[tuple[int, str, bytes]] = deque()
        self.wakeup = asyncio.Event()
        self.delivered_seq = start_seq
        self.delivered_count = 0


class StreamHub:
    """In-memory hub state; all mutation happens on the owning event loop."""

    def __init__(self, config: HubConfig | None = None):
        self.config = config or HubConfig()
        self.head_seq = 0
        self._ring: deque[tuple[int, str, bytes]] = deque()
        self._recent_ids: OrderedDict[str, int] = OrderedDict()
        self._subscribers: set[_Subscriber] = set()
        self.counters = Counters()

    # -- admission -----------------------------------------------------------

    def _backlog_after(self, new_events: int) -> int:
        if not self._subscribers:
            return 0
        slowest = min(s.delivered_seq for s in self._subscribers)
        return self.head_seq + new_events - slowest

    def publish(self, envelopes: list[tuple[str, str, bytes]]) -> tuple[int, int]:
        """Admit a decoded batch of (event_id, event_type, wire_line).

        Returns (accepted, duplicates); raises Saturated without admitting
        anything when the batch would overflow the pending backlog.
        """
        fresh = [e for e in envelopes if e[0] not in self._recent_ids]
        duplicates = len(envelopes) - len(fresh)
        if self._backlog_after(len(fresh)) > self.config.capacity:
            self.counters.inc("batches_rejected")
            self.counters.inc("events_rejected", len(envelopes))
            raise Saturated(f"backlog would exceed capacity {self.config.capacity}")
        for event_id, event_type, line in fresh:
            self.head_seq += 1
            entry = (self.head_seq, event_type, line)
            self._ring.append(entry)
            if len(self._ring) > self.config.capacity:
                self._ring.popleft()
            self._recent_ids[event_id] = self.head_seq
            while len(self._recent_ids) > 2 * self.config.capacity:
                self._recent_ids.popitem(last=False)
            if event_type in self.config.storage_types:
                self.counters.inc("storage_matched")
            for sub in self._subscribers:
                sub.queue.append(entry)
                sub.wakeup.set()
        self.counters.inc("events_admitted", len(fresh))
        self.counters.inc("duplicates_dropped", duplicates)
        return len(fresh), duplicates

    # -- subscriptions -------------------------------------------------------

    def oldest_retained(self) -> int:
        return self.head_seq - len(self._ring) + 1 if self._ring else self.head_seq + 1

    def attach(self, stream: str, from_seq: int | None) -> _Subscriber:
        """Register a subscriber, replaying ring contents after from_seq.

        Without from_seq the subscription is live-only (starts at the current
        head). Raises LookupError when from_seq falls outside the ring.
        """
        if from_seq is None:
            sub = _Subscriber(stream, self.head_seq)
        else:
            if from_seq > self.head_seq or from_seq < self.oldest_retained() - 1:
                raise LookupError(f"sequence {from_seq} no longer retained")
            sub = _Subscriber(stream, from_seq)
            for entry in self._ring:
                if entry[0] > from_seq:
                    sub.queue.append(entry)
            if sub.queue:
                sub.wakeup.set()
        self._subscribers.add(sub)
        self.counters.set("subscribers", len(self._subscribers))
        return sub

    def detach(self, sub: _Subscriber) -> None:
        self._subscribers.discard(sub)
        self.counters.set("subscribers", len(self._subscribers))

    def matches(self, stream: str, event_type: str) -> bool:
        return stream == MAIN_STREAM or event_type in self.config.storage_types

    def fully_drained(self) -> bool:
        return all(s.delivered_seq >= self.head_seq for s in self._subscribers)

    def metrics(self) -> dict[str, float]:
        snap = self.counters.snapshot()
        snap["head_seq"] = self.head_seq
        snap["ring_size"] = len(self._ring)
        return snap


class HubServer:
    """HTTP face of the hub: publish endpoint, stream endpoints, health, metrics."""

    def __init__(self, config: HubConfig | None = None):
        self.hub = StreamHub(config)
        self._server: HttpServer | None = None
        self.address: tuple[str, int] | None = None

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        self._server = HttpServer(self._handle, sndbuf=self.hub.config.sndbuf,
                                  counters=self.hub.counters)
        self.address = await self._server.start(host, port)
        return self.address

    async def close(self) -> None:
        if self._server is not None:
            await self._server.close()
            self._server = None

    async def wait_drained(self, timeout: float = 10.0) -> bool:
        deadline = asyncio.get_running_loop().time() + timeout
        while asyncio.get_running_loop().time() < deadline:
            if self.hub.fully_drained():
                return True
            await asyncio.sleep(0.05)
        return self.hub.fully_drained()

    async def _handle(self, req: Request) -> Response | StreamResponse:
        if req.method == "GET" and req.target == "/v1/health":
            return Response(200, b"ok", content_type="text/plain")
        if req.method == "GET" and req.target == "/v1/metrics":
            from .metrics import render_metrics
            return Response(200, render_metrics(self.hub.metrics()), content_type="text/csv")
        if req.method == "POST" and req.target == "/v1/publish":
            return self._handle_publish(req)
        if req.method == "GET" and req.target.startswith("/v1/streams/"):
            return self._handle_subscribe(req)
        return Response(404, b"unknown endpoint", content_type="text/plain")

    def _handle_publish(self, req: Request) -> Response:
        hub = self.hub
        with hub.counters.busy.track():
            try:
                envelopes = ev.decode_lines(req.body)
            except ev.ParseError as exc:
                return Response(400, json.dumps({"error": str(exc)}).encode())
            batch = [(e.event_id, e.event_type.value, ev.encode(e)) for e in envelopes]
            try:
                accepted, duplicates = hub.publish(batch)
            except Saturated:
                return Response(503, b'{"error":"saturated"}')
        return Response(200, json.dumps({"accepted": accepted,
                                         "duplicates": duplicates}).encode())

    def _handle_subscribe(self, req: Request) -> Response | StreamResponse:
        stream = req.target.rsplit("/", 1)[-1]
        if stream not in (MAIN_STREAM, STORAGE_STREAM):
            return Response(404, b'{"error":"unknown stream"}')
        from_seq: int | None = None
        if "from_seq" in req.query:
            try:
                from_seq = int(req.query["from_seq"])
            except ValueError:
                return Response(400, b'{"error":"from_seq must be an integer"}')
        try:
            sub = self.hub.attach(stream, from_seq)
        except LookupError:
            return Response(410, b'{"error":"sequence evicted, restart without from_seq"}')

        async def run(writer):
            hub = self.hub
            try:
                while True:
                    if not sub.queue:
                        sub.wakeup.clear()
                        try:
                            await asyncio.wait_for(sub.wakeup.wait(),
                                                   hub.config.keepalive_s)
                        except asyncio.TimeoutError:
                            await writer.write(b"#keepalive\n")
                            continue
                    seq, event_type, line = sub.queue.popleft()
                    if hub.matches(stream, event_type):
                        # The seq comment keeps resume well-defined even on
                        # filtered streams; event decoders skip comment lines.
                        await writer.write(line + b"\n#seq=%d\n" % seq)
                        sub.delivered_count += 1
                    sub.delivered_seq = seq
            except (ConnectionError, asyncio.IncompleteReadError, OSError):
                pass
            finally:
                hub.detach(sub)

        return StreamResponse(run)
