"""Ingestion tier: validates posted events, forwards them to the stream hub,
and answers Vehicle Location posts with driver feedback.

Batches are all-or-nothing: one invalid event fails the whole POST with a
per-event error report and nothing is forwarded. Events only earn a 200 after
the hub has admitted them, so an acknowledged event is on the main stream
exactly once. Feedback assembly degrades gracefully: a failing sub-service
drops its field rather than the response.
"""

from __future__ import annotations

import asyncio
import json
import time
from dataclasses import dataclass, field

from . import events as ev
from .geo import GeoPoint
from .httpkit import ClientConnection, HttpServer, Request, Response
from .longterm import RoadAttributeProvider, RoadAttributes
from .metrics import Counters, render_metrics


@dataclass
class CollectorConfig:
    advancement_threshold_m: float = 10.0
    feedback_rect_half_side_m: float = 500.0
    max_batch: int = 100
    name: str = "collector"
    validation: ev.ValidationConfig = field(default_factory=ev.ValidationConfig)


class Collector:
    """One collector replica: HTTP handler plus its per-replica caches."""

    def __init__(self, config: CollectorConfig, shortterm, hub_address: tuple[str, int],
                 road_provider: RoadAttributeProvider | None = None):
        self.config = config
        self.shortterm = shortterm
        self.road_provider = road_provider
        self.counters = Counters()
        # driver -> (point where attributes were resolved, attributes-or-None)
        self.attr_cache: dict[str, tuple[GeoPoint, RoadAttributes | None]] = {}
        self._hub = ClientConnection(*hub_address)
        self._server: HttpServer | None = None
        self.address: tuple[str, int] | None = None

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        self._server = HttpServer(self.handle, counters=self.counters)
        self.address = await self._server.start(host, port)
        return self.address

    async def close(self) -> None:
        if self._server is not None:
            await self._server.close()
            self._server = None
        await self._hub.close()

    # -- request handling ------------------------------------------------

    async def handle(self, req: Request) -> Response:
        if req.method == "GET" and req.target == "/v1/health":
            return Response(200, b"ok", content_type="text/plain")
        if req.method == "GET" and req.target == "/v1/metrics":
            return Response(200, render_metrics(self.metrics()), content_type="text/csv")
        if req.method == "POST" and req.target == "/v1/events":
            t0 = time.perf_counter()
            resp = await self.handle_post(req.body)
            elapsed_ms = (time.perf_counter() - t0) * 1000.0
            self.counters.inc("feedback_latency_ms_sum", elapsed_ms)
            self.counters.inc("requests_total")
            return resp
        return Response(404, b"unknown endpoint", content_type="text/plain")

    async def handle_post(self, body: bytes) -> Response:
        now = ev.now_ms()
        with self.counters.busy.track():
            try:
                batch = ev.decode_lines(body)
            except ev.ParseError as exc:
                self.counters.inc("batches_rejected_parse")
                return Response(400, json.dumps({"error": f"parse: {exc}"}).encode())
            if not batch:
                return Response(400, b'{"error":"empty batch"}')
            if len(batch) > self.config.max_batch:
                self.counters.inc("batches_rejected_oversize")
                return Response(413, json.dumps(
                    {"error": f"batch of {len(batch)} exceeds {self.config.max_batch}"}).encode())

            errors = []
            for i, env in enumerate(batch):
                try:
                    ev.validate(env, clock_ms=now, config=self.config.validation)
                except ev.ValidationError as exc:
                    errors.append({"index": i, "event_id": env.event_id,
                                   "code": exc.code, "error": str(exc)})
            if errors:
                self.counters.inc("events_rejected_validation", len(errors))
                return Response(400, json.dumps({"errors": errors}).encode())

            # The admission stamp sits after validation: the interval from
            # created_at to accepted_at covers the event being fully
            # processed and accepted here, not merely received.
            admitted_at = ev.now_ms()
            stamped = [env if env.accepted_at is not None
                       else env.with_accepted_at(admitted_at)
                       for env in batch]
            forward = ev.encode_batch(stamped)

        status = await self._publish(forward)
        if status == 503:
            self.counters.inc("events_rejected_saturated", len(stamped))
            return Response(503, b'{"error":"saturated"}')
        if status != 200:
            return Response(503, json.dumps({"error": f"hub returned {status}"}).encode())
        self.counters.inc("events_accepted", len(stamped))

        feedback = await self._apply_and_build_feedback(stamped, now)
        if feedback is None:
            return Response(200, b"")
        return Response(200, ev.encode_feedback(feedback))

    async def _publish(self, body: bytes) -> int:
        # A failed exchange closes the connection internally; one retry covers
        # a stale keep-alive. Duplicate suppression at the hub keeps a retry
        # of an already-admitted batch exactly-once.
        for attempt in (0, 1):
            try:
                status, _, _ = await self._hub.request("POST", "/v1/publish", body,
                                                       timeout=10.0)
                return status
            except Exception:
                if attempt == 1:
                    self.counters.inc("hub_unreachable")
                    return 503
        return 503

    # -- feedback ----------------------------------------------------------

    async def _apply_and_build_feedback(self, batch: list[ev.EventEnvelope],
                                        now: int) -> ev.FeedbackResponse | None:
        for env in batch:
            if env.event_type == ev.EventType.ABNORMAL_SITUATION:
                try:
                    await self.shortterm.abnormal(env.body, now)
                except Exception:
                    self.counters.inc("shortterm_errors")

        locations = []
        newest = None
        newest_key = None
        for i, env in enumerate(batch):
            if env.event_type == ev.EventType.VEHICLE_LOCATION:
                locations.append(env)
                if newest_key is None or (env.created_at, i) > newest_key:
                    newest, newest_key = env, (env.created_at, i)
        if not locations:
            return None
        feedback = ev.FeedbackResponse()
        for env in locations:
            body = env.body
            point = GeoPoint(body.latitude, body.longitude)
            try:
                if env is newest:
                    bundle = await self.shortterm.feedback(
                        env.source_id, point, body.driving_score, now,
                        self.config.feedback_rect_half_side_m)
                    advanced = bundle.advanced
                    feedback = ev.FeedbackResponse(
                        traffic_alerts=tuple(bundle.alerts),
                        nearby_scores=tuple(
                            ev.NearbyScore(d, s, p.latitude, p.longitude)
                            for d, s, p in bundle.nearby),
                    )
                else:
                    advanced = await self.shortterm.observe(
                        env.source_id, point, body.driving_score, now)
            except Exception:
                self.counters.inc("shortterm_errors")
                advanced = True  # without the store's verdict, assume movement
            if advanced:
                self.counters.inc("advanced_true")
            attrs = self._road_attributes(env.source_id, point, advanced)
            if env is newest and attrs is not None:
                feedback = ev.FeedbackResponse(
                    road_type=attrs.road_type,
                    speed_limit=attrs.speed_limit,
                    recommended_speed=attrs.recommended_speed,
                    traffic_alerts=feedback.traffic_alerts,
                    nearby_scores=feedback.nearby_scores,
                )
        self.counters.inc("feedback_built")
        return feedback

    def _road_attributes(self, driver_id: str, point: GeoPoint,
                         advanced: bool) -> RoadAttributes | None:
        """Resolve road attributes, honoring the advancement rule.

        A driver that moved less than the threshold reuses the cached answer;
        everyone else (and cold caches) queries the provider.
        """
        cached = self.attr_cache.get(driver_id)
        if not advanced and cached is not None:
            self.counters.inc("attr_cache_hits")
            return cached[1]
        if self.road_provider is None:
            return None
        with self.counters.busy.track():
            try:
                attrs = self.road_provider.road_attributes(point)
            except Exception:
                self.counters.inc("stub_errors")
                return cached[1] if cached else None
            self.counters.inc("stub_lookups")
            self.attr_cache[driver_id] = (point, attrs)
            return attrs

    def metrics(self) -> dict[str, float]:
        snap = self.counters.snapshot()
        snap["attr_cache_size"] = len(self.attr_cache)
        if self.road_provider is not None:
            snap["provider_lookups"] = self.road_provider.lookups
        return snap
