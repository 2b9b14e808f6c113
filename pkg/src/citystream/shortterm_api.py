"""Local and HTTP access paths to the shared short-term service.

Collectors in the same process call the service directly; collectors in other
processes reach the same instance over a one-round-trip JSON API. Both paths
expose the identical three operations used during feedback assembly.
"""

from __future__ import annotations

import asyncio
import json

from .events import AbnormalKind, AbnormalSituation, now_ms
from .geo import GeoPoint
from .httpkit import ClientConnection, HttpServer, Request, Response
from .metrics import render_metrics
from .shortterm import FeedbackBundle, ShortTermService


class LocalShortTerm:
    """Direct in-process handle; operations are atomic on the shared loop."""

    def __init__(self, service: ShortTermService):
        self.service = service

    async def observe(self, driver_id: str, point: GeoPoint, score: float,
                      now: int) -> bool:
        return self.service.observe_location(driver_id, point, score, now)

    async def feedback(self, driver_id: str, point: GeoPoint, score: float,
                       now: int, half_side: float) -> FeedbackBundle:
        return self.service.feedback_bundle(driver_id, point, score, now, half_side)

    async def abnormal(self, event: AbnormalSituation, now: int) -> None:
        self.service.record_abnormal(event, now)


class RemoteShortTerm:
    """HTTP client adapter for collectors deployed in separate processes."""

    def __init__(self, host: str, port: int):
        self._conn = ClientConnection(host, port)

    async def observe(self, driver_id: str, point: GeoPoint, score: float,
                      now: int) -> bool:
        body = json.dumps({"driver_id": driver_id, "lat": point.latitude,
                           "lon": point.longitude, "score": score, "now": now}).encode()
        status, _, payload = await self._conn.request("POST", "/v1/st/observe", body)
        if status != 200:
            raise RuntimeError(f"shortterm observe failed: {status}")
        return json.loads(payload)["advanced"]

    async def feedback(self, driver_id: str, point: GeoPoint, score: float,
                       now: int, half_side: float) -> FeedbackBundle:
        body = json.dumps({"driver_id": driver_id, "lat": point.latitude,
                           "lon": point.longitude, "score": score, "now": now,
                           "half_side": half_side}).encode()
        status, _, payload = await self._conn.request("POST", "/v1/st/feedback", body)
        if status != 200:
            raise RuntimeError(f"shortterm feedback failed: {status}")
        obj = json.loads(payload)
        from .events import TrafficAlert
        return FeedbackBundle(
            advanced=obj["advanced"],
            nearby=[(d, s, GeoPoint(la, lo)) for d, s, la, lo in obj["nearby"]],
            alerts=[TrafficAlert(k, la, lo, ts) for k, la, lo, ts in obj["alerts"]],
        )

    async def abnormal(self, event: AbnormalSituation, now: int) -> None:
        body = json.dumps({"kind": event.kind.value, "lat": event.latitude,
                           "lon": event.longitude, "timestamp": event.timestamp,
                           "magnitude": event.magnitude, "now": now}).encode()
        status, _, _ = await self._conn.request("POST", "/v1/st/abnormal", body)
        if status != 200:
            raise RuntimeError(f"shortterm abnormal failed: {status}")

    async def close(self) -> None:
        await self._conn.close()


class ShortTermServer:
    """HTTP face of one ShortTermService instance, with its maintenance loop."""

    def __init__(self, service: ShortTermService, maintenance_interval_s: float = 1.0):
        self.service = service
        self._interval = maintenance_interval_s
        self._server: HttpServer | None = None
        self._maintenance: asyncio.Task | None = None
        self.address: tuple[str, int] | None = None

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        self._server = HttpServer(self._handle, counters=self.service.counters)
        self.address = await self._server.start(host, port)
        self._maintenance = asyncio.ensure_future(self._run_maintenance())
        return self.address

    async def close(self) -> None:
        if self._maintenance is not None:
            self._maintenance.cancel()
            try:
                await self._maintenance
            except asyncio.CancelledError:
                pass
            self._maintenance = None
        if self._server is not None:
            await self._server.close()
            self._server = None

    async def _run_maintenance(self) -> None:
        while True:
            await asyncio.sleep(self._interval)
            self.service.maintenance(now_ms())

    async def _handle(self, req: Request) -> Response:
        if req.method == "GET" and req.target == "/v1/health":
            return Response(200, b"ok", content_type="text/plain")
        if req.method == "GET" and req.target == "/v1/metrics":
            return Response(200, render_metrics(self.service.metrics()),
                            content_type="text/csv")
        if req.method != "POST":
            return Response(404, b"unknown endpoint", content_type="text/plain")
        try:
            obj = json.loads(req.body.decode())
            if req.target == "/v1/st/observe":
                advanced = self.service.observe_location(
                    obj["driver_id"], GeoPoint(obj["lat"], obj["lon"]),
                    obj["score"], obj["now"])
                return Response(200, json.dumps({"advanced": advanced}).encode())
            if req.target == "/v1/st/feedback":
                bundle = self.service.feedback_bundle(
                    obj["driver_id"], GeoPoint(obj["lat"], obj["lon"]),
                    obj["score"], obj["now"], obj.get("half_side"))
                return Response(200, json.dumps({
                    "advanced": bundle.advanced,
                    "nearby": [[d, s, p.latitude, p.longitude]
                               for d, s, p in bundle.nearby],
                    "alerts": [list(a) for a in bundle.alerts],
                }).encode())
            if req.target == "/v1/st/abnormal":
                event = AbnormalSituation(
                    timestamp=obj["timestamp"], latitude=obj["lat"], longitude=obj["lon"],
                    kind=AbnormalKind(obj["kind"]), magnitude=obj["magnitude"])
                self.service.record_abnormal(event, obj["now"])
                return Response(200, b"{}")
        except (KeyError, ValueError, TypeError) as exc:
            return Response(400, json.dumps({"error": str(exc)}).encode())
        return Response(404, b"unknown endpoint", content_type="text/plain")
