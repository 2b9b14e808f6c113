"""Connection-level round-robin proxy in front of the collector replicas.

Affinity is per connection: a client keeps its backend for the connection's
whole life, matching one-driver-one-connection traffic. Routing retries the
next backend on connect failure, so a dead replica costs clients nothing;
three consecutive connect failures mark a backend unhealthy until a 5 s probe
revives it. The proxy never parses traffic beyond peeking at the first request
line of a new connection, which lets it answer its own /v1/metrics and
/v1/health locally.
"""

from __future__ import annotations

import asyncio
import time
from dataclasses import dataclass

from .metrics import Counters, render_metrics

_PIPE_CHUNK = 65536


@dataclass
class BalancerConfig:
    unhealthy_after: int = 3
    probe_interval_s: float = 5.0
    connect_timeout_s: float = 2.0
    idle_peek_timeout_s: float = 30.0


class Backend:
    def __init__(self, host: str, port: int):
        self.host = host
        self.port = port
        self.healthy = True
        self.consecutive_failures = 0
        self.connections_assigned = 0
        self.live_connections = 0
        self.connect_failures = 0

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"


class Balancer:
    def __init__(self, backends: list[tuple[str, int]],
                 config: BalancerConfig | None = None):
        if not backends:
            raise ValueError("balancer needs at least one backend")
        self.config = config or BalancerConfig()
        self.backends = [Backend(h, p) for h, p in backends]
        self.counters = Counters()
        self._cursor = 0
        self._server: asyncio.AbstractServer | None = None
        self._probe_task: asyncio.Task | None = None
        self._conns: set[asyncio.Task] = set()
        self.address: tuple[str, int] | None = None

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        self._server = await asyncio.start_server(self._on_connect, host, port)
        self.address = self._server.sockets[0].getsockname()[:2]
        self._probe_task = asyncio.ensure_future(self._probe_loop())
        return self.address

    async def close(self) -> None:
        if self._probe_task is not None:
            self._probe_task.cancel()
            try:
                await self._probe_task
            except asyncio.CancelledError:
                pass
            self._probe_task = None
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None
        for task in list(self._conns):
            task.cancel()
        if self._conns:
            await asyncio.gather(*self._conns, return_exceptions=True)

    # -- routing ---------------------------------------------------------

    def _note_failure(self, backend: Backend) -> None:
        backend.connect_failures += 1
        backend.consecutive_failures += 1
        if backend.consecutive_failures >= self.config.unhealthy_after:
            backend.healthy = False

    def _note_success(self, backend: Backend) -> None:
        backend.consecutive_failures = 0
        backend.healthy = True

    async def _connect_some_backend(self):
        """Round-robin over healthy backends, retrying on connect failure.

        Falls back to trying unhealthy ones only when no healthy backend is
        left. Returns (backend, reader, writer) or None.
        """
        for only_healthy in (True, False):
            pool = [b for b in self.backends if b.healthy or not only_healthy]
            for _ in range(len(pool)):
                backend = self.backends[self._cursor % len(self.backends)]
                self._cursor += 1
                if only_healthy and not backend.healthy:
                    continue
                try:
                    reader, writer = await asyncio.wait_for(
                        asyncio.open_connection(backend.host, backend.port),
                        self.config.connect_timeout_s)
                    self._note_success(backend)
                    return backend, reader, writer
                except (ConnectionError, OSError, asyncio.TimeoutError):
                    self._note_failure(backend)
            if not only_healthy:
                break
        return None

    async def _probe_loop(self) -> None:
        while True:
            await asyncio.sleep(self.config.probe_interval_s)
            for backend in self.backends:
                try:
                    _, writer = await asyncio.wait_for(
                        asyncio.open_connection(backend.host, backend.port),
                        self.config.connect_timeout_s)
                    writer.close()
                    self._note_success(backend)
                except (ConnectionError, OSError, asyncio.TimeoutError):
                    self._note_failure(backend)

    # -- connection handling ----------------------------------------------

    def _on_connect(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        task = asyncio.ensure_future(self._handle(reader, writer))
        self._conns.add(task)
        task.add_done_callback(self._conns.discard)

    async def _handle(self, client_reader: asyncio.StreamReader,
                      client_writer: asyncio.StreamWriter) -> None:
        try:
            try:
                first_line = await asyncio.wait_for(
                    client_reader.readline(), self.config.idle_peek_timeout_s)
            except asyncio.TimeoutError:
                return
            if not first_line:
                return
            if first_line.startswith(b"GET /v1/metrics") or \
                    first_line.startswith(b"GET /v1/health"):
                await self._serve_local(first_line, client_reader, client_writer)
                return
            with self.counters.busy.track():
                self.counters.inc("connections_total")
            picked = await self._connect_some_backend()
            if picked is None:
                self.counters.inc("connections_refused")
                body = b"no healthy backend"
                client_writer.write(
                    b"HTTP/1.1 502 Bad Gateway\r\nContent-Length: %d\r\n"
                    b"Connection: close\r\n\r\n%s" % (len(body), body))
                await client_writer.drain()
                return
            backend, backend_reader, backend_writer = picked
            backend.connections_assigned += 1
            backend.live_connections += 1
            try:
                backend_writer.write(first_line)
                await backend_writer.drain()
                up = asyncio.ensure_future(_pipe(client_reader, backend_writer))
                down = asyncio.ensure_future(_pipe(backend_reader, client_writer))
                done, pending = await asyncio.wait({up, down},
                                                   return_when=asyncio.FIRST_COMPLETED)
                for t in pending:
                    t.cancel()
                await asyncio.gather(*pending, return_exceptions=True)
            finally:
                backend.live_connections -= 1
                backend_writer.close()
                try:
                    await backend_writer.wait_closed()
                except (ConnectionError, OSError):
                    pass
        except asyncio.CancelledError:
            raise
        except (ConnectionError, OSError):
            pass
        finally:
            client_writer.close()
            try:
                await client_writer.wait_closed()
            except (ConnectionError, OSError):
                pass

    async def _serve_local(self, first_line: bytes, reader: asyncio.StreamReader,
                           writer: asyncio.StreamWriter) -> None:
        while True:  # drain the request head
            line = await reader.readline()
            if not line or line in (b"\r\n", b"\n"):
                break
        if first_line.startswith(b"GET /v1/health"):
            healthy = any(b.healthy for b in self.backends)
            status, body = (200, b"ok") if healthy else (503, b"no healthy backend")
            ctype = b"text/plain"
        else:
            status, body = 200, render_metrics(self.metrics())
            ctype = b"text/csv"
        writer.write(b"HTTP/1.1 %d X\r\nContent-Type: %s\r\nContent-Length: %d\r\n"
                     b"Connection: close\r\n\r\n%s" % (status, ctype, len(body), body))
        await writer.drain()

    def metrics(self) -> dict[str, float]:
        snap = self.counters.snapshot()
        for i, b in enumerate(self.backends):
            snap[f"backend_{i}_healthy"] = 1.0 if b.healthy else 0.0
            snap[f"backend_{i}_connections"] = b.connections_assigned
            snap[f"backend_{i}_live"] = b.live_connections
            snap[f"backend_{i}_connect_failures"] = b.connect_failures
        return snap


async def _pipe(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
    try:
        while True:
            data = await reader.read(_PIPE_CHUNK)
            if not data:
                break
            writer.write(data)
            await writer.drain()
    except (ConnectionError, OSError):
        pass
    finally:
        if not writer.is_closing():
            try:
                writer.write_eof()
            except (ConnectionError, OSError):
                pass
