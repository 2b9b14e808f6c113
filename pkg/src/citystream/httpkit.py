"""Minimal HTTP/1.1 plumbing over asyncio streams.

Both halves are deliberately small and stream-oriented: the server supports
fixed keep-alive responses plus held-open chunked responses (used by the hub's
subscription streams), and the client keeps one persistent connection per
instance (one driver = one connection in the simulator). Backpressure from a
paused stream consumer is visible to the producer through write drains, which
the saturation behavior of the hub depends on.
"""

from __future__ import annotations

import asyncio
import socket
from dataclasses import dataclass, field
from typing import AsyncIterator, Awaitable, Callable
from urllib.parse import parse_qsl, urlsplit

MAX_HEADER_BYTES = 65536
MAX_BODY_BYTES = 32 * 1024 * 1024
STREAM_WRITE_HIGH_WATER = 16384


class HttpError(Exception):
    pass


@dataclass
class Request:
    method: str
    target: str
    query: dict[str, str]
    headers: dict[str, str]
    body: bytes
    peer: tuple | None = None


@dataclass
class Response:
    status: int
    body: bytes = b""
    content_type: str = "application/json"
    headers: list[tuple[str, str]] = field(default_factory=list)


REASONS = {
    200: "OK", 400: "Bad Request", 404: "Not Found", 405: "Method Not Allowed",
    410: "Gone", 413: "Payload Too Large", 500: "Internal Server Error",
    502: "Bad Gateway", 503: "Service Unavailable",
}


def reason(status: int) -> str:
    return REASONS.get(status, "Unknown")


class ChunkWriter:
    """Writes one chunked-transfer frame per call and drains the transport.

    The drain is what stalls the producer when the peer stops reading.
    """

    def __init__(self, writer: asyncio.StreamWriter):
        self._writer = writer

    async def write(self, data: bytes) -> None:
        self._writer.write(f"{len(data):x}\r\n".encode() + data + b"\r\n")
        await self._writer.drain()


class StreamResponse:
    """Marker return value for handlers that take over the connection.

    The server sends chunked headers and then awaits run(writer); when it
    returns or raises, the connection is closed.
    """

    def __init__(self, run: Callable[[ChunkWriter], Awaitable[None]],
                 content_type: str = "application/x-ndjson"):
        self.run = run
        self.content_type = content_type


Handler = Callable[[Request], Awaitable[Response | StreamResponse]]


async def _read_head(reader: asyncio.StreamReader) -> list[bytes] | None:
    """Read request/status line plus headers; None on clean EOF before a request."""
    lines: list[bytes] = []
    total = 0
    while True:
        line = await reader.readline()
        if not line:
            if not lines:
                return None
            raise HttpError("connection closed mid-head")
        total += len(line)
        if total > MAX_HEADER_BYTES:
            raise HttpError("header section too large")
        if line in (b"\r\n", b"\n"):
            if not lines:
                continue  # tolerate leading blank lines
            return lines
        lines.append(line.rstrip(b"\r\n"))


def _parse_headers(lines: list[bytes]) -> dict[str, str]:
    headers: dict[str, str] = {}
    for raw in lines:
        name, sep, value = raw.partition(b":")
        if not sep:
            raise HttpError(f"malformed header line {raw!r}")
        headers[name.strip().decode().lower()] = value.strip().decode()
    return headers


def _render_response(resp: Response, keep_alive: bool) -> bytes:
    head = [f"HTTP/1.1 {resp.status} {reason(resp.status)}",
            f"Content-Type: {resp.content_type}",
            f"Content-Length: {len(resp.body)}",
            f"Connection: {'keep-alive' if keep_alive else 'close'}"]
    head.extend(f"{k}: {v}" for k, v in resp.headers)
    return ("\r\n".join(head) + "\r\n\r\n").encode() + resp.body


class HttpServer:
    """One listening socket dispatching requests to a single async handler.

    When counters are supplied, the synchronous slices of connection handling
    (head parsing, response rendering) are charged to that component's busy
    time, so self-reported utilization covers protocol work too.
    """

    def __init__(self, handler: Handler, *, sndbuf: int | None = None,
                 counters=None):
        self._handler = handler
        self._sndbuf = sndbuf
        self._counters = counters
        self._server: asyncio.AbstractServer | None = None
        self._conns: set[asyncio.Task] = set()
        self.address: tuple[str, int] | None = None

    def _busy(self):
        if self._counters is None:
            from contextlib import nullcontext
            return nullcontext()
        return self._counters.busy.track()

    async def start(self, host: str, port: int) -> tuple[str, int]:
        self._server = await asyncio.start_server(self._on_connect, host, port)
        sock = self._server.sockets[0]
        self.address = sock.getsockname()[:2]
        return self.address

    def _on_connect(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        task = asyncio.ensure_future(self._serve_connection(reader, writer))
        self._conns.add(task)
        task.add_done_callback(self._conns.discard)

    async def _serve_connection(self, reader: asyncio.StreamReader,
                                writer: asyncio.StreamWriter) -> None:
        sock = writer.get_extra_info("socket")
        if sock is not None and self._sndbuf:
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, self._sndbuf)
        transport = writer.transport
        if transport is not None:
            transport.set_write_buffer_limits(high=STREAM_WRITE_HIGH_WATER)
        peer = writer.get_extra_info("peername")
        try:
            while True:
                try:
                    head = await _read_head(reader)
                except HttpError:
                    break
                if head is None:
                    break
                with self._busy():
                    parts = head[0].split()
                    bad_line = len(parts) != 3 or not parts[2].startswith(b"HTTP/1.")
                    headers = None
                    if not bad_line:
                        method = parts[0].decode()
                        raw_target = parts[1].decode()
                        try:
                            headers = _parse_headers(head[1:])
                        except HttpError:
                            pass
                if bad_line:
                    writer.write(_render_response(Response(400, b"bad request line"), False))
                    await writer.drain()
                    break
                if headers is None:
                    writer.write(_render_response(Response(400, b"bad headers"), False))
                    await writer.drain()
                    break
                length = int(headers.get("content-length", "0") or "0")
                if length > MAX_BODY_BYTES:
                    writer.write(_render_response(Response(413, b"body too large"), False))
                    await writer.drain()
                    break
                body = await reader.readexactly(length) if length else b""
                with self._busy():
                    split = urlsplit(raw_target)
                    request = Request(
                        method=method,
                        target=split.path,
                        query=dict(parse_qsl(split.query)),
                        headers=headers,
                        body=body,
                        peer=peer,
                    )
                try:
                    result = await self._handler(request)
                except asyncio.CancelledError:
                    raise
                except Exception as exc:  # handler bug: report, keep serving
                    result = Response(500, f"internal error: {exc}".encode(),
                                      content_type="text/plain")
                if isinstance(result, StreamResponse):
                    writer.write((
                        f"HTTP/1.1 200 {reason(200)}\r\n"
                        f"Content-Type: {result.content_type}\r\n"
                        "Transfer-Encoding: chunked\r\n"
                        "Connection: close\r\n\r\n").encode())
                    await writer.drain()
                    await result.run(ChunkWriter(writer))
                    writer.write(b"0\r\n\r\n")
                    await writer.drain()
                    break
                keep = headers.get("connection", "keep-alive").lower() != "close"
                with self._busy():
                    payload = _render_response(result, keep)
                writer.write(payload)
                await writer.drain()
                if not keep:
                    break
        except (ConnectionError, asyncio.IncompleteReadError, asyncio.TimeoutError):
            pass
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except (ConnectionError, OSError):
                pass

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None
        for task in list(self._conns):
            task.cancel()
        if self._conns:
            await asyncio.gather(*self._conns, return_exceptions=True)


async def serve(handler: Handler, host: str = "127.0.0.1", port: int = 0,
                *, sndbuf: int | None = None) -> HttpServer:
    server = HttpServer(handler, sndbuf=sndbuf)
    await server.start(host, port)
    return server


def parse_address(url: str) -> tuple[str, int]:
    """Accepts 'http://host:port', 'host:port', or '(host, port)' tuples upstream."""
    if "//" in url:
        split = urlsplit(url)
        if split.hostname is None or split.port is None:
            raise ValueError(f"address {url!r} needs explicit host and port")
        return split.hostname, split.port
    host, _, port = url.rpartition(":")
    return host or "127.0.0.1", int(port)


class ClientConnection:
    """One persistent HTTP/1.1 connection.

    Concurrent request() calls from different tasks are serialized on an
    internal lock: one in-flight exchange at a time per connection.
    """

    def __init__(self, host: str, port: int, *, rcvbuf: int | None = None):
        self.host = host
        self.port = port
        self._rcvbuf = rcvbuf
        self._reader: asyncio.StreamReader | None = None
        self._writer: asyncio.StreamWriter | None = None
        self._lock: asyncio.Lock | None = None

    def _get_lock(self) -> asyncio.Lock:
        # Created lazily so the connection object can be built outside a loop.
        if self._lock is None:
            self._lock = asyncio.Lock()
        return self._lock

    @property
    def connected(self) -> bool:
        return self._writer is not None

    async def connect(self) -> None:
        if self._rcvbuf:
            sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, self._rcvbuf)
            sock.setblocking(False)
            await asyncio.get_running_loop().sock_connect(sock, (self.host, self.port))
            self._reader, self._writer = await asyncio.open_connection(sock=sock)
        else:
            self._reader, self._writer = await asyncio.open_connection(self.host, self.port)

    async def _close_inner(self) -> None:
        if self._writer is not None:
            self._writer.close()
            try:
                await self._writer.wait_closed()
            except (ConnectionError, OSError):
                pass
        self._reader = self._writer = None

    async def close(self) -> None:
        await self._close_inner()

    async def _ensure(self) -> None:
        if self._writer is None:
            await self.connect()

    async def request(self, method: str, path: str, body: bytes = b"",
                      content_type: str = "application/json",
                      timeout: float | None = 30.0) -> tuple[int, dict[str, str], bytes]:
        async with self._get_lock():
            await self._ensure()
            assert self._reader is not None and self._writer is not None
            head = (f"{method} {path} HTTP/1.1\r\n"
                    f"Host: {self.host}:{self.port}\r\n"
                    f"Content-Type: {content_type}\r\n"
                    f"Content-Length: {len(body)}\r\n"
                    "Connection: keep-alive\r\n\r\n")
            self._writer.write(head.encode() + body)
            await self._writer.drain()

            async def read_response():
                lines = await _read_head(self._reader)
                if lines is None:
                    raise HttpError("connection closed before response")
                parts = lines[0].split(None, 2)
                status = int(parts[1])
                headers = _parse_headers(lines[1:])
                if headers.get("transfer-encoding", "").lower() == "chunked":
                    raise HttpError("unexpected chunked response to plain request")
                length = int(headers.get("content-length", "0") or "0")
                payload = await self._reader.readexactly(length) if length else b""
                if headers.get("connection", "").lower() == "close":
                    await self._close_inner()
                return status, headers, payload

            try:
                if timeout is None:
                    return await read_response()
                return await asyncio.wait_for(read_response(), timeout)
            except (HttpError, ConnectionError, asyncio.IncompleteReadError,
                    asyncio.TimeoutError):
                await self._close_inner()
                raise

    async def open_stream(self, path: str, timeout: float = 30.0,
                          ) -> tuple[int, dict[str, str], AsyncIterator[bytes] | None, bytes]:
        """GET a chunked stream; returns (status, headers, line iterator, error body).

        On non-200 the iterator is None and the error body is returned instead.
        The connection is dedicated to the stream afterwards.
        """
        await self._ensure()
        assert self._reader is not None and self._writer is not None
        self._writer.write((f"GET {path} HTTP/1.1\r\n"
                            f"Host: {self.host}:{self.port}\r\n\r\n").encode())
        await self._writer.drain()

        async def read_head():
            lines = await _read_head(self._reader)
            if lines is None:
                raise HttpError("connection closed before response")
            return int(lines[0].split(None, 2)[1]), _parse_headers(lines[1:])

        status, headers = await asyncio.wait_for(read_head(), timeout)
        if status != 200:
            length = int(headers.get("content-length", "0") or "0")
            body = await self._reader.readexactly(length) if length else b""
            return status, headers, None, body
        if headers.get("transfer-encoding", "").lower() != "chunked":
            raise HttpError("stream response is not chunked")
        return status, headers, self._iter_chunk_lines(), b""

    async def _iter_chunk_lines(self) -> AsyncIterator[bytes]:
        assert self._reader is not None
        buffer = b""
        while True:
            size_line = await self._reader.readline()
            if not size_line:
                break
            size = int(size_line.strip() or b"0", 16)
            if size == 0:
                await self._reader.readline()  # trailing CRLF
                break
            chunk = await self._reader.readexactly(size)
            await self._reader.readexactly(2)  # chunk CRLF
            buffer += chunk
            while b"\n" in buffer:
                line, buffer = buffer.split(b"\n", 1)
                if line:
                    yield line


async def fetch(address: tuple[str, int], method: str, path: str,
                body: bytes = b"", timeout: float = 10.0) -> tuple[int, bytes]:
    """One-shot request on a throwaway connection (health checks, metric polls)."""
    conn = ClientConnection(address[0], address[1])
    try:
        status, _, payload = await conn.request(method, path, body, timeout=timeout)
        return status, payload
    finally:
        await conn.close()
