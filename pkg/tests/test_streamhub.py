import asyncio
import json

from citystream import events as ev
from citystream.httpkit import ClientConnection, fetch
from citystream.metrics import parse_metrics
from citystream.streamhub import HubConfig, HubServer, Saturated, StreamHub
from conftest import (
    make_abnormal_event,
    make_location_event,
    make_section_event,
    run_async,
)


def wire(env):
    return env.event_id, env.event_type.value, ev.encode(env)


async def start_hub(**cfg):
    server = HubServer(HubConfig(**cfg))
    await server.start()
    return server


async def publish(server, envelopes):
    body = ev.encode_batch(envelopes)
    status, payload = await fetch(server.address, "POST", "/v1/publish", body)
    return status, json.loads(payload) if payload else {}


class Transcript:
    """Background stream reader collecting events and their seq comments."""

    def __init__(self, address, stream, from_seq=None):
        self.address = address
        self.path = f"/v1/streams/{stream}"
        if from_seq is not None:
            self.path += f"?from_seq={from_seq}"
        self.events = []
        self.seqs = []
        self.raw_comments = []
        self._conn = None
        self._task = None
        self.status = None

    async def start(self):
        self._conn = ClientConnection(*self.address)
        self.status, _, lines, body = await self._conn.open_stream(self.path)
        if self.status != 200:
            self.error = body
            return self
        self._task = asyncio.ensure_future(self._pump(lines))
        return self

    async def _pump(self, lines):
        try:
            async for line in lines:
                if line.startswith(b"#seq="):
                    self.seqs.append(int(line[5:]))
                elif line.startswith(b"#"):
                    self.raw_comments.append(line)
                else:
                    self.events.append(ev.decode(line))
        except (ConnectionError, asyncio.IncompleteReadError):
            pass

    async def wait_events(self, n, timeout=5.0):
        deadline = asyncio.get_running_loop().time() + timeout
        while len(self.events) < n:
            if asyncio.get_running_loop().time() > deadline:
                raise AssertionError(f"only {len(self.events)}/{n} events arrived")
            await asyncio.sleep(0.01)

    async def close(self):
        if self._task:
            self._task.cancel()
        if self._conn:
            await self._conn.close()


def test_publish_assigns_gapless_sequences():
    async def main():
        server = await start_hub()
        try:
            batch = [make_location_event(source_id=f"d{i}") for i in range(10)]
            status, out = await publish(server, batch)
            assert status == 200 and out == {"accepted": 10, "duplicates": 0}
            assert server.hub.head_seq == 10
        finally:
            await server.close()
    run_async(main())


def test_duplicate_batch_fully_dropped():
    async def main():
        server = await start_hub()
        try:
            batch = [make_location_event(source_id=f"d{i}") for i in range(5)]
            await publish(server, batch)
            status, out = await publish(server, batch)
            assert status == 200 and out == {"accepted": 0, "duplicates": 5}
            assert server.hub.head_seq == 5
        finally:
            await server.close()
    run_async(main())


def test_main_stream_delivers_everything_in_order():
    async def main():
        server = await start_hub()
        sub = await Transcript(server.address, "main").start()
        try:
            batch = [make_location_event(), make_section_event()]
            await publish(server, batch)
            await sub.wait_events(2)
            assert sub.events == batch  # accepted_at unset: hub got them verbatim
            assert sub.seqs == [1, 2]
        finally:
            await sub.close()
            await server.close()
    run_async(main())


def test_storage_stream_filters_locations():
    async def main():
        server = await start_hub()
        sub = await Transcript(server.address, "storage").start()
        try:
            batch = [make_location_event(), make_section_event(), make_abnormal_event()]
            await publish(server, batch)
            await sub.wait_events(2)
            assert [e.event_type.value for e in sub.events] == \
                ["driving_section", "abnormal_situation"]
            assert sub.seqs == [2, 3]
        finally:
            await sub.close()
            await server.close()
    run_async(main())


def test_storage_is_exact_filtered_subsequence_of_main():
    async def main():
        server = await start_hub()
        main_sub = await Transcript(server.address, "main").start()
        storage_sub = await Transcript(server.address, "storage").start()
        try:
            import random
            rng = random.Random(6)
            batch = []
            for i in range(60):
                batch.append(rng.choice([make_location_event, make_section_event,
                                         make_abnormal_event])(source_id=f"d{i}"))
            for i in range(0, 60, 7):
                await publish(server, batch[i:i + 7])
            await main_sub.wait_events(60)
            want_storage = [e.event_id for e in batch
                            if e.event_type.value in ("driving_section", "abnormal_situation")]
            await storage_sub.wait_events(len(want_storage))
            assert [e.event_id for e in main_sub.events] == [e.event_id for e in batch]
            assert [e.event_id for e in storage_sub.events] == want_storage
        finally:
            await main_sub.close()
            await storage_sub.close()
            await server.close()
    run_async(main())


def test_resume_with_from_seq_has_no_gap_or_repeat():
    async def main():
        server = await start_hub()
        batch = [make_location_event(source_id=f"d{i}") for i in range(8)]
        first = await Transcript(server.address, "main", from_seq=0).start()
        try:
            await publish(server, batch[:5])
            await first.wait_events(5)
            await first.close()  # subscriber dies after seq 5
            await publish(server, batch[5:])
            resumed = await Transcript(server.address, "main", from_seq=5).start()
            try:
                await resumed.wait_events(3)
                assert [e.event_id for e in resumed.events] == \
                    [e.event_id for e in batch[5:]]
                assert resumed.seqs == [6, 7, 8]
            finally:
                await resumed.close()
        finally:
            await first.close()
            await server.close()
    run_async(main())


def test_storage_resume_via_seq_comments():
    async def main():
        server = await start_hub()
        sub = await Transcript(server.address, "storage").start()
        try:
            await publish(server, [make_section_event(), make_location_event(),
                                   make_section_event()])
            await sub.wait_events(2)
            last_seen = sub.seqs[0]  # pretend we crashed after the first section
            await sub.close()
            resumed = await Transcript(server.address, "storage", from_seq=last_seen).start()
            try:
                await resumed.wait_events(1)
                assert resumed.events[0].event_type.value == "driving_section"
                assert resumed.seqs == [3]
            finally:
                await resumed.close()
        finally:
            await sub.close()
            await server.close()
    run_async(main())


def test_evicted_from_seq_is_410():
    async def main():
        server = await start_hub(capacity=4)
        try:
            for _ in range(3):
                await publish(server, [make_location_event(source_id=f"x{_}")
                                       for _ in range(4)])
            sub = await Transcript(server.address, "main", from_seq=2).start()
            assert sub.status == 410
            await sub.close()
            ok = await Transcript(server.address, "main", from_seq=9).start()
            assert ok.status == 200
            await ok.close()
        finally:
            await server.close()
    run_async(main())


def test_unknown_stream_404():
    async def main():
        server = await start_hub()
        try:
            conn = ClientConnection(*server.address)
            status, _, lines, _ = await conn.open_stream("/v1/streams/public")
            assert status == 404 and lines is None
            await conn.close()
        finally:
            await server.close()
    run_async(main())


def test_saturation_rejects_whole_batch():
    # Unit-level: an attached subscriber whose delivery never runs.
    hub = StreamHub(HubConfig(capacity=8))
    stuck = hub.attach("main", None)
    batch1 = [wire(make_location_event(source_id=f"a{i}")) for i in range(8)]
    assert hub.publish(batch1) == (8, 0)
    overflow = [wire(make_location_event(source_id="b0")), wire(make_location_event(source_id="b1"))]
    try:
        hub.publish(overflow)
        raise AssertionError("expected Saturated")
    except Saturated:
        pass
    assert hub.head_seq == 8  # nothing from the rejected batch admitted
    assert hub.counters.get("events_rejected") == 2
    # consumer catches up: admission works again
    stuck.delivered_seq = 8
    assert hub.publish(overflow) == (2, 0)


def test_keepalive_comment_when_idle():
    async def main():
        server = await start_hub(keepalive_s=0.15)
        sub = await Transcript(server.address, "main").start()
        try:
            await asyncio.sleep(0.5)
            assert any(c == b"#keepalive" for c in sub.raw_comments)
        finally:
            await sub.close()
            await server.close()
    run_async(main())


def test_metrics_expose_counts():
    async def main():
        server = await start_hub()
        try:
            await publish(server, [make_location_event(), make_section_event()])
            status, payload = await fetch(server.address, "GET", "/v1/metrics")
            assert status == 200
            m = parse_metrics(payload)
            assert m["events_admitted"] == 2
            assert m["storage_matched"] == 1
            assert m["head_seq"] == 2
            assert m["busy_seconds"] > 0
        finally:
            await server.close()
    run_async(main())


def test_malformed_publish_is_400():
    async def main():
        server = await start_hub()
        try:
            status, _ = await fetch(server.address, "POST", "/v1/publish", b"{nonsense")
            assert status == 400
        finally:
            await server.close()
    run_async(main())
