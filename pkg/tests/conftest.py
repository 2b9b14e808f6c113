"""Shared test helpers: envelope factories and an asyncio runner."""

import asyncio
import uuid

import numpy as np

from citystream.events import (
    AbnormalKind,
    AbnormalSituation,
    DrivingSection,
    EventEnvelope,
    EventType,
    SectionSample,
    SpeedVariation,
    VehicleLocation,
    now_ms,
)

SEVILLE = (37.39, -5.98)


def run_async(coro):
    return asyncio.run(coro)


def make_location_event(source_id="driver-1", lat=SEVILLE[0], lon=SEVILLE[1],
                        speed=50.0, score=75.0, created_at=None, accuracy=5.0,
                        event_id=None, timestamp=None):
    created = now_ms() if created_at is None else created_at
    return EventEnvelope(
        event_id=event_id or str(uuid.uuid4()),
        source_id=source_id,
        event_type=EventType.VEHICLE_LOCATION,
        created_at=created,
        body=VehicleLocation(
            timestamp=created if timestamp is None else timestamp,
            latitude=lat, longitude=lon, accuracy=accuracy,
            speed=speed, driving_score=score,
        ),
    )


def make_section_body(start_ts=None, n_samples=30, lat=SEVILLE[0], lon=SEVILLE[1],
                      speeds=None, heart_rates=None, gap_ms=1000):
    start = now_ms() if start_ts is None else start_ts
    speeds = list(speeds) if speeds is not None else [40.0 + (i % 5) for i in range(n_samples)]
    heart_rates = list(heart_rates) if heart_rates is not None else [70.0 + (i % 3) for i in range(n_samples)]
    samples = tuple(
        SectionSample(start + i * gap_ms, lat + i * 1e-4, lon, speeds[i], heart_rates[i])
        for i in range(n_samples)
    )
    # Aggregates computed with numpy so they are independent of the package's
    # own recomputation path.
    deltas = np.diff(speeds) if len(speeds) > 1 else np.array([0.0])
    nonzero = deltas[deltas != 0]
    flips = int(np.sum(np.sign(nonzero[1:]) != np.sign(nonzero[:-1]))) if len(nonzero) > 1 else 0
    return DrivingSection(
        start_timestamp=samples[0].timestamp,
        end_timestamp=samples[-1].timestamp,
        samples=samples,
        mean_speed=float(np.mean(speeds)),
        stddev_speed=float(np.std(speeds)),
        mean_heart_rate=float(np.mean(heart_rates)),
        stddev_heart_rate=float(np.std(heart_rates)),
        speed_variation_stats=SpeedVariation(float(np.max(np.abs(deltas))), flips),
    )


def make_section_event(source_id="driver-1", created_at=None, **kwargs):
    created = now_ms() if created_at is None else created_at
    return EventEnvelope(
        event_id=str(uuid.uuid4()),
        source_id=source_id,
        event_type=EventType.DRIVING_SECTION,
        created_at=created,
        body=make_section_body(start_ts=created - 30_000, **kwargs),
    )


def make_abnormal_event(source_id="driver-1", kind=AbnormalKind.HIGH_SPEED,
                        magnitude=80.0, lat=SEVILLE[0], lon=SEVILLE[1], created_at=None):
    created = now_ms() if created_at is None else created_at
    return EventEnvelope(
        event_id=str(uuid.uuid4()),
        source_id=source_id,
        event_type=EventType.ABNORMAL_SITUATION,
        created_at=created,
        body=AbnormalSituation(
            timestamp=created, latitude=lat, longitude=lon,
            kind=kind, magnitude=magnitude,
        ),
    )
