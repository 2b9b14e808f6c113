"""Event payload types, validation, and the newline-delimited JSON wire format.

Every payload crossing the wire is wrapped in an EventEnvelope. The wire form
is one JSON object per event; streams are newline-delimited, and lines starting
with '#' are keep-alive comments to be skipped by consumers. Timestamps are
integer epoch milliseconds throughout.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
import uuid
from dataclasses import dataclass
from enum import Enum
from typing import Any, NamedTuple


def now_ms() -> int:
    return time.time_ns() // 1_000_000


class EventType(str, Enum):
    VEHICLE_LOCATION = "vehicle_location"
    DRIVING_SECTION = "driving_section"
    ABNORMAL_SITUATION = "abnormal_situation"


class AbnormalKind(str, Enum):
    HIGH_ACCELERATION = "high_acceleration"
    HIGH_DECELERATION = "high_deceleration"
    HIGH_SPEED = "high_speed"
    HIGH_HEART_RATE = "high_heart_rate"


class RoadType(str, Enum):
    URBAN = "urban"
    SECONDARY = "secondary"
    HIGHWAY = "highway"
    UNKNOWN = "unknown"


class SectionSample(NamedTuple):
    """One 1 Hz trace point inside a driving section."""

    timestamp: int
    latitude: float
    longitude: float
    speed: float
    heart_rate: float


class SpeedVariation(NamedTuple):
    """Largest per-second speed change (km/h per s) and acceleration sign flips."""

    max_delta_speed: float
    sign_changes: int


class TrafficAlert(NamedTuple):
    kind: str
    latitude: float
    longitude: float
    timestamp: int


class NearbyScore(NamedTuple):
    driver_id: str
    driving_score: float
    latitude: float
    longitude: float


@dataclass(frozen=True)
class VehicleLocation:
    timestamp: int
    latitude: float
    longitude: float
    accuracy: float
    speed: float
    driving_score: float


@dataclass(frozen=True)
class DrivingSection:
    start_timestamp: int
    end_timestamp: int
    samples: tuple[SectionSample, ...]
    mean_speed: float
    stddev_speed: float
    mean_heart_rate: float
    stddev_heart_rate: float
    speed_variation_stats: SpeedVariation


@dataclass(frozen=True)
class AbnormalSituation:
    timestamp: int
    latitude: float
    longitude: float
    kind: AbnormalKind
    magnitude: float


EventBody = VehicleLocation | DrivingSection | AbnormalSituation

_BODY_CLASS = {
    EventType.VEHICLE_LOCATION: VehicleLocation,
    EventType.DRIVING_SECTION: DrivingSection,
    EventType.ABNORMAL_SITUATION: AbnormalSituation,
}


@dataclass(frozen=True)
class EventEnvelope:
    """Uniform wrapper around every payload: identity, provenance, timing.

    accepted_at is stamped exactly once, by the first collector that admits
    the event; it is absent on the client side.
    """

    event_id: str
    source_id: str
    event_type: EventType
    created_at: int
    body: EventBody
    accepted_at: int | None = None

    def with_accepted_at(self, ts: int) -> "EventEnvelope":
        return dataclasses.replace(self, accepted_at=ts)


@dataclass(frozen=True)
class FeedbackResponse:
    """Driver feedback returned on Vehicle Location posts."""

    road_type: RoadType = RoadType.UNKNOWN
    speed_limit: float | None = None
    recommended_speed: float | None = None
    traffic_alerts: tuple[TrafficAlert, ...] = ()
    nearby_scores: tuple[NearbyScore, ...] = ()


class ParseError(ValueError):
    """Malformed wire input. Decoding never raises anything else."""


class ValidationError(ValueError):
    """Semantic validation failure, mapped to HTTP 400 by collectors.

    Codes: bad_coords (coordinate bounds), bad_type (enum/body/id-format
    mismatches), stale_clock (created_at too far from the server clock),
    negative_value (any numeric range violation: negative speed or accuracy,
    driving_score outside [0, 100], abnormal magnitude below its detection
    threshold), malformed_samples (driving-section sample or aggregate
    inconsistencies).
    """

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class ValidationConfig:
    clock_skew_ms: int = 24 * 3600 * 1000
    min_gap_ms: int = 500
    max_gap_ms: int = 1500
    aggregate_tol: float = 1e-6
    # Minimum credible magnitude per abnormal kind; the high_speed floor is
    # 1.2x the lowest speed limit in the road model (30 km/h).
    min_magnitude: tuple[tuple[AbnormalKind, float], ...] = (
        (AbnormalKind.HIGH_ACCELERATION, 3.5),
        (AbnormalKind.HIGH_DECELERATION, 3.5),
        (AbnormalKind.HIGH_SPEED, 36.0),
        (AbnormalKind.HIGH_HEART_RATE, 120.0),
    )

    def magnitude_floor(self, kind: AbnormalKind) -> float:
        return dict(self.min_magnitude)[kind]


DEFAULT_VALIDATION = ValidationConfig()


def _check_coords(lat: float, lon: float) -> None:
    if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
        raise ValidationError("bad_coords", f"coordinates ({lat}, {lon}) out of bounds")


def _close(stored: float, recomputed: float, tol: float) -> bool:
    return math.isclose(stored, recomputed, rel_tol=tol, abs_tol=tol)


def validate(envelope: EventEnvelope,
             clock_ms: int | None = None,
             config: ValidationConfig = DEFAULT_VALIDATION) -> None:
    """Check every envelope and payload invariant; raise ValidationError if any fails.

    clock_ms is the validating server's clock; it defaults to the wall clock
    and exists so tests can pin time.
    """
    clock = now_ms() if clock_ms is None else clock_ms
    try:
        uuid.UUID(envelope.event_id)
    except (ValueError, AttributeError, TypeError):
        raise ValidationError("bad_type", f"event_id {envelope.event_id!r} is not a UUID")
    if not envelope.source_id:
        raise ValidationError("bad_type", "source_id is empty")
    expected = _BODY_CLASS.get(envelope.event_type)
    if expected is None or not isinstance(envelope.body, expected):
        raise ValidationError(
            "bad_type",
            f"body {type(envelope.body).__name__} does not match {envelope.event_type}")
    if abs(envelope.created_at - clock) > config.clock_skew_ms:
        raise ValidationError(
            "stale_clock",
            f"created_at {envelope.created_at} more than {config.clock_skew_ms} ms from server clock")
    if envelope.accepted_at is not None and envelope.accepted_at < 0:
        raise ValidationError("negative_value", "accepted_at is negative")

    body = envelope.body
    if isinstance(body, VehicleLocation):
        _check_coords(body.latitude, body.longitude)
        if body.accuracy < 0 or body.speed < 0:
            raise ValidationError("negative_value", "accuracy and speed must be non-negative")
        if not (0.0 <= body.driving_score <= 100.0):
            raise ValidationError("negative_value", f"driving_score {body.driving_score} outside [0, 100]")
    elif isinstance(body, AbnormalSituation):
        _check_coords(body.latitude, body.longitude)
        floor = config.magnitude_floor(body.kind)
        if body.magnitude < floor:
            raise ValidationError(
                "negative_value",
                f"{body.kind.value} magnitude {body.magnitude} below detection threshold {floor}")
    elif isinstance(body, DrivingSection):
        _validate_section(body, config)


def _validate_section(body: DrivingSection, config: ValidationConfig) -> None:
    samples = body.samples
    if len(samples) < 2:
        raise ValidationError("malformed_samples", "section needs at least two samples")
    for s in samples:
        _check_coords(s.latitude, s.longitude)
        if s.speed < 0 or s.heart_rate < 0:
            raise ValidationError("negative_value", "sample speed and heart rate must be non-negative")
    for prev, cur in zip(samples, samples[1:]):
        gap = cur.timestamp - prev.timestamp
        if gap <= 0:
            raise ValidationError("malformed_samples", "sample timestamps not strictly increasing")
        if not (config.min_gap_ms <= gap <= config.max_gap_ms):
            raise ValidationError("malformed_samples", f"sample gap {gap} ms outside 1 s +/- 0.5 s")
    if body.start_timestamp != samples[0].timestamp or body.end_timestamp != samples[-1].timestamp:
        raise ValidationError("malformed_samples", "start/end timestamps disagree with samples")

    # Recompute the stored aggregates from scratch (population stddev).
    n = len(samples)
    mean_speed = sum(s.speed for s in samples) / n
    mean_hr = sum(s.heart_rate for s in samples) / n
    var_speed = sum((s.speed - mean_speed) ** 2 for s in samples) / n
    var_hr = sum((s.heart_rate - mean_hr) ** 2 for s in samples) / n
    checks = [
        (body.mean_speed, mean_speed, "mean_speed"),
        (body.stddev_speed, math.sqrt(var_speed), "stddev_speed"),
        (body.mean_heart_rate, mean_hr, "mean_heart_rate"),
        (body.stddev_heart_rate, math.sqrt(var_hr), "stddev_heart_rate"),
    ]
    for stored, recomputed, name in checks:
        if not _close(stored, recomputed, config.aggregate_tol):
            raise ValidationError(
                "malformed_samples",
                f"{name} {stored} disagrees with recomputed {recomputed}")


# --- wire format ------------------------------------------------------------

def _body_to_json(body: EventBody) -> dict[str, Any]:
    if isinstance(body, VehicleLocation):
        return {
            "timestamp": body.timestamp,
            "latitude": body.latitude,
            "longitude": body.longitude,
            "accuracy": body.accuracy,
            "speed": body.speed,
            "driving_score": body.driving_score,
        }
    if isinstance(body, DrivingSection):
        return {
            "start_timestamp": body.start_timestamp,
            "end_timestamp": body.end_timestamp,
            "samples": [list(s) for s in body.samples],
            "mean_speed": body.mean_speed,
            "stddev_speed": body.stddev_speed,
            "mean_heart_rate": body.mean_heart_rate,
            "stddev_heart_rate": body.stddev_heart_rate,
            "speed_variation_stats": list(body.speed_variation_stats),
        }
    return {
        "timestamp": body.timestamp,
        "latitude": body.latitude,
        "longitude": body.longitude,
        "kind": body.kind.value,
        "magnitude": body.magnitude,
    }


def encode(envelope: EventEnvelope) -> bytes:
    """Serialize to one JSON line (no trailing newline)."""
    obj: dict[str, Any] = {
        "event_id": envelope.event_id,
        "source_id": envelope.source_id,
        "event_type": envelope.event_type.value,
        "created_at": envelope.created_at,
        "body": _body_to_json(envelope.body),
    }
    if envelope.accepted_at is not None:
        obj["accepted_at"] = envelope.accepted_at
    return json.dumps(obj, separators=(",", ":")).encode()


def encode_batch(envelopes: list[EventEnvelope] | tuple[EventEnvelope, ...]) -> bytes:
    return b"".join(encode(e) + b"\n" for e in envelopes)


def _require(obj: dict[str, Any], key: str, kinds: tuple[type, ...]) -> Any:
    if key not in obj:
        raise ParseError(f"missing field {key!r}")
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, kinds):
        raise ParseError(f"field {key!r} has wrong type {type(value).__name__}")
    return value


def _num(obj: dict[str, Any], key: str) -> float:
    return float(_require(obj, key, (int, float)))


def _int(obj: dict[str, Any], key: str) -> int:
    return _require(obj, key, (int,))


def _body_from_json(event_type: EventType, obj: Any) -> EventBody:
    if not isinstance(obj, dict):
        raise ParseError("body is not an object")
    if event_type == EventType.VEHICLE_LOCATION:
        known = {"timestamp", "latitude", "longitude", "accuracy", "speed", "driving_score"}
        _reject_unknown(obj, known)
        return VehicleLocation(
            timestamp=_int(obj, "timestamp"),
            latitude=_num(obj, "latitude"),
            longitude=_num(obj, "longitude"),
            accuracy=_num(obj, "accuracy"),
            speed=_num(obj, "speed"),
            driving_score=_num(obj, "driving_score"),
        )
    if event_type == EventType.DRIVING_SECTION:
        known = {"start_timestamp", "end_timestamp", "samples", "mean_speed", "stddev_speed",
                 "mean_heart_rate", "stddev_heart_rate", "speed_variation_stats"}
        _reject_unknown(obj, known)
        raw_samples = _require(obj, "samples", (list,))
        samples = []
        for row in raw_samples:
            if not isinstance(row, list) or len(row) != 5:
                raise ParseError("sample rows must be 5-element arrays")
            t, lat, lon, speed, hr = row
            if isinstance(t, bool) or not isinstance(t, int):
                raise ParseError("sample timestamp must be an integer")
            for v in (lat, lon, speed, hr):
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise ParseError("sample values must be numbers")
            samples.append(SectionSample(t, float(lat), float(lon), float(speed), float(hr)))
        sv = _require(obj, "speed_variation_stats", (list,))
        if len(sv) != 2 or isinstance(sv[1], bool) or not isinstance(sv[1], int) \
                or isinstance(sv[0], bool) or not isinstance(sv[0], (int, float)):
            raise ParseError("speed_variation_stats must be [number, integer]")
        return DrivingSection(
            start_timestamp=_int(obj, "start_timestamp"),
            end_timestamp=_int(obj, "end_timestamp"),
            samples=tuple(samples),
            mean_speed=_num(obj, "mean_speed"),
            stddev_speed=_num(obj, "stddev_speed"),
            mean_heart_rate=_num(obj, "mean_heart_rate"),
            stddev_heart_rate=_num(obj, "stddev_heart_rate"),
            speed_variation_stats=SpeedVariation(float(sv[0]), sv[1]),
        )
    known = {"timestamp", "latitude", "longitude", "kind", "magnitude"}
    _reject_unknown(obj, known)
    kind_raw = _require(obj, "kind", (str,))
    try:
        kind = AbnormalKind(kind_raw)
    except ValueError:
        raise ParseError(f"unknown abnormal kind {kind_raw!r}")
    return AbnormalSituation(
        timestamp=_int(obj, "timestamp"),
        latitude=_num(obj, "latitude"),
        longitude=_num(obj, "longitude"),
        kind=kind,
        magnitude=_num(obj, "magnitude"),
    )


def _reject_unknown(obj: dict[str, Any], known: set[str]) -> None:
    extra = set(obj) - known
    if extra:
        raise ParseError(f"unknown fields: {sorted(extra)}")


def decode(data: bytes | str) -> EventEnvelope:
    """Parse one wire-format event. Raises ParseError on any malformed input."""
    try:
        text = data.decode() if isinstance(data, bytes) else data
        obj = json.loads(text)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ParseError("event must be a JSON object")
    _reject_unknown(obj, {"event_id", "source_id", "event_type", "created_at", "accepted_at", "body"})
    type_raw = _require(obj, "event_type", (str,))
    try:
        event_type = EventType(type_raw)
    except ValueError:
        raise ParseError(f"unknown event_type {type_raw!r}")
    accepted_at = None
    if "accepted_at" in obj:
        accepted_at = _int(obj, "accepted_at")
    return EventEnvelope(
        event_id=_require(obj, "event_id", (str,)),
        source_id=_require(obj, "source_id", (str,)),
        event_type=event_type,
        created_at=_int(obj, "created_at"),
        body=_body_from_json(event_type, obj.get("body")),
        accepted_at=accepted_at,
    )


def decode_lines(data: bytes) -> list[EventEnvelope]:
    """Parse a newline-delimited batch, skipping blanks and '#' comment lines."""
    out = []
    for line in data.split(b"\n"):
        line = line.strip()
        if not line or line.startswith(b"#"):
            continue
        out.append(decode(line))
    return out


def encode_feedback(fb: FeedbackResponse) -> bytes:
    obj = {
        "road_type": fb.road_type.value,
        "speed_limit": fb.speed_limit,
        "recommended_speed": fb.recommended_speed,
        "traffic_alerts": [list(a) for a in fb.traffic_alerts],
        "nearby_scores": [list(s) for s in fb.nearby_scores],
    }
    return json.dumps(obj, separators=(",", ":")).encode()


def decode_feedback(data: bytes) -> FeedbackResponse:
    try:
        obj = json.loads(data.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ParseError("feedback must be a JSON object")
    try:
        road_type = RoadType(obj["road_type"])
        alerts = tuple(TrafficAlert(a[0], float(a[1]), float(a[2]), int(a[3]))
                       for a in obj["traffic_alerts"])
        scores = tuple(NearbyScore(s[0], float(s[1]), float(s[2]), float(s[3]))
                       for s in obj["nearby_scores"])
        limit = obj["speed_limit"]
        rec = obj["recommended_speed"]
    except (KeyError, ValueError, TypeError, IndexError) as exc:
        raise ParseError(f"malformed feedback: {exc}") from None
    return FeedbackResponse(
        road_type=road_type,
        speed_limit=None if limit is None else float(limit),
        recommended_speed=None if rec is None else float(rec),
        traffic_alerts=alerts,
        nearby_scores=scores,
    )
