import dataclasses
import random
import uuid

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from citystream import events
from citystream.events import (
    AbnormalKind,
    AbnormalSituation,
    DrivingSection,
    EventEnvelope,
    EventType,
    ParseError,
    SectionSample,
    SpeedVariation,
    ValidationError,
    VehicleLocation,
    decode,
    decode_lines,
    encode,
    encode_batch,
    validate,
)
from conftest import make_abnormal_event, make_location_event, make_section_event

NOW = 1_700_000_000_000

lat_st = st.floats(-90, 90, allow_nan=False)
lon_st = st.floats(-180, 180, allow_nan=False)
ts_st = st.integers(NOW - 3_600_000, NOW + 3_600_000)


@st.composite
def location_envelopes(draw):
    created = draw(ts_st)
    body = VehicleLocation(
        timestamp=draw(ts_st),
        latitude=draw(lat_st), longitude=draw(lon_st),
        accuracy=draw(st.floats(0, 500, allow_nan=False)),
        speed=draw(st.floats(0, 250, allow_nan=False)),
        driving_score=draw(st.floats(0, 100, allow_nan=False)),
    )
    return EventEnvelope(str(uuid.UUID(int=draw(st.integers(0, 2**128 - 1)))),
                         draw(st.text(min_size=1, max_size=12)),
                         EventType.VEHICLE_LOCATION, created, body,
                         accepted_at=draw(st.none() | ts_st))


@st.composite
def section_envelopes(draw):
    n = draw(st.integers(2, 40))
    start = draw(ts_st)
    gaps = draw(st.lists(st.integers(500, 1500), min_size=n - 1, max_size=n - 1))
    stamps = [start]
    for g in gaps:
        stamps.append(stamps[-1] + g)
    speeds = draw(st.lists(st.floats(0, 160, allow_nan=False), min_size=n, max_size=n))
    hrs = draw(st.lists(st.floats(40, 180, allow_nan=False), min_size=n, max_size=n))
    samples = tuple(SectionSample(stamps[i], draw(lat_st), draw(lon_st), speeds[i], hrs[i])
                    for i in range(n))
    body = DrivingSection(
        start_timestamp=stamps[0], end_timestamp=stamps[-1], samples=samples,
        mean_speed=float(np.mean(speeds)), stddev_speed=float(np.std(speeds)),
        mean_heart_rate=float(np.mean(hrs)), stddev_heart_rate=float(np.std(hrs)),
        speed_variation_stats=SpeedVariation(float(np.max(np.abs(np.diff(speeds)))), draw(st.integers(0, n))),
    )
    return EventEnvelope(str(uuid.uuid4()), "d", EventType.DRIVING_SECTION, start, body)


@st.composite
def abnormal_envelopes(draw):
    kind = draw(st.sampled_from(list(AbnormalKind)))
    floor = events.DEFAULT_VALIDATION.magnitude_floor(kind)
    body = AbnormalSituation(
        timestamp=draw(ts_st), latitude=draw(lat_st), longitude=draw(lon_st),
        kind=kind, magnitude=draw(st.floats(floor, floor + 100, allow_nan=False)),
    )
    return EventEnvelope(str(uuid.uuid4()), "d", EventType.ABNORMAL_SITUATION,
                         draw(ts_st), body)


envelopes = location_envelopes() | section_envelopes() | abnormal_envelopes()


class TestRoundTrip:
    @given(envelopes)
    @settings(max_examples=400)
    def test_decode_encode_identity(self, env):
        assert decode(encode(env)) == env

    def test_many_random_envelopes_round_trip(self):
        rng = random.Random(42)
        for i in range(10_000):
            pick = rng.randrange(3)
            if pick == 0:
                env = make_location_event(
                    source_id=f"d{i}", lat=rng.uniform(-90, 90), lon=rng.uniform(-180, 180),
                    speed=rng.uniform(0, 200), score=rng.uniform(0, 100), created_at=NOW + i)
            elif pick == 1:
                env = make_section_event(source_id=f"d{i}", created_at=NOW + i,
                                         n_samples=rng.randrange(2, 20))
            else:
                env = make_abnormal_event(source_id=f"d{i}", magnitude=rng.uniform(120, 200),
                                          kind=AbnormalKind.HIGH_HEART_RATE, created_at=NOW + i)
            assert decode(encode(env)) == env

    def test_batch_round_trip_and_comment_skipping(self):
        batch = [make_location_event(), make_section_event(), make_abnormal_event()]
        data = b"#keepalive\n" + encode_batch(batch) + b"\n#trailing comment\n"
        assert decode_lines(data) == batch

    def test_empty_input_is_parse_error(self):
        with pytest.raises(ParseError):
            decode(b"")

    @given(st.binary(max_size=400))
    @settings(max_examples=300)
    def test_arbitrary_bytes_never_crash(self, blob):
        try:
            decode(blob)
        except ParseError:
            pass

    def test_reject_unknown_fields(self):
        payload = encode(make_location_event())[:-1] + b',"extra":1}'
        with pytest.raises(ParseError):
            decode(payload)

    def test_reject_float_timestamp(self):
        env = make_location_event()
        raw = encode(env).replace(
            f'"created_at":{env.created_at}'.encode(),
            f'"created_at":{env.created_at}.5'.encode())
        with pytest.raises(ParseError):
            decode(raw)


class TestValidate:
    def test_seville_location_ok(self):
        env = make_location_event(lat=37.39, lon=-5.98, speed=50.0, created_at=NOW)
        validate(env, clock_ms=NOW)

    def test_out_of_range_latitude(self):
        env = make_location_event(lat=91.0 - 0, created_at=NOW)
        env = dataclasses.replace(env, body=dataclasses.replace(env.body, latitude=91.0))
        with pytest.raises(ValidationError) as exc:
            validate(env, clock_ms=NOW)
        assert exc.value.code == "bad_coords"

    def test_section_mean_mismatch(self):
        env = make_section_event(created_at=NOW)
        bad_body = dataclasses.replace(env.body, mean_speed=env.body.mean_speed * 1.1)
        with pytest.raises(ValidationError) as exc:
            validate(dataclasses.replace(env, body=bad_body), clock_ms=NOW)
        assert exc.value.code == "malformed_samples"

    def test_section_gap_too_large(self):
        env = make_section_event(created_at=NOW, gap_ms=1600)
        with pytest.raises(ValidationError) as exc:
            validate(env, clock_ms=NOW)
        assert exc.value.code == "malformed_samples"

    def test_stale_clock(self):
        env = make_location_event(created_at=NOW - 25 * 3600 * 1000)
        with pytest.raises(ValidationError) as exc:
            validate(env, clock_ms=NOW)
        assert exc.value.code == "stale_clock"

    def test_negative_speed(self):
        env = make_location_event(speed=-1.0, created_at=NOW)
        with pytest.raises(ValidationError) as exc:
            validate(env, clock_ms=NOW)
        assert exc.value.code == "negative_value"

    def test_score_above_range(self):
        env = make_location_event(score=101.0, created_at=NOW)
        with pytest.raises(ValidationError) as exc:
            validate(env, clock_ms=NOW)
        assert exc.value.code == "negative_value"

    def test_abnormal_magnitude_below_threshold(self):
        env = make_abnormal_event(kind=AbnormalKind.HIGH_HEART_RATE, magnitude=100.0,
                                  created_at=NOW)
        with pytest.raises(ValidationError) as exc:
            validate(env, clock_ms=NOW)
        assert exc.value.code == "negative_value"

    def test_body_type_mismatch(self):
        env = make_location_event(created_at=NOW)
        env = dataclasses.replace(env, event_type=EventType.DRIVING_SECTION)
        with pytest.raises(ValidationError) as exc:
            validate(env, clock_ms=NOW)
        assert exc.value.code == "bad_type"

    def test_non_uuid_event_id(self):
        env = make_location_event(event_id="not-a-uuid", created_at=NOW)
        with pytest.raises(ValidationError) as exc:
            validate(env, clock_ms=NOW)
        assert exc.value.code == "bad_type"

    @given(envelopes)
    @settings(max_examples=200)
    def test_generated_envelopes_validate(self, env):
        validate(env, clock_ms=env.created_at)

    def test_accepted_at_stamping(self):
        env = make_location_event(created_at=NOW)
        assert env.accepted_at is None
        stamped = env.with_accepted_at(NOW + 5)
        assert stamped.accepted_at == NOW + 5
        assert decode(encode(stamped)) == stamped
