import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from zofed.errors import IngestionError
from zofed.wire import HEADER_BYTES, KIND_LOSS_DIFFS, KIND_PARAM_DELTA, WireRecord, decode_record, encode_record


def test_header_size():
    assert HEADER_BYTES == 4 + 2 + 4 + 4 + 1 + 4 == 19


def test_single_zero_value():
    raw = encode_record(WireRecord(0, 0, KIND_LOSS_DIFFS, np.array([0.0])))
    assert len(raw) == 23
    assert raw[-4:] == b"\x00\x00\x00\x00"


def test_one_is_little_endian():
    raw = encode_record(WireRecord(0, 0, KIND_LOSS_DIFFS, np.array([1.0])))
    assert raw[-4:] == bytes([0x00, 0x00, 0x80, 0x3F])


def test_header_fields():
    raw = encode_record(WireRecord(7, 3, KIND_PARAM_DELTA, np.zeros(5)))
    assert raw[:4] == b"BFFL"
    assert struct.unpack("<H", raw[4:6])[0] == 1
    assert struct.unpack("<IIBI", raw[6:19]) == (7, 3, KIND_PARAM_DELTA, 5)
    assert len(raw) == HEADER_BYTES + 4 * 5


def test_round_trip_many_random_records():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        k = int(rng.integers(0, 12))
        payload = rng.normal(size=k).astype(np.float32)
        rec = WireRecord(int(rng.integers(2**32)), int(rng.integers(2**32)), int(rng.integers(1, 3)), payload)
        raw = encode_record(rec)
        back = decode_record(raw)
        assert (back.round, back.client_id, back.kind) == (rec.round, rec.client_id, rec.kind)
        assert back.payload.tobytes() == payload.tobytes()
        assert encode_record(back) == raw


@settings(max_examples=200)
@given(arrays(np.float32, st.integers(0, 40), elements=st.floats(width=32, allow_nan=False)))
def test_round_trip_bit_exact(payload):
    raw = encode_record(WireRecord(1, 2, KIND_LOSS_DIFFS, payload))
    assert decode_record(raw, expected_count=payload.size).payload.tobytes() == payload.astype("<f4").tobytes()


def test_decode_errors_carry_offsets():
    good = encode_record(WireRecord(1, 2, KIND_LOSS_DIFFS, np.ones(3)))
    cases = {
        b"XFFL" + good[4:]: 0,
        good[:4] + struct.pack("<H", 2) + good[6:]: 4,
        good[:14] + bytes([9]) + good[15:]: 14,
    }
    for raw, offset in cases.items():
        with pytest.raises(IngestionError) as exc:
            decode_record(raw)
        assert exc.value.offset == offset
    with pytest.raises(IngestionError) as exc:
        decode_record(good[:-1])
    assert exc.value.offset == len(good) - 1
    with pytest.raises(IngestionError):
        decode_record(good[:10])
    with pytest.raises(IngestionError) as exc:
        decode_record(good, expected_count=4)
    assert exc.value.offset == 15
    with pytest.raises(ValueError):
        encode_record(WireRecord(0, 0, 3, np.zeros(1)))


def test_encoding_is_deterministic():
    rec = WireRecord(5, 1, KIND_LOSS_DIFFS, np.linspace(-1, 1, 9))
    assert encode_record(rec) == encode_record(rec)
