"""Binary encoding of simulated client uploads.

Layout (little-endian)::

    offset  size  field
    0       4     magic b"BFFL"
    4       2     version (u16)
    6       4     round (u32)
    10      4     client_id (u32)
    14      1     kind (u8): 1 = loss differences, 2 = parameter delta
    15      4     count (u32)
    19      4*count  payload, IEEE-754 float32

The payload alone is what the uplink byte counters report; the 19 header
bytes are tracked separately as overhead.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import IngestionError

MAGIC = b"BFFL"
VERSION = 1
KIND_LOSS_DIFFS = 1
KIND_PARAM_DELTA = 2
_HEADER = struct.Struct("<4sHIIBI")
HEADER_BYTES = _HEADER.size


@dataclass(frozen=True)
class WireRecord:
    round: int
    client_id: int
    kind: int
    payload: np.ndarray

    @property
    def count(self) -> int:
        return int(self.payload.shape[0])

    @property
    def payload_bytes(self) -> int:
        return 4 * self.count


def encode_record(record: WireRecord) -> bytes:
    if record.kind not in (KIND_LOSS_DIFFS, KIND_PARAM_DELTA):
        raise ValueError(f"unknown record kind {record.kind}")
    payload = np.asarray(record.payload, dtype="<f4")
    header = _HEADER.pack(MAGIC, VERSION, record.round, record.client_id, record.kind, payload.shape[0])
    return header + payload.tobytes()


def decode_record(data: bytes, expected_count: int | None = None) -> WireRecord:
    if len(data) < HEADER_BYTES:
        raise IngestionError(f"record truncated: {len(data)} bytes, header needs {HEADER_BYTES}", offset=len(data))
    magic, version, round_, client_id, kind, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise IngestionError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise IngestionError(f"unsupported version {version}", offset=4)
    if kind not in (KIND_LOSS_DIFFS, KIND_PARAM_DELTA):
        raise IngestionError(f"unknown record kind {kind}", offset=14)
    expected_len = HEADER_BYTES + 4 * count
    if len(data) != expected_len:
        raise IngestionError(
            f"payload length mismatch: record is {len(data)} bytes, header implies {expected_len}",
            offset=min(len(data), expected_len),
        )
    if expected_count is not None and count != expected_count:
        raise IngestionError(f"count {count} != expected {expected_count}", offset=15)
    payload = np.frombuffer(data, dtype="<f4", count=count, offset=HEADER_BYTES).astype(np.float32)
    return WireRecord(round=round_, client_id=client_id, kind=kind, payload=payload)
