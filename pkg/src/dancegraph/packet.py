"""Wire-level signal packet framing.

One packet per UDP datagram. Layout, little-endian:

    offset  size  field
    0       2     magic 0xDA 0x9C
    2       1     version (currently 1)
    3       1     signal type (1=pose, 2=control, 3=telemetry)
    4       2     user id
    6       4     sequence number
    10      8     send timestamp, microseconds
    18      n     payload

The payload length is not carried on the wire: datagram transports preserve
message boundaries, so it is derived from the buffer size at parse time (and
exposed as `payload_len` on the parsed packet). An empty-payload packet is
exactly 18 bytes.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import TYPE_CHECKING

if TYPE_CHECKING:  # pragma: no cover - annotation only, avoids an import cycle
    from .router import Origin

__all__ = [
    "MAGIC",
    "WIRE_VERSION",
    "HEADER_SIZE",
    "MAX_PAYLOAD",
    "SignalType",
    "SignalPacket",
    "CorruptPacketError",
    "PayloadTooLargeError",
    "frame_packet",
    "parse_packet",
]

MAGIC = b"\xda\x9c"
WIRE_VERSION = 1
HEADER_SIZE = 18
# A single unfragmented datagram below common path MTU; a 34-joint compressed
# pose (~224 bytes) fits with wide margin.
MAX_PAYLOAD = 1400

_HEADER = struct.Struct("<2sBBHIQ")
assert _HEADER.size == HEADER_SIZE


class CorruptPacketError(ValueError):
    """Buffer is not a well-formed packet; count it and carry on."""


class PayloadTooLargeError(ValueError):
    pass


class SignalType(IntEnum):
    POSE = 1
    CONTROL = 2
    TELEMETRY = 3


@dataclass
class SignalPacket:
    """Parsed packet header plus payload.

    `recv_timestamp_us` and `origin` are local annotations stamped by the
    receiving side (they never travel on the wire).
    """

    signal_type: SignalType
    user_id: int
    seq: int
    send_timestamp_us: int
    payload: bytes = b""
    version: int = WIRE_VERSION
    recv_timestamp_us: int | None = None
    origin: "Origin | None" = None

    @property
    def payload_len(self) -> int:
        return len(self.payload)

    @property
    def wire_size(self) -> int:
        return HEADER_SIZE + len(self.payload)

    def to_bytes(self) -> bytes:
        return frame_packet(
            self.signal_type, self.user_id, self.seq, self.send_timestamp_us, self.payload
        )


def frame_packet(
    signal_type: SignalType | int,
    user_id: int,
    seq: int,
    send_timestamp_us: int,
    payload: bytes = b"",
) -> bytes:
    """Emit the exact wire layout; deterministic bytes for identical inputs."""
    if len(payload) > MAX_PAYLOAD:
        raise PayloadTooLargeError(
            f"payload is {len(payload)} bytes, limit is {MAX_PAYLOAD}"
        )
    return _HEADER.pack(
        MAGIC, WIRE_VERSION, int(signal_type), user_id, seq, send_timestamp_us
    ) + payload


def parse_packet(data: bytes) -> SignalPacket:
    """Validate and destructure a datagram.

    Raises CorruptPacketError on bad magic, short buffers, unknown version
    or signal type, or oversize payloads; callers count the drop and keep
    receiving.
    """
    if len(data) < HEADER_SIZE:
        raise CorruptPacketError(f"buffer too short: {len(data)} bytes")
    magic, version, sig_type, user_id, seq, send_ts = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptPacketError(f"bad magic {magic!r}")
    if version != WIRE_VERSION:
        raise CorruptPacketError(f"unsupported version {version}")
    try:
        signal_type = SignalType(sig_type)
    except ValueError as exc:
        raise CorruptPacketError(f"unknown signal type {sig_type}") from exc
    if len(data) - HEADER_SIZE > MAX_PAYLOAD:
        raise CorruptPacketError(f"payload exceeds {MAX_PAYLOAD} bytes")
    return SignalPacket(
        signal_type=signal_type,
        user_id=user_id,
        seq=seq,
        send_timestamp_us=send_ts,
        payload=bytes(data[HEADER_SIZE:]),
        version=version,
    )
