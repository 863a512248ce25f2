"""Pose frame compression using dropped-w quaternions and per-joint bounds.

Each joint's (x, y, z) components are quantized against numeric ranges
measured from a motion corpus; w is always dropped and rebuilt from the
other three at decode time. Because canonical quaternions keep w >= 0, no
sign bit is needed, and because w is in practice the largest component of
body-pose rotations, dropping it (rather than the per-quaternion largest)
avoids spending two bits on a component index.

The codec is exact on its own quantization grid: re-encoding a decoded
frame reproduces the encoded bits, and the residual rotation error of a
single trip is bounded by max_angular_error().
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np

from .core import PoseFrame, Skeleton

__all__ = [
    "BoundsTable",
    "EncodedFrame",
    "EncoderStats",
    "ShapeMismatchError",
    "CorruptFrameError",
    "analyze_bounds",
    "encode_frame",
    "decode_frame",
    "max_angular_error",
    "encoded_frame_bytes",
    "raw_frame_bytes",
]

_COMPONENTS = ("x", "y", "z")
_DEGENERATE_RANGE = 1e-6
_RANGE_FLOOR = 1e-3

# EncodedFrame wire prefix: u64 timestamp_us + 3 x f32 root, little-endian.
_FRAME_PREFIX = struct.Struct("<Qfff")


class ShapeMismatchError(ValueError):
    """Frame and table (or corpus streams) disagree on joint layout."""


class CorruptFrameError(ValueError):
    """Encoded payload cannot be a well-formed frame for the given table."""


@dataclass(frozen=True)
class BoundsTable:
    """Per-joint, per-component quantization ranges learned from a corpus."""

    joint_names: tuple[str, ...]
    lo: np.ndarray  # (joints, 3) in x, y, z column order
    hi: np.ndarray
    bits: int = 16
    version: int = 1

    def __post_init__(self) -> None:
        lo = np.array(self.lo, dtype=np.float64)
        hi = np.array(self.hi, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 2 or lo.shape[1] != 3:
            raise ShapeMismatchError("bounds must be (joints, 3) arrays")
        if lo.shape[0] != len(self.joint_names):
            raise ShapeMismatchError("bounds rows must match joint names")
        if not (8 <= self.bits <= 24):
            raise ValueError(f"bits_per_component must be in [8, 24], got {self.bits}")
        if np.any(lo >= hi):
            raise ValueError("every bound must satisfy lo < hi")
        if np.any(lo < -1.0) or np.any(hi > 1.0):
            raise ValueError("bounds must lie within [-1, 1]")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def joint_count(self) -> int:
        return len(self.joint_names)

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1

    @property
    def step(self) -> np.ndarray:
        """Quantization step per joint component, shape (joints, 3)."""
        return (self.hi - self.lo) / self.levels

    @property
    def payload_bits(self) -> int:
        return self.joint_count * 3 * self.bits

    @property
    def payload_bytes(self) -> int:
        return (self.payload_bits + 7) // 8

    def to_json(self, dest: str | Path | IO[str]) -> None:
        doc = {
            "version": self.version,
            "bits": self.bits,
            "joints": [
                {
                    "name": name,
                    "x": [float(self.lo[j, 0]), float(self.hi[j, 0])],
                    "y": [float(self.lo[j, 1]), float(self.hi[j, 1])],
                    "z": [float(self.lo[j, 2]), float(self.hi[j, 2])],
                }
                for j, name in enumerate(self.joint_names)
            ],
        }
        if hasattr(dest, "write"):
            json.dump(doc, dest, indent=2)
        else:
            with open(dest, "w", encoding="utf-8") as fh:
                json.dump(doc, fh, indent=2)

    @classmethod
    def from_json(cls, src: str | Path | IO[str]) -> "BoundsTable":
        if hasattr(src, "read"):
            doc = json.load(src)
        else:
            with open(src, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        joints = doc["joints"]
        names = tuple(entry["name"] for entry in joints)
        lo = np.array([[entry[c][0] for c in _COMPONENTS] for entry in joints])
        hi = np.array([[entry[c][1] for c in _COMPONENTS] for entry in joints])
        return cls(names, lo, hi, bits=int(doc["bits"]), version=int(doc["version"]))


@dataclass
class EncoderStats:
    """Mutable clamp accounting owned by a single encoding activity."""

    frames: int = 0
    clamped_components: int = 0


@dataclass(frozen=True)
class EncodedFrame:
    """Bit-packed frame: timestamp and root pass through uncompressed."""

    timestamp_us: int
    root_translation: tuple[float, float, float]
    payload: bytes

    def to_bytes(self) -> bytes:
        rx, ry, rz = self.root_translation
        return _FRAME_PREFIX.pack(self.timestamp_us, rx, ry, rz) + self.payload

    @classmethod
    def from_bytes(cls, data: bytes, table: BoundsTable) -> "EncodedFrame":
        need = _FRAME_PREFIX.size + table.payload_bytes
        if len(data) != need:
            raise CorruptFrameError(f"expected {need} bytes, got {len(data)}")
        ts, rx, ry, rz = _FRAME_PREFIX.unpack_from(data)
        return cls(ts, (rx, ry, rz), bytes(data[_FRAME_PREFIX.size:]))

    @property
    def byte_size(self) -> int:
        return _FRAME_PREFIX.size + len(self.payload)


def analyze_bounds(
    corpus: Iterable[Sequence[PoseFrame]],
    margin: float = 0.1,
    bits: int = 16,
    *,
    joint_names: Sequence[str] | None = None,
    version: int = 1,
) -> BoundsTable:
    """Measure per-joint component ranges over a corpus of pose streams.

    Each joint component's (lo, hi) is the observed min/max widened by
    `margin` times the observed range, clamped to [-1, 1]. Components that
    barely move get a floor range of 1e-3 centered on the observed value so
    the quantizer never divides by a degenerate span.
    """
    if not (0.0 <= margin <= 0.5):
        raise ValueError(f"margin must be in [0, 0.5], got {margin}")
    mins: np.ndarray | None = None
    maxs: np.ndarray | None = None
    joint_count: int | None = None
    total_frames = 0
    for stream in corpus:
        if len(stream) == 0:
            continue
        arr = np.stack([f.rotation_array() for f in stream])  # (frames, J, 4)
        if joint_count is None:
            joint_count = arr.shape[1]
        elif arr.shape[1] != joint_count:
            raise ShapeMismatchError(
                f"corpus streams disagree on joint count: {arr.shape[1]} vs {joint_count}"
            )
        if np.any(arr[:, :, 3] < 0.0):
            raise ValueError("corpus frames must be canonicalized (w >= 0) before analysis")
        v = arr[:, :, :3]
        smin = v.min(axis=0)
        smax = v.max(axis=0)
        mins = smin if mins is None else np.minimum(mins, smin)
        maxs = smax if maxs is None else np.maximum(maxs, smax)
        total_frames += arr.shape[0]
    if joint_count is None or total_frames == 0:
        raise ValueError("corpus is empty: need at least one stream with frames")

    rng = maxs - mins
    lo = mins - margin * rng
    hi = maxs + margin * rng
    degenerate = rng < _DEGENERATE_RANGE
    center = (mins + maxs) / 2.0
    lo = np.where(degenerate, center - _RANGE_FLOOR / 2.0, lo)
    hi = np.where(degenerate, center + _RANGE_FLOOR / 2.0, hi)
    lo = np.clip(lo, -1.0, 1.0)
    hi = np.clip(hi, -1.0, 1.0)
    # Clamping can collapse a span that hugged the boundary; reopen minimally.
    collapsed = hi - lo < _DEGENERATE_RANGE
    lo = np.where(collapsed & (lo > -1.0 + _RANGE_FLOOR), hi - _RANGE_FLOOR, lo)
    hi = np.where(collapsed & (lo <= -1.0 + _RANGE_FLOOR), lo + _RANGE_FLOOR, hi)

    if joint_names is None:
        joint_names = tuple(f"joint_{i:02d}" for i in range(joint_count))
    elif len(joint_names) != joint_count:
        raise ShapeMismatchError("joint_names length must match corpus joint count")
    return BoundsTable(tuple(joint_names), lo, hi, bits=bits, version=version)


def _pack_ints(values: np.ndarray, bits: int) -> bytes:
    """Bit-pack unsigned ints MSB-first into a zero-padded byte string."""
    if bits == 8:
        return values.astype(">u1").tobytes()
    if bits == 16:
        return values.astype(">u2").tobytes()
    if bits == 24:
        v = values.astype(np.uint32)
        out = np.empty((v.size, 3), dtype=np.uint8)
        out[:, 0] = v >> 16
        out[:, 1] = (v >> 8) & 0xFF
        out[:, 2] = v & 0xFF
        return out.tobytes()
    acc = 0
    for v in values.tolist():
        acc = (acc << bits) | int(v)
    total = values.size * bits
    pad = (-total) % 8
    acc <<= pad
    return acc.to_bytes((total + pad) // 8, "big")


def _unpack_ints(payload: bytes, count: int, bits: int) -> np.ndarray:
    if bits == 8:
        return np.frombuffer(payload, dtype=">u1").astype(np.int64)
    if bits == 16:
        return np.frombuffer(payload, dtype=">u2").astype(np.int64)
    if bits == 24:
        raw = np.frombuffer(payload, dtype=np.uint8).reshape(count, 3).astype(np.int64)
        return (raw[:, 0] << 16) | (raw[:, 1] << 8) | raw[:, 2]
    total = count * bits
    pad = (-total) % 8
    acc = int.from_bytes(payload, "big") >> pad
    mask = (1 << bits) - 1
    out = np.empty(count, dtype=np.int64)
    for i in range(count - 1, -1, -1):
        out[i] = acc & mask
        acc >>= bits
    return out


def encode_frame(
    frame: PoseFrame,
    table: BoundsTable,
    stats: EncoderStats | None = None,
) -> EncodedFrame:
    """Quantize a canonical frame against the table and bit-pack it.

    Components are mapped to round((v - lo) / (hi - lo) * (2^bits - 1)) with
    half-way values rounded away from zero, fixed across platforms so golden
    payloads compare bit-for-bit. Out-of-bounds inputs clamp to the edge of
    the grid and are tallied in `stats` instead of escaping the fixed-size
    layout.
    """
    arr = frame.rotation_array()
    if arr.shape[0] != table.joint_count:
        raise ShapeMismatchError(
            f"frame has {arr.shape[0]} joints, table has {table.joint_count}"
        )
    if np.any(arr[:, 3] < 0.0):
        raise ValueError("frame must be canonicalized (w >= 0) before encoding")
    v = arr[:, :3]
    levels = table.levels
    scaled = (v - table.lo) / (table.hi - table.lo) * levels
    # round-half-away-from-zero; scaled is only negative when out of bounds
    # below, and those clip to 0 anyway.
    ints = np.floor(scaled + 0.5)
    if stats is not None:
        stats.frames += 1
        stats.clamped_components += int(((v < table.lo) | (v > table.hi)).sum())
    ints = np.clip(ints, 0, levels).astype(np.uint32)
    payload = _pack_ints(ints.reshape(-1), table.bits)
    return EncodedFrame(frame.timestamp_us, frame.root_translation, payload)


def decode_frame(enc: EncodedFrame, table: BoundsTable, skeleton: Skeleton) -> PoseFrame:
    """Rebuild a pose frame: dequantize x, y, z and reconstruct w.

    w = sqrt(max(0, 1 - x^2 - y^2 - z^2)); the result is renormalized only
    when quantization pushed the vector part outside the unit ball, keeping
    the common path bit-stable.
    """
    if skeleton.joint_count != table.joint_count:
        raise ShapeMismatchError(
            f"skeleton has {skeleton.joint_count} joints, table has {table.joint_count}"
        )
    if len(enc.payload) != table.payload_bytes:
        raise CorruptFrameError(
            f"payload is {len(enc.payload)} bytes, table dimensions need {table.payload_bytes}"
        )
    ints = _unpack_ints(enc.payload, table.joint_count * 3, table.bits)
    ints = ints.reshape(table.joint_count, 3).astype(np.float64)
    v = table.lo + ints / table.levels * (table.hi - table.lo)
    w2 = 1.0 - (v * v).sum(axis=1)
    w = np.sqrt(np.clip(w2, 0.0, None))
    quats = np.concatenate([v, w[:, None]], axis=1)
    over = w2 < -1e-12
    if np.any(over):
        quats[over] /= np.linalg.norm(quats[over], axis=1, keepdims=True)
    return PoseFrame.from_array(enc.timestamp_us, enc.root_translation, quats)


def max_angular_error(table: BoundsTable) -> float:
    """Upper bound on single-trip geodesic reconstruction error, in radians.

    Per joint, the vector-part quantization error is at most half a step per
    component, giving a worst-case 4-vector chord of vec_err / w: rebuilding
    w turns component error into chord error amplified by 1/w. The rotation
    angle between unit quaternions at chord c is 4*asin(c/2). w is bounded
    below by the table itself (in-bounds values cannot push the vector part
    past the bound box) and floored at 0.1 to match the codec's operating
    envelope, where w is the largest component.
    """
    half_step = table.step / 2.0
    vec_err = np.sqrt((half_step**2).sum(axis=1))  # (J,)
    worst_comp = np.maximum(table.lo**2, table.hi**2)
    w_min = np.sqrt(np.clip(1.0 - worst_comp.sum(axis=1), 0.0, None))
    amp = 1.0 / np.maximum(w_min, 0.1)
    bound = 4.0 * np.arcsin(np.minimum(1.0, 0.5 * vec_err * amp))
    return float(bound.max())


def encoded_frame_bytes(table: BoundsTable) -> int:
    """Total EncodedFrame wire size for one frame: timestamp + root + payload."""
    return _FRAME_PREFIX.size + table.payload_bytes


def raw_frame_bytes(joint_count: int) -> int:
    """Uncompressed frame size: u64 timestamp, 3 x f32 root, 4 x f32 per joint."""
    return 8 + 12 + joint_count * 16


def compression_ratio(table: BoundsTable) -> float:
    return encoded_frame_bytes(table) / raw_frame_bytes(table.joint_count)
