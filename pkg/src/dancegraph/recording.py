"""Binary pose recording files.

Layout, little-endian:

    magic "DGRC", u16 version, u16 joint_count, f32 nominal_fps
    then per frame: u64 timestamp_us, 3 x f32 root, joint_count x 4 x f32
    rotations in (x, y, z, w) order, stored raw (uncompressed).

Frames are written incrementally; a file interrupted mid-frame is truncated
back to the last complete frame on close, and the loader ignores a trailing
partial frame, so every file on disk replays.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
import numpy as np

from .core import PoseFrame

__all__ = [
    "Recording",
    "RecordingFormatError",
    "RecordingWriter",
    "save_recording",
    "load_recording",
]

MAGIC = b"DGRC"
VERSION = 1

_HEADER = struct.Struct("<4sHHf")
_FRAME_FIXED = struct.Struct("<Qfff")


class RecordingFormatError(ValueError):
    pass


@dataclass
class Recording:
    joint_count: int
    nominal_fps: float
    frames: list[PoseFrame]
    version: int = VERSION

    def __post_init__(self) -> None:
        if self.joint_count < 1:
            raise RecordingFormatError("joint_count must be >= 1")
        if self.nominal_fps <= 0:
            raise RecordingFormatError("nominal_fps must be positive")

    def validate(self) -> None:
        prev = None
        for i, frame in enumerate(self.frames):
            if len(frame.rotations) != self.joint_count:
                raise RecordingFormatError(f"frame {i} has wrong joint count")
            if prev is not None and frame.timestamp_us <= prev:
                raise RecordingFormatError(f"frame {i} timestamp does not increase")
            prev = frame.timestamp_us

    @property
    def duration_us(self) -> int:
        if len(self.frames) < 2:
            return 0
        return self.frames[-1].timestamp_us - self.frames[0].timestamp_us


class RecordingWriter:
    """Appends frames to disk as they arrive; close() truncates any partial
    tail so the file always ends on a frame boundary."""

    def __init__(self, path: str | Path, joint_count: int, nominal_fps: float):
        self.path = Path(path)
        self.joint_count = joint_count
        self.frame_size = _FRAME_FIXED.size + joint_count * 16
        self._fh = open(self.path, "wb")
        self._fh.write(_HEADER.pack(MAGIC, VERSION, joint_count, nominal_fps))
        self._complete = _HEADER.size
        self.frames_written = 0
        self._last_ts: int | None = None

    def write_frame(self, frame: PoseFrame) -> None:
        if len(frame.rotations) != self.joint_count:
            raise RecordingFormatError(
                f"frame has {len(frame.rotations)} joints, file expects {self.joint_count}"
            )
        if self._last_ts is not None and frame.timestamp_us <= self._last_ts:
            raise RecordingFormatError("frame timestamps must strictly increase")
        rx, ry, rz = frame.root_translation
        data = _FRAME_FIXED.pack(frame.timestamp_us, rx, ry, rz)
        data += frame.rotation_array().astype("<f4").tobytes()
        self._fh.write(data)
        self._complete += self.frame_size
        self.frames_written += 1
        self._last_ts = frame.timestamp_us

    def close(self) -> None:
        if self._fh.closed:
            return
        try:
            self._fh.flush()
            self._fh.truncate(self._complete)
        finally:
            self._fh.close()

    def __enter__(self) -> "RecordingWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def save_recording(recording: Recording, path: str | Path) -> None:
    recording.validate()
    with RecordingWriter(path, recording.joint_count, recording.nominal_fps) as writer:
        for frame in recording.frames:
            writer.write_frame(frame)


def load_recording(path: str | Path) -> Recording:
    """Load a recording, dropping any trailing partial frame."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise RecordingFormatError("file too short for a recording header")
    magic, version, joint_count, fps = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise RecordingFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise RecordingFormatError(f"unsupported recording version {version}")
    if joint_count < 1:
        raise RecordingFormatError("joint_count must be >= 1")
    frame_size = _FRAME_FIXED.size + joint_count * 16
    body = data[_HEADER.size:]
    count = len(body) // frame_size
    frames: list[PoseFrame] = []
    prev_ts: int | None = None
    for i in range(count):
        off = i * frame_size
        ts, rx, ry, rz = _FRAME_FIXED.unpack_from(body, off)
        if prev_ts is not None and ts <= prev_ts:
            raise RecordingFormatError(f"frame {i} timestamp does not increase")
        prev_ts = ts
        quats = np.frombuffer(
            body, dtype="<f4", count=joint_count * 4, offset=off + _FRAME_FIXED.size
        ).astype(np.float64).reshape(joint_count, 4)
        frames.append(PoseFrame.from_array(ts, (rx, ry, rz), quats))
    return Recording(joint_count=joint_count, nominal_fps=fps, frames=frames, version=version)
