"""Skeleton, pose, and quaternion primitives shared by every other module.

All types here are immutable values and all operations are pure functions,
so they are safe to use from any number of threads without coordination.

Quaternions follow the (x, y, z, w) component order throughout the package.
The canonical hemisphere convention is w >= 0: the stream carries no sign
bit for the scalar part, so reconstruction after dropping w only works if
the sign is fixed at ingestion.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

__all__ = [
    "BodyZone",
    "UnitQuaternion",
    "Skeleton",
    "PoseFrame",
    "InvalidQuaternionError",
    "MeanConvergenceError",
    "canonicalize",
    "geodesic_mean",
    "scale_rotation",
    "geodesic_distance",
    "quat_multiply",
    "quat_conjugate",
    "rotate_vector",
    "from_axis_angle",
    "slerp",
    "default_skeleton",
    "IDENTITY",
]

# A quaternion this close to unit norm is treated as already normalized;
# rescaling it again would only churn the low bits and break the bit-for-bit
# idempotence of canonicalize().
_ALREADY_UNIT_TOL = 1e-12

_MEAN_MAX_ITERATIONS = 64

# Below this |w| the relative rotation is treated as a half-turn, where the
# log map's axis is ambiguous.
_DEGENERATE_W = 1e-9


class InvalidQuaternionError(ValueError):
    """Raised when an input quaternion cannot represent a rotation."""


class MeanConvergenceError(RuntimeError):
    """Raised when iterative rotation averaging fails to settle."""


class BodyZone(Enum):
    HIPS = "hips"
    SHOULDERS = "shoulders"
    HANDS = "hands"
    HEAD = "head"
    LEGS = "legs"
    SPINE = "spine"
    OTHER = "other"


class UnitQuaternion(NamedTuple):
    """Rotation as a unit quaternion, components ordered (x, y, z, w)."""

    x: float
    y: float
    z: float
    w: float

    def norm(self) -> float:
        return math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z + self.w * self.w)

    def angle(self) -> float:
        """Rotation angle in radians, in [0, pi] for canonical quaternions."""
        vn = math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)
        return 2.0 * math.atan2(vn, abs(self.w))


IDENTITY = UnitQuaternion(0.0, 0.0, 0.0, 1.0)


def canonicalize(q: UnitQuaternion | Sequence[float]) -> UnitQuaternion:
    """Normalize a quaternion and force it onto the w >= 0 hemisphere.

    If w lands exactly on 0 the first nonzero component among (x, y, z) is
    made non-negative so every rotation has exactly one representative.
    Idempotent bit-for-bit: feeding the result back in returns it unchanged.
    """
    x, y, z, w = q
    n2 = x * x + y * y + z * z + w * w
    if not math.isfinite(n2) or n2 <= 0.0:
        raise InvalidQuaternionError(f"quaternion norm must be positive and finite, got {q!r}")
    if abs(n2 - 1.0) > _ALREADY_UNIT_TOL:
        inv = 1.0 / math.sqrt(n2)
        x, y, z, w = x * inv, y * inv, z * inv, w * inv
    if w < 0.0:
        x, y, z, w = -x, -y, -z, -w
    elif w == 0.0:
        for c in (x, y, z):
            if c != 0.0:
                if c < 0.0:
                    x, y, z = -x, -y, -z
                break
    return UnitQuaternion(x, y, z, w)


def quat_multiply(a: UnitQuaternion, b: UnitQuaternion) -> UnitQuaternion:
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return UnitQuaternion(
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    )


def quat_conjugate(q: UnitQuaternion) -> UnitQuaternion:
    return UnitQuaternion(-q.x, -q.y, -q.z, q.w)


def rotate_vector(q: UnitQuaternion, v: Sequence[float]) -> tuple[float, float, float]:
    """Rotate a 3-vector by a unit quaternion."""
    x, y, z, w = q
    vx, vy, vz = v
    tx = 2.0 * (y * vz - z * vy)
    ty = 2.0 * (z * vx - x * vz)
    tz = 2.0 * (x * vy - y * vx)
    return (
        vx + w * tx + (y * tz - z * ty),
        vy + w * ty + (z * tx - x * tz),
        vz + w * tz + (x * ty - y * tx),
    )


def from_axis_angle(axis: Sequence[float], angle: float) -> UnitQuaternion:
    """Canonical quaternion rotating by `angle` radians about `axis`."""
    ax, ay, az = axis
    n = math.sqrt(ax * ax + ay * ay + az * az)
    if n == 0.0:
        raise InvalidQuaternionError("rotation axis must be nonzero")
    h = 0.5 * angle
    s = math.sin(h) / n
    return canonicalize(UnitQuaternion(ax * s, ay * s, az * s, math.cos(h)))


def geodesic_distance(a: UnitQuaternion, b: UnitQuaternion) -> float:
    """Angle of the rotation taking a to b, in [0, pi]."""
    d = abs(a.x * b.x + a.y * b.y + a.z * b.z + a.w * b.w)
    return 2.0 * math.acos(min(1.0, d))


def _log_half(q: UnitQuaternion) -> tuple[float, float, float, bool]:
    """Half-angle log map of a unit quaternion with w >= 0.

    Returns the tangent vector (axis * theta/2) plus a flag marking the
    half-turn case where the axis direction is taken from the vector part
    as-is because the true axis is ambiguous.
    """
    x, y, z, w = q
    vn = math.sqrt(x * x + y * y + z * z)
    degenerate = w < _DEGENERATE_W
    if vn == 0.0:
        return 0.0, 0.0, 0.0, False
    half = math.atan2(vn, w)
    f = half / vn
    return x * f, y * f, z * f, degenerate


def _exp_half(u: Sequence[float]) -> UnitQuaternion:
    """Inverse of _log_half: tangent vector (axis * theta/2) to quaternion."""
    ux, uy, uz = u
    half = math.sqrt(ux * ux + uy * uy + uz * uz)
    if half < 1e-12:
        return UnitQuaternion(ux, uy, uz, 1.0)
    s = math.sin(half) / half
    return UnitQuaternion(ux * s, uy * s, uz * s, math.cos(half))


def scale_rotation(
    reference: UnitQuaternion,
    q: UnitQuaternion,
    gain: float,
    *,
    return_degenerate: bool = False,
):
    """Geodesically extrapolate q away from reference by `gain`.

    Computes reference * exp(gain * log(reference^-1 * q)); gain 1 returns
    q (up to rounding), gain 0 returns reference exactly, gain 2 doubles
    the rotation away from the reference. For a half-turn relative rotation
    the log's axis is ambiguous; the axis of the input's vector part is
    used and the degenerate flag is set instead of failing, so a streaming
    pipeline never halts on one bad frame.
    """
    if gain < 0.0:
        raise ValueError(f"gain must be >= 0, got {gain}")
    rel = quat_multiply(quat_conjugate(reference), q)
    if rel.w < 0.0:
        rel = UnitQuaternion(-rel.x, -rel.y, -rel.z, -rel.w)
    ux, uy, uz, degenerate = _log_half(rel)
    out = canonicalize(quat_multiply(reference, _exp_half((ux * gain, uy * gain, uz * gain))))
    if return_degenerate:
        return out, degenerate
    return out


def slerp(a: UnitQuaternion, b: UnitQuaternion, u: float) -> UnitQuaternion:
    """Spherical-linear interpolation from a (u=0) to b (u=1), shorter arc."""
    if u == 0.0:
        return a
    if u == 1.0:
        return b
    dot = a.x * b.x + a.y * b.y + a.z * b.z + a.w * b.w
    bx, by, bz, bw = b
    if dot < 0.0:
        dot = -dot
        bx, by, bz, bw = -bx, -by, -bz, -bw
    if dot > 1.0 - 1e-9:
        # Nearly parallel: linear blend then renormalize.
        out = UnitQuaternion(
            a.x + (bx - a.x) * u,
            a.y + (by - a.y) * u,
            a.z + (bz - a.z) * u,
            a.w + (bw - a.w) * u,
        )
        n = out.norm()
        return UnitQuaternion(out.x / n, out.y / n, out.z / n, out.w / n)
    theta = math.acos(min(1.0, dot))
    s = math.sin(theta)
    ka = math.sin((1.0 - u) * theta) / s
    kb = math.sin(u * theta) / s
    return UnitQuaternion(
        a.x * ka + bx * kb,
        a.y * ka + by * kb,
        a.z * ka + bz * kb,
        a.w * ka + bw * kb,
    )


def geodesic_mean(
    quats: Sequence[UnitQuaternion],
    tolerance: float = 1e-8,
) -> UnitQuaternion:
    """Rotation minimizing the sum of squared geodesic distances.

    Iterative tangent-space averaging: lift the samples into the tangent
    space at the current estimate, step to their mean, repeat until the
    update step's rotation angle drops below `tolerance` radians.
    """
    if len(quats) == 0:
        raise ValueError("cannot average an empty list of rotations")
    arr = np.asarray(quats, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise InvalidQuaternionError("expected a sequence of (x, y, z, w) quaternions")
    mean = karcher_mean_rows(arr, tolerance)
    return canonicalize(UnitQuaternion(*mean))


# ---------------------------------------------------------------------------
# Row-vectorized quaternion helpers operating on (N, 4) float64 arrays in
# (x, y, z, w) column order. Used by the codec and the rhythm engine where
# per-joint Python loops would be too slow.
# ---------------------------------------------------------------------------

def rows_normalize(arr: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(arr, axis=-1, keepdims=True)
    return arr / norms


def rows_canonicalize(arr: np.ndarray) -> np.ndarray:
    """Vectorized canonicalize over rows (w >= 0, normalized)."""
    out = rows_normalize(np.asarray(arr, dtype=np.float64))
    w = out[..., 3]
    flip = w < 0.0
    tie = w == 0.0
    if np.any(tie):
        v = out[..., :3]
        nz = np.abs(v) > 0.0
        first = np.argmax(nz, axis=-1)
        lead = np.take_along_axis(v, first[..., None], axis=-1)[..., 0]
        flip = flip | (tie & (lead < 0.0))
    out[flip] = -out[flip]
    return out


def rows_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ax, ay, az, aw = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bx, by, bz, bw = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ],
        axis=-1,
    )


def rows_conjugate(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out[..., :3] *= -1.0
    return out


def rows_log_half(arr: np.ndarray) -> np.ndarray:
    """Half-angle log map per row; rows are flipped onto w >= 0 first."""
    q = np.asarray(arr, dtype=np.float64)
    q = np.where(q[..., 3:4] < 0.0, -q, q)
    v = q[..., :3]
    vn = np.linalg.norm(v, axis=-1)
    half = np.arctan2(vn, q[..., 3])
    f = np.where(vn > 1e-12, half / np.where(vn > 1e-12, vn, 1.0), 1.0)
    return v * f[..., None]


def rows_exp_half(vec: np.ndarray) -> np.ndarray:
    half = np.linalg.norm(vec, axis=-1)
    s = np.where(half > 1e-12, np.sin(half) / np.where(half > 1e-12, half, 1.0), 1.0)
    return np.concatenate([vec * s[..., None], np.cos(half)[..., None]], axis=-1)


def rows_slerp(a: np.ndarray, b: np.ndarray, u: float) -> np.ndarray:
    """Row-wise slerp between two (N, 4) arrays at a single blend factor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dot = (a * b).sum(axis=-1)
    b = np.where(dot[..., None] < 0.0, -b, b)
    dot = np.abs(dot)
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    s = np.sin(theta)
    near = s < 1e-6
    safe_s = np.where(near, 1.0, s)
    ka = np.where(near, 1.0 - u, np.sin((1.0 - u) * theta) / safe_s)
    kb = np.where(near, u, np.sin(u * theta) / safe_s)
    return rows_normalize(a * ka[..., None] + b * kb[..., None])


def karcher_mean_rows(
    rows: np.ndarray,
    tolerance: float = 1e-8,
    init: np.ndarray | None = None,
    max_iterations: int = _MEAN_MAX_ITERATIONS,
) -> np.ndarray:
    """Tangent-space iterative mean of an (N, 4) array of unit quaternions."""
    arr = rows_normalize(np.asarray(rows, dtype=np.float64))
    mean = np.array(arr[0] if init is None else init, dtype=np.float64)
    mean /= np.linalg.norm(mean)
    for _ in range(max_iterations):
        # Resolve double cover towards the current mean before averaging.
        signs = np.where(arr @ mean < 0.0, -1.0, 1.0)
        rel = rows_multiply(rows_conjugate(np.broadcast_to(mean, arr.shape)), arr * signs[:, None])
        step = rows_log_half(rel).mean(axis=0)
        mean = rows_multiply(mean, rows_exp_half(step))
        mean /= np.linalg.norm(mean)
        if 2.0 * np.linalg.norm(step) < tolerance:
            return mean
    raise MeanConvergenceError(
        f"rotation averaging did not converge in {max_iterations} iterations"
    )


# ---------------------------------------------------------------------------
# Skeleton and pose frames
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Skeleton:
    """Flat joint list with a body-zone label per joint.

    No parent links are modeled: nothing in the streaming or corrective
    pipeline needs the kinematic hierarchy.
    """

    joint_names: tuple[str, ...]
    zone_map: Mapping[int, BodyZone]

    def __post_init__(self) -> None:
        if len(self.joint_names) < 1:
            raise ValueError("skeleton needs at least one joint")
        if len(set(self.joint_names)) != len(self.joint_names):
            raise ValueError("joint names must be unique")
        expected = set(range(len(self.joint_names)))
        if set(self.zone_map.keys()) != expected:
            raise ValueError("zone_map must cover every joint index exactly once")
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(self, "zone_map", dict(self.zone_map))

    @property
    def joint_count(self) -> int:
        return len(self.joint_names)

    def zone_of(self, joint: int) -> BodyZone:
        return self.zone_map[joint]

    def joints_in_zone(self, zone: BodyZone) -> list[int]:
        return [j for j, z in self.zone_map.items() if z is zone]


def _default_rig() -> tuple[tuple[str, ...], dict[int, BodyZone]]:
    z = BodyZone
    spec: list[tuple[str, BodyZone]] = [
        ("pelvis", z.HIPS),
        ("spine_naval", z.SPINE),
        ("spine_chest", z.SPINE),
        ("neck", z.HEAD),
        ("clavicle_left", z.SHOULDERS),
        ("shoulder_left", z.SHOULDERS),
        ("elbow_left", z.OTHER),
        ("wrist_left", z.HANDS),
        ("hand_left", z.HANDS),
        ("handtip_left", z.HANDS),
        ("thumb_left", z.HANDS),
        ("clavicle_right", z.SHOULDERS),
        ("shoulder_right", z.SHOULDERS),
        ("elbow_right", z.OTHER),
        ("wrist_right", z.HANDS),
        ("hand_right", z.HANDS),
        ("handtip_right", z.HANDS),
        ("thumb_right", z.HANDS),
        ("hip_left", z.HIPS),
        ("knee_left", z.LEGS),
        ("ankle_left", z.LEGS),
        ("foot_left", z.LEGS),
        ("hip_right", z.HIPS),
        ("knee_right", z.LEGS),
        ("ankle_right", z.LEGS),
        ("foot_right", z.LEGS),
        ("head", z.HEAD),
        ("nose", z.HEAD),
        ("eye_left", z.HEAD),
        ("ear_left", z.HEAD),
        ("eye_right", z.HEAD),
        ("ear_right", z.HEAD),
        ("heel_left", z.LEGS),
        ("heel_right", z.LEGS),
    ]
    names = tuple(name for name, _ in spec)
    zones = {i: zone for i, (_, zone) in enumerate(spec)}
    return names, zones


_DEFAULT_NAMES, _DEFAULT_ZONES = _default_rig()


def default_skeleton() -> Skeleton:
    """The default 34-joint rig used by common depth-camera body trackers."""
    return Skeleton(_DEFAULT_NAMES, _DEFAULT_ZONES)


@dataclass(frozen=True)
class PoseFrame:
    """One timestamped pose: root translation plus a rotation per joint.

    `timestamp_us` is microseconds on the source's monotonic clock and must
    be non-decreasing within a stream. Rotations are expected canonical
    (w >= 0); ingestion enforces that, downstream code relies on it.
    """

    timestamp_us: int
    root_translation: tuple[float, float, float]
    rotations: tuple[UnitQuaternion, ...]

    def rotation_array(self) -> np.ndarray:
        """Rotations as an (N, 4) float64 array in (x, y, z, w) order."""
        return np.asarray(self.rotations, dtype=np.float64)

    @classmethod
    def from_array(
        cls,
        timestamp_us: int,
        root_translation: Sequence[float],
        rotations: np.ndarray,
    ) -> "PoseFrame":
        rx, ry, rz = root_translation
        quats = tuple(UnitQuaternion(*row) for row in rotations.tolist())
        return cls(int(timestamp_us), (float(rx), float(ry), float(rz)), quats)

    def validate(self, skeleton: Skeleton, norm_tol: float = 1e-6) -> None:
        if len(self.rotations) != skeleton.joint_count:
            raise ValueError(
                f"frame has {len(self.rotations)} rotations, skeleton has "
                f"{skeleton.joint_count} joints"
            )
        arr = self.rotation_array()
        norms = np.linalg.norm(arr, axis=1)
        if np.any(np.abs(norms - 1.0) > norm_tol):
            raise InvalidQuaternionError("frame contains non-unit rotations")
        if np.any(arr[:, 3] < 0.0):
            raise InvalidQuaternionError("frame contains non-canonical rotations (w < 0)")


def canonicalize_frames(frames: Iterable[PoseFrame]) -> list[PoseFrame]:
    """Canonicalize every rotation in a stream of frames (ingestion step)."""
    out = []
    for f in frames:
        arr = rows_canonicalize(f.rotation_array())
        out.append(PoseFrame.from_array(f.timestamp_us, f.root_translation, arr))
    return out
