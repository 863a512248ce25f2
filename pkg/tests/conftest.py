import math

import numpy as np
import pytest
from hypothesis import strategies as st

from dancegraph.core import PoseFrame, UnitQuaternion, canonicalize, default_skeleton


def unit_quaternions(min_w: float | None = None):
    """Strategy for canonical unit quaternions from raw 4-vectors."""

    def build(raw):
        x, y, z, w = raw
        n = math.sqrt(x * x + y * y + z * z + w * w)
        if n < 1e-6:
            return UnitQuaternion(0.0, 0.0, 0.0, 1.0)
        q = canonicalize(UnitQuaternion(x, y, z, w))
        if min_w is not None and q.w < min_w:
            return UnitQuaternion(0.0, 0.0, 0.0, 1.0)
        return q

    component = st.floats(-1.0, 1.0, allow_nan=False, allow_infinity=False)
    return st.tuples(component, component, component, component).map(build)


def w_largest_rows(rng: np.random.Generator, n: int) -> np.ndarray:
    """Canonical unit quaternions whose w is the largest-magnitude component.

    This is the codec's operating envelope: w is dropped on the wire
    precisely because it dominates in practice, and the reconstruction
    error bound scales with 1/w.
    """
    rows = []
    while len(rows) < n:
        q = rng.normal(size=(n, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        q[q[:, 3] < 0.0] *= -1.0
        keep = np.abs(q[:, 3]) >= np.abs(q[:, :3]).max(axis=1)
        rows.extend(q[keep].tolist())
    return np.asarray(rows[:n])


def frames_from_rows(rows: np.ndarray, joint_count: int) -> list[PoseFrame]:
    """Pack a (N, 4) quaternion array into frames of `joint_count` joints."""
    frames = []
    n = len(rows)
    for i in range(0, n - joint_count + 1, joint_count):
        frames.append(PoseFrame.from_array(i, (0.0, 0.0, 0.0), rows[i:i + joint_count]))
    return frames


@pytest.fixture
def skeleton():
    return default_skeleton()
