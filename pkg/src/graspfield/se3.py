"""Rigid-body poses, quaternion algebra, and the control-points distance metric.

Conventions: quaternions are scalar-first (w, x, y, z), unit norm, and canonical
with w >= 0 (ties at w == 0 broken by making the first nonzero vector component
positive). Positions are in meters, angles in radians. All arrays are float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

QUAT_NORM_TOL = 1e-9


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Return q scaled to unit norm."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion cannot be normalized")
    return q / n


def quat_canonicalize(q: np.ndarray) -> np.ndarray:
    """Flip sign so that w >= 0; at w == 0, first nonzero component positive.

    The flip never changes the rotation (q and -q are the same element of
    SO(3)); it only picks one sheet of the double cover.
    """
    q = np.asarray(q, dtype=np.float64)
    if q[0] < 0.0:
        return -q
    if q[0] == 0.0:
        for c in q[1:]:
            if c != 0.0:
                return q if c > 0.0 else -q
    return q


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a (x) b, scalar-first."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dtype=np.float64,
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]], dtype=np.float64)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (scalar-first)."""
    w, x, y, z = q
    xx, yy, zz = x * x, y * y, z * z
    wx, wy, wz = w * x, w * y, w * z
    xy, xz, yz = x * y, x * z, y * z
    return np.array(
        [
            [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
            [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
            [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
        ],
        dtype=np.float64,
    )


def quats_to_matrices(q: np.ndarray) -> np.ndarray:
    """Batched quat_to_matrix: (B, 4) unit quaternions -> (B, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    out = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    out[:, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    out[:, 0, 1] = 2.0 * (x * y - w * z)
    out[:, 0, 2] = 2.0 * (x * z + w * y)
    out[:, 1, 0] = 2.0 * (x * y + w * z)
    out[:, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    out[:, 1, 2] = 2.0 * (y * z - w * x)
    out[:, 2, 0] = 2.0 * (x * z - w * y)
    out[:, 2, 1] = 2.0 * (y * z + w * x)
    out[:, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return out


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0.0:
        raise ValueError("rotation axis must be nonzero")
    half = 0.5 * angle
    q = np.empty(4, dtype=np.float64)
    q[0] = np.cos(half)
    q[1:] = np.sin(half) * axis / n
    return q


def quat_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Double-cover-safe quaternion distance: min(|a-b|, |a+b|)."""
    return float(min(np.linalg.norm(a - b), np.linalg.norm(a + b)))


@dataclass(frozen=True)
class Pose:
    """SE(3) element: position in meters plus a canonical unit quaternion."""

    position: np.ndarray
    quaternion: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.position, dtype=np.float64).reshape(3).copy()
        q = quat_canonicalize(quat_normalize(self.quaternion)).copy()
        p.flags.writeable = False
        q.flags.writeable = False
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "quaternion", q)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    @staticmethod
    def from_axis_angle(position, axis, angle: float) -> "Pose":
        return Pose(np.asarray(position, dtype=np.float64), quat_from_axis_angle(axis, angle))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quaternion)

    def as_vec7(self) -> np.ndarray:
        """Flat (7,) encoding: position then quaternion."""
        return np.concatenate([self.position, self.quaternion])

    @staticmethod
    def from_vec7(v: np.ndarray) -> "Pose":
        v = np.asarray(v, dtype=np.float64).reshape(7)
        return Pose(v[:3], v[3:])


def transform_point(pose: Pose, p: np.ndarray) -> np.ndarray:
    """World coordinates of a body-frame point: R(q) p + t."""
    return pose.rotation_matrix() @ np.asarray(p, dtype=np.float64) + pose.position


def transform_points(pose: Pose, pts: np.ndarray) -> np.ndarray:
    """Apply a pose to (M, 3) points."""
    return pts @ pose.rotation_matrix().T + pose.position


def compose(a: Pose, b: Pose) -> Pose:
    """Pose of frame b expressed through a: (a o b)(p) = a(b(p))."""
    return Pose(transform_point(a, b.position), quat_mul(a.quaternion, b.quaternion))


def inverse(a: Pose) -> Pose:
    qi = quat_conj(a.quaternion)
    return Pose(-(quat_to_matrix(qi) @ a.position), qi)


@dataclass(frozen=True)
class ControlPointSet:
    """Fixed gripper-frame points defining the pose distance metric.

    At least 4 points spanning a plane are required: the only rigid map that
    fixes three non-collinear points is the identity (the mirror image is
    improper), so a zero distance vector implies an identical pose. The same
    set must be shared by dataset generation, training, and planning.
    """

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError("control points must be (M, 3)")
        if pts.shape[0] < 4:
            raise ValueError("need at least 4 control points")
        centered = pts - pts.mean(axis=0)
        if np.linalg.matrix_rank(centered, tol=1e-12) < 2:
            raise ValueError("control points are collinear")
        pts = pts.copy()
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


# Parallel-jaw stand-in: origin, palm center, finger bases, fingertips.
DEFAULT_CONTROL_POINTS = ControlPointSet(
    np.array(
        [
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 0.066],
            [0.04, 0.0, 0.066],
            [-0.04, 0.0, 0.066],
            [0.04, 0.0, 0.112],
            [-0.04, 0.0, 0.112],
        ]
    )
)


def control_point_distance(q: Pose, g: Pose, cps: ControlPointSet) -> np.ndarray:
    """Per-point L1 displacement between the two transformed point sets.

    Component i is || T(q; p_i) - T(g; p_i) ||_1; symmetric in (q, g).
    """
    dq = transform_points(q, cps.points) - transform_points(g, cps.points)
    return np.abs(dq).sum(axis=1)


def random_quaternion(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation via a normalized 4D Gaussian, canonicalized."""
    q = rng.normal(size=4)
    return quat_canonicalize(quat_normalize(q))


def random_pose_in_ball(center: np.ndarray, radius: float, rng: np.random.Generator) -> Pose:
    """Position uniform in the ball, orientation uniform on SO(3)."""
    if radius < 0.0:
        raise ValueError("radius must be nonnegative")
    center = np.asarray(center, dtype=np.float64)
    direction = rng.normal(size=3)
    n = np.linalg.norm(direction)
    if n == 0.0:
        direction = np.array([1.0, 0.0, 0.0])
        n = 1.0
    r = radius * rng.uniform() ** (1.0 / 3.0)
    return Pose(center + (r / n) * direction, random_quaternion(rng))


def load_control_points(path) -> ControlPointSet:
    """Read a gripper file: one `x y z` triple per line, `#` comments."""
    rows = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        vals = line.split()
        if len(vals) != 3:
            raise ValueError(f"bad control point line: {raw!r}")
        rows.append([float(v) for v in vals])
    return ControlPointSet(np.array(rows, dtype=np.float64))


def save_control_points(cps: ControlPointSet, path) -> None:
    lines = ["# gripper control points (x y z, meters)"]
    for p in cps.points:
        lines.append("%.17g %.17g %.17g" % (p[0], p[1], p[2]))
    Path(path).write_text("\n".join(lines) + "\n")
