"""Grasp manifolds, the brute-force nearest-grasp oracle, and dataset generation.

The oracle densely samples a manifold and minimizes the mean control-points
distance; it is the ground truth for training labels and for evaluating
optimized poses. Ties in the argmin are broken by lowest sample index.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .se3 import (
    DEFAULT_CONTROL_POINTS,
    ControlPointSet,
    Pose,
    compose,
    quat_canonicalize,
    quat_from_axis_angle,
    quat_mul,
    quats_to_matrices,
    random_pose_in_ball,
)

DATASET_MAGIC = "ngdf-dataset v1"


def _label_chunk_size() -> int:
    # Bounds the (chunk, density, ncp) intermediate during batch labeling.
    return max(1, int(os.environ.get("GRASPFIELD_LABEL_CHUNK", "128")))


def thread_count() -> int:
    """Worker threads for embarrassingly parallel suites (GRASPFIELD_THREADS)."""
    return max(1, int(os.environ.get("GRASPFIELD_THREADS", "1")))


@dataclass(frozen=True)
class AnalyticRing:
    """Continuous grasp family around a cylinder axis.

    Grasps sit on a circle of radius ring_radius + standoff in the plane of
    axis_pose, approach pointing at the axis. roll_range is an interval of
    rotations about the approach axis; a degenerate interval (lo == hi) gives
    a 1-D manifold, a proper interval a 2-D one.
    """

    axis_pose: Pose
    ring_radius: float = 0.05
    standoff: float = 0.06
    roll_range: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.ring_radius <= 0.0 or self.standoff < 0.0:
            raise ValueError("ring_radius must be positive and standoff nonnegative")
        lo, hi = self.roll_range
        if hi < lo:
            raise ValueError("roll_range must be ordered (lo, hi)")

    @property
    def orbit_radius(self) -> float:
        return self.ring_radius + self.standoff

    def centroid(self) -> np.ndarray:
        # Grasp positions average to the ring center for any roll interval.
        return self.axis_pose.position.copy()

    def grasp_at(self, phi: float, roll: float) -> Pose:
        """Grasp pose at ring angle phi and roll about the approach axis."""
        u = np.array([np.cos(phi), np.sin(phi), 0.0])
        tang = np.array([-np.sin(phi), np.cos(phi), 0.0])
        zg = -u
        x0, y0 = tang, np.array([0.0, 0.0, -1.0])
        c, s = np.cos(roll), np.sin(roll)
        rot = np.column_stack([c * x0 + s * y0, -s * x0 + c * y0, zg])
        local = Pose(self.orbit_radius * u, _matrix_to_quat(rot))
        return compose(self.axis_pose, local)

    def parameter_grid(self, count: int) -> tuple[np.ndarray, np.ndarray]:
        """Stratified (phi, roll) values covering the manifold, length count."""
        lo, hi = self.roll_range
        if hi == lo:
            phis = 2.0 * np.pi * np.arange(count) / count
            rolls = np.full(count, lo)
            return phis, rolls
        span = hi - lo
        n_roll = max(1, int(round(np.sqrt(count * span / (2.0 * np.pi)))))
        n_phi = int(np.ceil(count / n_roll))
        phis = np.repeat(2.0 * np.pi * np.arange(n_phi) / n_phi, n_roll)[:count]
        rolls = np.tile(np.linspace(lo, hi, n_roll), n_phi)[:count]
        return phis, rolls

    def rotate_about_centroid(self, rotation_quat: np.ndarray) -> "AnalyticRing":
        """Manifold rigidly rotated about its centroid."""
        rq = quat_canonicalize(np.asarray(rotation_quat, dtype=np.float64))
        new_axis = Pose(self.axis_pose.position, quat_mul(rq, self.axis_pose.quaternion))
        return AnalyticRing(new_axis, self.ring_radius, self.standoff, self.roll_range)

    def symmetry_rotation(self, rng: np.random.Generator) -> np.ndarray:
        """Random rotation (about the centroid) that maps the grasp set to itself.

        The ring is invariant under rotations about its own axis: conjugate a
        z-rotation by the axis pose orientation.
        """
        alpha = rng.uniform(0.0, 2.0 * np.pi)
        qa = self.axis_pose.quaternion
        return quat_canonicalize(
            quat_mul(quat_mul(qa, quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), alpha)),
                     np.array([qa[0], -qa[1], -qa[2], -qa[3]]))
        )


@dataclass(frozen=True)
class DiscreteSet:
    """Explicit nonempty list of grasp poses."""

    grasps: tuple[Pose, ...]

    def __post_init__(self):
        grasps = tuple(self.grasps)
        if not grasps:
            raise ValueError("discrete grasp set must be nonempty")
        object.__setattr__(self, "grasps", grasps)

    def centroid(self) -> np.ndarray:
        return np.mean([g.position for g in self.grasps], axis=0)

    def rotate_about_centroid(self, rotation_quat: np.ndarray) -> "DiscreteSet":
        c = self.centroid()
        rq = quat_canonicalize(np.asarray(rotation_quat, dtype=np.float64))
        rot = quats_to_matrices(rq[None])[0]
        moved = tuple(
            Pose(c + rot @ (g.position - c), quat_mul(rq, g.quaternion)) for g in self.grasps
        )
        return DiscreteSet(moved)

    def symmetry_rotation(self, rng: np.random.Generator) -> np.ndarray:
        # No symmetry is known for an arbitrary discrete set.
        return np.array([1.0, 0.0, 0.0, 0.0])


GraspManifold = AnalyticRing | DiscreteSet


def _matrix_to_quat(rot: np.ndarray) -> np.ndarray:
    """Shepperd-style rotation matrix to scalar-first quaternion."""
    t = np.trace(rot)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        return np.array(
            [
                0.25 * s,
                (rot[2, 1] - rot[1, 2]) / s,
                (rot[0, 2] - rot[2, 0]) / s,
                (rot[1, 0] - rot[0, 1]) / s,
            ]
        )
    i = int(np.argmax(np.diag(rot)))
    j, k = (i + 1) % 3, (i + 2) % 3
    s = np.sqrt(rot[i, i] - rot[j, j] - rot[k, k] + 1.0) * 2.0
    q = np.empty(4)
    q[0] = (rot[k, j] - rot[j, k]) / s
    q[1 + i] = 0.25 * s
    q[1 + j] = (rot[j, i] + rot[i, j]) / s
    q[1 + k] = (rot[k, i] + rot[i, k]) / s
    return q


def sample_manifold(m: GraspManifold, count: int) -> list[Pose]:
    """Deterministic stratified sample; a DiscreteSet returns its stored list."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if isinstance(m, DiscreteSet):
        return list(m.grasps)
    phis, rolls = m.parameter_grid(count)
    return [m.grasp_at(p, r) for p, r in zip(phis, rolls)]


def _sample_vec7(m: GraspManifold, count: int) -> np.ndarray:
    """(G, 7) array of sampled grasp poses, vectorized for analytic manifolds."""
    if isinstance(m, DiscreteSet):
        return np.stack([g.as_vec7() for g in m.grasps])
    phis, rolls = m.parameter_grid(count)
    u = np.stack([np.cos(phis), np.sin(phis), np.zeros_like(phis)], axis=1)
    tang = np.stack([-np.sin(phis), np.cos(phis), np.zeros_like(phis)], axis=1)
    down = np.array([0.0, 0.0, -1.0])
    c, s = np.cos(rolls)[:, None], np.sin(rolls)[:, None]
    x = c * tang + s * down
    y = -s * tang + c * down
    rot = np.stack([x, y, -u], axis=2)
    ax_rot = m.axis_pose.rotation_matrix()
    rot_w = np.einsum("ij,gjk->gik", ax_rot, rot)
    pos_w = m.orbit_radius * u @ ax_rot.T + m.axis_pose.position
    out = np.empty((len(phis), 7))
    out[:, :3] = pos_w
    out[:, 3:] = _matrices_to_quats(rot_w)
    return out


def _matrices_to_quats(rot: np.ndarray) -> np.ndarray:
    q = np.empty((rot.shape[0], 4))
    for i in range(rot.shape[0]):
        q[i] = quat_canonicalize(_matrix_to_quat(rot[i]))
    return q


class ManifoldPoints:
    """Cached world control points of a dense manifold sample.

    Reused across queries so batch labeling touches the heavy (G, M, 3)
    array only once per (manifold, density, control-point set).
    """

    def __init__(self, m: GraspManifold, cps: ControlPointSet, density: int):
        if density < 1:
            raise ValueError("density must be >= 1")
        vec = _sample_vec7(m, density)
        rots = quats_to_matrices(vec[:, 3:])
        # (G, M, 3): world position of control point j under grasp i
        self.points = np.einsum("gab,mb->gma", rots, cps.points) + vec[:, None, :3]
        self.grasp_vec7 = vec
        self.cps = cps

    def label(self, query_vec7: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest-grasp per-point distances for a batch of queries.

        Args:
            query_vec7: (B, 7) query poses.
        Returns:
            (B, M) distance vectors and (B,) argmin grasp indices.
        """
        q = np.atleast_2d(query_vec7)
        rots = quats_to_matrices(q[:, 3:])
        qpts = np.einsum("bij,mj->bmi", rots, self.cps.points) + q[:, None, :3]
        n = q.shape[0]
        dists = np.empty((n, self.points.shape[1]))
        idx = np.empty(n, dtype=np.int64)
        chunk = _label_chunk_size()

        def run(lo: int) -> None:
            hi = min(lo + chunk, n)
            # (b, G, M) per-point L1 distances for this chunk
            diff = np.abs(qpts[lo:hi, None, :, :] - self.points[None, :, :, :]).sum(axis=3)
            best = np.argmin(diff.mean(axis=2), axis=1)
            idx[lo:hi] = best
            dists[lo:hi] = diff[np.arange(hi - lo), best]

        starts = range(0, n, chunk)
        workers = thread_count()
        if workers > 1 and n > chunk:
            # Chunks write disjoint index ranges, so results are ordered and
            # identical for any worker count.
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(run, starts))
        else:
            for lo in starts:
                run(lo)
        return dists, idx


def nearest_grasp(
    q: Pose, m: GraspManifold, cps: ControlPointSet, density: int
) -> tuple[Pose, np.ndarray]:
    """Closest sampled grasp under the mean control-points distance.

    Returns the argmin grasp and its per-point distance vector. Deterministic
    for fixed density; ties go to the lowest sample index.
    """
    mp = ManifoldPoints(m, cps, density)
    d, idx = mp.label(q.as_vec7()[None])
    g = Pose.from_vec7(mp.grasp_vec7[int(idx[0])])
    return g, d[0]


@dataclass(frozen=True)
class DatasetRecord:
    """One supervision pair: query pose, oracle distances, owning object."""

    query: Pose
    target_distances: np.ndarray
    object_id: int


def generate_dataset(
    m: GraspManifold,
    num_queries: int,
    ball_radius: float = 0.5,
    rng_seed: int = 0,
    density: int = 10_000,
    cps: ControlPointSet | None = None,
    object_id: int = 0,
) -> list[DatasetRecord]:
    """Sample queries in a ball around the manifold centroid and label them.

    Labeling is chunked and order-stable, so record order depends only on the
    seed and configuration.
    """
    if num_queries < 1:
        raise ValueError("num_queries must be >= 1")
    cps = cps or DEFAULT_CONTROL_POINTS
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(rng_seed)))
    center = m.centroid()
    queries = [random_pose_in_ball(center, ball_radius, rng) for _ in range(num_queries)]
    qvec = np.stack([p.as_vec7() for p in queries])
    mp = ManifoldPoints(m, cps, density)
    dists, _ = mp.label(qvec)
    return [
        DatasetRecord(queries[i], dists[i], object_id) for i in range(num_queries)
    ]


def write_dataset(records: list[DatasetRecord], path) -> None:
    """Line-delimited text: header then one record per line, 17 sig digits."""
    if not records:
        raise ValueError("no records to write")
    ncp = len(records[0].target_distances)
    lines = [f"# {DATASET_MAGIC} ncp={ncp}"]
    for r in records:
        v = np.concatenate([r.query.as_vec7(), r.target_distances])
        lines.append(str(r.object_id) + " " + " ".join("%.17g" % x for x in v))
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset(path) -> list[DatasetRecord]:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith(f"# {DATASET_MAGIC}"):
        raise ValueError(f"{path}: not a {DATASET_MAGIC} file")
    ncp = int(text[0].split("ncp=")[1])
    records = []
    for line in text[1:]:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = line.split()
        if len(vals) != 1 + 7 + ncp:
            raise ValueError(f"bad dataset record: {line!r}")
        obj = int(vals[0])
        nums = np.array([float(v) for v in vals[1:]])
        records.append(DatasetRecord(Pose.from_vec7(nums[:7]), nums[7 : 7 + ncp], obj))
    return records
