"""Learned grasp-distance field: an MLP from (latent code, query pose) to
per-control-point unsigned distances.

The network is plain float64 numpy with hand-written reverse-mode gradients,
which keeps training and planning bit-reproducible and gives exact input
gradients for downstream pose optimization. Conditioning uses per-object
latent codes trained jointly with the weights (auto-decoder).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np

from .manifold import GraspManifold, ManifoldPoints
from .optim import Adam
from .se3 import ControlPointSet, Pose, quat_left_matrix, quats_to_matrices

CHECKPOINT_MAGIC = b"NGDF0001"


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class FieldModel:
    """MLP weights plus the latent-code table.

    Layer shapes are fully determined by (hidden_layers, width, latent_dim,
    n_out): input latent_dim + 7, `hidden_layers` ReLU layers of `width`,
    and a softplus output of n_out so every predicted distance is positive.
    """

    hidden_layers: int
    width: int
    latent_dim: int
    n_out: int
    weights: list[np.ndarray] = dataclass_field(default_factory=list)
    biases: list[np.ndarray] = dataclass_field(default_factory=list)
    object_ids: list[int] = dataclass_field(default_factory=list)
    codes: np.ndarray | None = None

    @property
    def input_dim(self) -> int:
        return self.latent_dim + 7

    def code_row(self, object_id: int) -> int:
        try:
            return self.object_ids.index(int(object_id))
        except ValueError:
            raise KeyError(f"unknown object_id {object_id}") from None

    def code(self, object_id: int) -> np.ndarray:
        return self.codes[self.code_row(object_id)]


def init_model(
    hidden_layers: int,
    width: int,
    latent_dim: int,
    n_out: int,
    object_ids,
    rng: np.random.Generator,
    output_bias: float = -1.05,
) -> FieldModel:
    """He-initialized model; output bias starts softplus near typical distances."""
    model = FieldModel(hidden_layers, width, latent_dim, n_out)
    dims = [model.input_dim] + [width] * hidden_layers + [n_out]
    for i in range(len(dims) - 1):
        fan_in = dims[i]
        std = np.sqrt(2.0 / fan_in)
        if i == len(dims) - 2:
            std = 1.0 / np.sqrt(fan_in)
        model.weights.append(rng.normal(0.0, std, size=(dims[i], dims[i + 1])))
        model.biases.append(np.zeros(dims[i + 1]))
    model.biases[-1][:] = output_bias
    model.object_ids = sorted(int(i) for i in object_ids)
    model.codes = rng.normal(0.0, 0.01, size=(len(model.object_ids), latent_dim))
    return model


def _forward_batch(model: FieldModel, x: np.ndarray):
    """Forward pass keeping pre-activations for the backward pass."""
    acts = [x]
    pre = []
    h = x
    n_layers = len(model.weights)
    for i in range(n_layers):
        z = h @ model.weights[i] + model.biases[i]
        pre.append(z)
        h = np.maximum(z, 0.0) if i < n_layers - 1 else softplus(z)
        acts.append(h)
    return acts, pre


def _backward_batch(model: FieldModel, acts, pre, dout: np.ndarray):
    """Reverse pass: returns (weight grads, bias grads, input grads)."""
    n_layers = len(model.weights)
    gw = [None] * n_layers
    gb = [None] * n_layers
    delta = dout * sigmoid(pre[-1])
    for i in range(n_layers - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        delta = delta @ model.weights[i].T
        if i > 0:
            delta = delta * (pre[i - 1] > 0.0)
    return gw, gb, delta


def _assemble_inputs(model: FieldModel, code_rows: np.ndarray, qvec: np.ndarray) -> np.ndarray:
    x = np.empty((qvec.shape[0], model.input_dim))
    x[:, : model.latent_dim] = model.codes[code_rows]
    x[:, model.latent_dim :] = qvec
    return x


def forward(model: FieldModel, object_id: int, q: Pose) -> np.ndarray:
    """Predicted per-control-point distances for one query pose."""
    row = model.code_row(object_id)
    x = _assemble_inputs(model, np.array([row]), q.as_vec7()[None])
    acts, _ = _forward_batch(model, x)
    return acts[-1][0]


def forward_batch(model: FieldModel, code_rows: np.ndarray, qvec: np.ndarray) -> np.ndarray:
    acts, _ = _forward_batch(model, _assemble_inputs(model, code_rows, qvec))
    return acts[-1]


def loss_l1(pred: np.ndarray, target: np.ndarray) -> float:
    """Sum of absolute component differences."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.abs(pred - target).sum())


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    code: np.ndarray
    query: np.ndarray


def backward(model: FieldModel, object_id: int, q: Pose, target: np.ndarray | None = None) -> Gradients:
    """Exact gradients of either the training loss or the planning scalar.

    With a target, differentiates loss_l1(forward(q), target); without one,
    differentiates the mean absolute output (the grasp cost of planning;
    outputs are positive so |.| is the identity).
    """
    row = model.code_row(object_id)
    x = _assemble_inputs(model, np.array([row]), q.as_vec7()[None])
    acts, pre = _forward_batch(model, x)
    y = acts[-1]
    if target is None:
        dout = np.full_like(y, 1.0 / y.shape[1])
    else:
        target = np.asarray(target, dtype=np.float64).reshape(1, -1)
        if target.shape != y.shape:
            raise ValueError(f"target shape {target.shape} != output {y.shape}")
        dout = np.sign(y - target)
    gw, gb, dx = _backward_batch(model, acts, pre, dout)
    return Gradients(gw, gb, dx[0, : model.latent_dim], dx[0, model.latent_dim :])


@dataclass
class TrainConfig:
    """Knobs for auto-decoder training; defaults are desk-scale."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    epochs: int = 40
    aug_probability: float = 0.7
    code_learning_rate: float = 1e-3
    seed: int = 0
    hidden_layers: int = 5
    width: int = 256
    latent_dim: int = 64
    val_fraction: float = 0.1
    aug_density: int = 4096

    def __post_init__(self):
        if self.learning_rate <= 0 or self.code_learning_rate <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.aug_probability <= 1.0:
            raise ValueError("aug_probability must be in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class TrainResult:
    model: FieldModel
    history: list[tuple]  # (epoch, train_l1, val_l1, val_mean_dist_mae)


def _canonical_order(records) -> np.ndarray:
    """Content-based ordering so training is invariant to record permutation."""
    ncp = len(records[0].target_distances)
    table = np.empty((len(records), 8 + ncp))
    for i, r in enumerate(records):
        table[i, 0] = r.object_id
        table[i, 1:8] = r.query.as_vec7()
        table[i, 8:] = r.target_distances
    return np.lexsort(table.T[::-1])


def _stream_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *stream])))


def train(
    records,
    config: TrainConfig,
    manifolds: dict[int, GraspManifold] | None = None,
    cps: ControlPointSet | None = None,
) -> TrainResult:
    """Adam training of weights and latent codes with rotation augmentation.

    Augmentation (probability aug_probability per sample per epoch) applies a
    shared random rotation about the manifold centroid to the query and the
    manifold, then relabels the rotated query against the rotated manifold.
    Rotations are drawn from the manifold's symmetry group so the rotated
    manifold is the manifold itself and the fixed latent code stays a valid
    descriptor; the relabel is still a genuine recomputation because the
    control-points metric is not rotation invariant.

    Draws are keyed by a canonical content ordering of the records, so a
    permuted dataset trains to identical parameters.
    """
    records = list(records)
    if not records:
        raise ValueError("empty dataset")
    n_out = len(records[0].target_distances)
    order = _canonical_order(records)
    qvec = np.stack([records[i].query.as_vec7() for i in order])
    targets = np.stack([records[i].target_distances for i in order])
    object_ids = np.array([records[i].object_id for i in order], dtype=np.int64)

    unique_ids = sorted(set(int(o) for o in object_ids))
    if config.aug_probability > 0.0 and manifolds is not None:
        missing = [o for o in unique_ids if o not in manifolds]
        if missing:
            raise ValueError(f"augmentation requires manifolds for object ids {missing}")
    if cps is None:
        from .se3 import DEFAULT_CONTROL_POINTS

        cps = DEFAULT_CONTROL_POINTS

    model = init_model(
        config.hidden_layers,
        config.width,
        config.latent_dim,
        n_out,
        unique_ids,
        _stream_rng(config.seed, 0),
    )
    code_rows = np.array([model.code_row(o) for o in object_ids])

    n = len(records)
    n_val = int(round(config.val_fraction * n))
    split = _stream_rng(config.seed, 1).permutation(n)
    val_idx = np.sort(split[:n_val])
    train_idx = np.sort(split[n_val:])
    if len(train_idx) == 0:
        raise ValueError("no training records after validation split")

    aug_points: dict[int, ManifoldPoints] = {}
    if config.aug_probability > 0.0 and manifolds is not None:
        for oid in unique_ids:
            aug_points[oid] = ManifoldPoints(manifolds[oid], cps, config.aug_density)

    params = model.weights + model.biases + [model.codes]
    lrs = [config.learning_rate] * (len(params) - 1) + [config.code_learning_rate]
    opt = Adam(
        [p.shape for p in params],
        lr=config.learning_rate,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.eps,
    )

    history = []
    for epoch in range(config.epochs):
        ep_rng = _stream_rng(config.seed, 2, epoch)
        # Per-record draws in canonical order (permutation invariant).
        u_aug = ep_rng.uniform(size=n)
        ex, ey = qvec, targets
        if aug_points:
            ex, ey = qvec.copy(), targets.copy()
            for oid in unique_ids:
                mani = manifolds[oid]
                rows = np.where((object_ids == oid) & (u_aug < config.aug_probability))[0]
                rot_q = np.stack([mani.symmetry_rotation(ep_rng) for _ in rows]) if len(rows) else None
                if rot_q is None or np.allclose(rot_q, [1.0, 0.0, 0.0, 0.0]):
                    continue
                center = mani.centroid()
                rots = quats_to_matrices(rot_q)
                pos = qvec[rows, :3] - center
                ex[rows, :3] = np.einsum("bij,bj->bi", rots, pos) + center
                quat = np.einsum(
                    "bij,bj->bi",
                    np.stack([quat_left_matrix(rq) for rq in rot_q]),
                    qvec[rows, 3:],
                )
                sign = np.where(quat[:, 0] < 0.0, -1.0, 1.0)
                ex[rows, 3:] = quat * sign[:, None]
                # Symmetry rotation: the rotated manifold is the manifold.
                ey[rows], _ = aug_points[oid].label(ex[rows])

        perm = ep_rng.permutation(train_idx)
        train_loss = 0.0
        for lo in range(0, len(perm), config.batch_size):
            batch = perm[lo : lo + config.batch_size]
            x = _assemble_inputs(model, code_rows[batch], ex[batch])
            acts, pre = _forward_batch(model, x)
            y = acts[-1]
            resid = y - ey[batch]
            train_loss += float(np.abs(resid).sum())
            dout = np.sign(resid) / len(batch)
            gw, gb, dx = _backward_batch(model, acts, pre, dout)
            gcodes = np.zeros_like(model.codes)
            np.add.at(gcodes, code_rows[batch], dx[:, : model.latent_dim])
            deltas = opt.step(gw + gb + [gcodes], lrs=lrs)
            for p, d in zip(params, deltas):
                p += d
        train_loss /= len(perm)

        if len(val_idx):
            vy = forward_batch(model, code_rows[val_idx], qvec[val_idx])
            vresid = vy - targets[val_idx]
            val_l1 = float(np.abs(vresid).sum(axis=1).mean())
            val_mad = float(np.abs(vy.mean(axis=1) - targets[val_idx].mean(axis=1)).mean())
        else:
            val_l1 = val_mad = float("nan")
        history.append((epoch, train_loss, val_l1, val_mad))
    return TrainResult(model, history)


class FieldGoal:
    """Grasp goal backed by a trained field, optionally placed in the world.

    object_pose maps the object (and its training-frame field) into the
    world; queries are pulled back into the training frame before evaluation
    and gradients are pushed forward through that fixed transform.
    """

    def __init__(self, model: FieldModel, object_id: int, object_pose: Pose | None = None):
        self.model = model
        self.object_id = int(object_id)
        self.object_pose = object_pose
        if object_pose is not None:
            inv_q = np.array([object_pose.quaternion[0], *(-object_pose.quaternion[1:])])
            self._rot_inv = quats_to_matrices(inv_q[None])[0]
            self._lmat = quat_left_matrix(inv_q)
        self.model.code_row(self.object_id)  # fail fast on unknown ids

    def _to_local(self, pose: Pose) -> tuple[np.ndarray, float]:
        if self.object_pose is None:
            return pose.as_vec7(), 1.0
        p = self._rot_inv @ (pose.position - self.object_pose.position)
        q = self._lmat @ pose.quaternion
        sign = -1.0 if q[0] < 0.0 or (q[0] == 0.0 and _first_nonzero_negative(q)) else 1.0
        return np.concatenate([p, sign * q]), sign

    def value(self, pose: Pose) -> float:
        local, _ = self._to_local(pose)
        row = self.model.code_row(self.object_id)
        y = forward_batch(self.model, np.array([row]), local[None])[0]
        return float(np.abs(y).mean())

    def value_and_pose_grad(self, pose: Pose) -> tuple[float, np.ndarray]:
        """Mean predicted distance and its gradient w.r.t. the world 7-vector."""
        local, sign = self._to_local(pose)
        g = backward(self.model, self.object_id, Pose.from_vec7(local))
        row = self.model.code_row(self.object_id)
        y = forward_batch(self.model, np.array([row]), local[None])[0]
        if self.object_pose is None:
            return float(np.abs(y).mean()), g.query
        gpos = self._rot_inv.T @ g.query[:3]
        gquat = self._lmat.T @ (sign * g.query[3:])
        return float(np.abs(y).mean()), np.concatenate([gpos, gquat])


def _first_nonzero_negative(q: np.ndarray) -> bool:
    for c in q[1:]:
        if c != 0.0:
            return c < 0.0
    return False


def save_checkpoint(model: FieldModel, path) -> None:
    """Little-endian binary layout, see README for the exact field order."""
    parts = [CHECKPOINT_MAGIC]
    parts.append(
        struct.pack(
            "<5i",
            model.hidden_layers,
            model.width,
            model.latent_dim,
            model.n_out,
            len(model.object_ids),
        )
    )
    parts.append(np.array(model.object_ids, dtype="<i4").tobytes())
    for w, b in zip(model.weights, model.biases):
        parts.append(w.astype("<f8").tobytes())
        parts.append(b.astype("<f8").tobytes())
    parts.append(model.codes.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> FieldModel:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    h, w, d, m, n_obj = struct.unpack_from("<5i", raw, 8)
    off = 8 + 20
    ids = np.frombuffer(raw, dtype="<i4", count=n_obj, offset=off)
    off += 4 * n_obj
    model = FieldModel(h, w, d, m)
    dims = [d + 7] + [w] * h + [m]
    for i in range(len(dims) - 1):
        cnt = dims[i] * dims[i + 1]
        model.weights.append(
            np.frombuffer(raw, dtype="<f8", count=cnt, offset=off).reshape(dims[i], dims[i + 1]).copy()
        )
        off += 8 * cnt
        model.biases.append(np.frombuffer(raw, dtype="<f8", count=dims[i + 1], offset=off).copy())
        off += 8 * dims[i + 1]
    model.object_ids = [int(i) for i in ids]
    model.codes = (
        np.frombuffer(raw, dtype="<f8", count=n_obj * d, offset=off).reshape(n_obj, d).copy()
    )
    off += 8 * n_obj * d
    if off != len(raw):
        raise ValueError(f"{path}: checkpoint size mismatch")
    return model


def write_history(history, path) -> None:
    lines = ["# epoch train_l1 val_l1 val_mean_dist_mae"]
    for row in history:
        lines.append("%d %.17g %.17g %.17g" % tuple(row))
    Path(path).write_text("\n".join(lines) + "\n")
