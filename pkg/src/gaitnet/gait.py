"""Gait data model: rotation codec, pose/gait layouts, distances, condition scaling.

A pose is flattened as ``[h, vx, vy, q_0(6), ..., q_{J-1}(6)]`` where each
``q`` holds the first two columns of the joint rotation matrix. A gait
pattern is ``N_FRAMES`` such poses at uniform phase over two gait cycles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRotationError, RangeError, ShapeError

N_FRAMES = 60
PHASES = 4.0 * np.pi * np.arange(N_FRAMES) / N_FRAMES
_DEGENERATE_TOL = 1e-9


# ---------------------------------------------------------------------------
# rotations


def euler_to_matrix(x, y, z) -> np.ndarray:
    """``Rz(z) @ Ry(y) @ Rx(x)`` for broadcastable angle arrays (radians)."""
    x, y, z = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float), np.asarray(z, float))
    cx, sx, cy, sy, cz, sz = np.cos(x), np.sin(x), np.cos(y), np.sin(y), np.cos(z), np.sin(z)
    R = np.empty(x.shape + (3, 3))
    R[..., 0, 0] = cz * cy
    R[..., 0, 1] = cz * sy * sx - sz * cx
    R[..., 0, 2] = cz * sy * cx + sz * sx
    R[..., 1, 0] = sz * cy
    R[..., 1, 1] = sz * sy * sx + cz * cx
    R[..., 1, 2] = sz * sy * cx - cz * sx
    R[..., 2, 0] = -sy
    R[..., 2, 1] = cy * sx
    R[..., 2, 2] = cy * cx
    return R


def rot_encode(R) -> np.ndarray:
    """First two columns of ``R`` (shape ``(..., 3, 3)``) as ``(..., 6)``."""
    R = np.asarray(R, dtype=float)
    if R.shape[-2:] != (3, 3):
        raise ShapeError(f"expected (..., 3, 3) rotation, got {R.shape}")
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def _gram_schmidt(q):
    a1, a2 = q[..., 0:3], q[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < _DEGENERATE_TOL):
        raise DegenerateRotationError("first 6D column has (near-)zero length")
    b1 = a1 / n1
    p = np.sum(b1 * a2, axis=-1, keepdims=True)
    u2 = a2 - p * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    scale2 = np.linalg.norm(a2, axis=-1, keepdims=True)
    if np.any(n2 <= _DEGENERATE_TOL * np.maximum(scale2, 1.0)):
        raise DegenerateRotationError("6D columns are (near-)parallel")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return a2, n1, b1, p, n2, b2, b3


def rot_decode(q) -> np.ndarray:
    """Gram-Schmidt the two 3-vectors of ``q`` and complete with a cross product."""
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != 6:
        raise ShapeError(f"expected (..., 6) rotation code, got {q.shape}")
    _, _, b1, _, _, b2, b3 = _gram_schmidt(q)
    return np.stack([b1, b2, b3], axis=-1)


def rot_decode_backward(q, grad_R) -> np.ndarray:
    """Vector-Jacobian product of :func:`rot_decode`: ``dL/dq`` from ``dL/dR``."""
    q = np.asarray(q)
    a2, n1, b1, p, n2, b2, b3 = _gram_schmidt(q)
    g1, g2, g3 = grad_R[..., :, 0], grad_R[..., :, 1], grad_R[..., :, 2]
    g1 = g1 + np.cross(b2, g3)
    g2 = g2 + np.cross(g3, b1)
    gu = (g2 - b2 * np.sum(b2 * g2, axis=-1, keepdims=True)) / n2
    bgu = np.sum(b1 * gu, axis=-1, keepdims=True)
    da2 = gu - b1 * bgu
    g1 = g1 - (p * gu + a2 * bgu)
    da1 = (g1 - b1 * np.sum(b1 * g1, axis=-1, keepdims=True)) / n1
    return np.concatenate([da1, da2], axis=-1)


def d_rot(q, q2) -> np.ndarray:
    """Frobenius norm of the difference of the decoded rotation matrices."""
    diff = rot_decode(q) - rot_decode(q2)
    return np.sqrt(np.sum(diff * diff, axis=(-2, -1)))


def geodesic_angle(R, R2) -> np.ndarray:
    """Angle of ``R @ R2.T`` in radians, via the chord so small angles stay accurate."""
    diff = np.asarray(R) - np.asarray(R2)
    chord = np.sqrt(np.sum(diff * diff, axis=(-2, -1)))
    return 2.0 * np.arcsin(np.clip(chord / (2.0 * np.sqrt(2.0)), 0.0, 1.0))


# ---------------------------------------------------------------------------
# pose / gait layout


@dataclass(frozen=True)
class PoseLayout:
    n_joints: int

    @property
    def pose_dim(self) -> int:
        return 3 + 6 * self.n_joints

    @property
    def gait_dim(self) -> int:
        return N_FRAMES * self.pose_dim

    def split(self, pose):
        """``(h, v, q)`` views of ``(..., pose_dim)`` with ``q`` shaped ``(..., J, 6)``."""
        pose = np.asarray(pose)
        if pose.shape[-1] != self.pose_dim:
            raise ShapeError(f"pose width {pose.shape[-1]} != {self.pose_dim}")
        return pose[..., 0], pose[..., 1:3], pose[..., 3:].reshape(pose.shape[:-1] + (self.n_joints, 6))

    def join(self, h, v, q) -> np.ndarray:
        h = np.asarray(h, float)
        q = np.asarray(q, float)
        return np.concatenate(
            [h[..., None], np.asarray(v, float), q.reshape(q.shape[:-2] + (6 * self.n_joints,))], axis=-1
        )

    def gait_to_frames(self, gait) -> np.ndarray:
        """``(..., gait_dim)`` flat pattern to ``(..., N_FRAMES, pose_dim)``."""
        gait = np.asarray(gait)
        if gait.shape[-1] != self.gait_dim:
            raise ShapeError(f"gait width {gait.shape[-1]} != {self.gait_dim}")
        return gait.reshape(gait.shape[:-1] + (N_FRAMES, self.pose_dim))

    def frames_to_gait(self, frames) -> np.ndarray:
        frames = np.asarray(frames)
        if frames.shape[-2:] != (N_FRAMES, self.pose_dim):
            raise ShapeError(f"expected (..., {N_FRAMES}, {self.pose_dim}), got {frames.shape}")
        return frames.reshape(frames.shape[:-2] + (self.gait_dim,))


@dataclass(frozen=True)
class Pose:
    h: float
    v: np.ndarray
    q: np.ndarray  # (J, 6)

    def flatten(self) -> np.ndarray:
        return PoseLayout(len(self.q)).join(self.h, self.v, self.q)

    @classmethod
    def from_flat(cls, flat, layout: PoseLayout) -> "Pose":
        h, v, q = layout.split(flat)
        return cls(float(h), np.array(v), np.array(q))


@dataclass(frozen=True)
class GaitPattern:
    frames: np.ndarray  # (N_FRAMES, pose_dim)
    layout: PoseLayout

    def __post_init__(self):
        if self.frames.shape != (N_FRAMES, self.layout.pose_dim):
            raise ShapeError(f"gait pattern must be ({N_FRAMES}, {self.layout.pose_dim}), got {self.frames.shape}")

    @property
    def poses(self) -> list[Pose]:
        return [Pose.from_flat(f, self.layout) for f in self.frames]

    def flatten(self) -> np.ndarray:
        return self.frames.reshape(-1).copy()

    @classmethod
    def from_flat(cls, flat, layout: PoseLayout) -> "GaitPattern":
        return cls(layout.gait_to_frames(np.asarray(flat, float)).copy(), layout)


# ---------------------------------------------------------------------------
# distances


def d_pose(pose, pose2, layout: PoseLayout, w_h: float = 1.0, w_v: float = 1.0) -> np.ndarray:
    """Weighted squared root-height/velocity gaps plus summed squared D_rot."""
    h, v, q = layout.split(pose)
    h2, v2, q2 = layout.split(pose2)
    dv = v - v2
    drot = d_rot(q, q2)
    return w_h * (h - h2) ** 2 + w_v * np.sum(dv * dv, axis=-1) + np.sum(drot * drot, axis=-1)


def d_gait(gait, gait2, layout: PoseLayout, w_h: float = 1.0, w_v: float = 1.0) -> np.ndarray:
    """Mean of :func:`d_pose` over the phase-aligned frames."""
    f1, f2 = layout.gait_to_frames(gait), layout.gait_to_frames(gait2)
    return np.mean(d_pose(f1, f2, layout, w_h, w_v), axis=-1)


def pose_loss_and_grad(pred, target_h, target_v, target_R, layout: PoseLayout, w_h=1.0, w_v=1.0):
    """Per-row ``d_pose(pred, target)`` and its gradient w.r.t. ``pred``.

    The target is given pre-decoded (``target_R`` of shape ``(n, J, 3, 3)``)
    so a dataset's rotations are orthonormalized once, not every step.
    """
    h, v, q = layout.split(pred)
    R = rot_decode(q)
    dR = R - target_R
    dh = h - target_h
    dv = v - target_v
    loss = w_h * dh * dh + w_v * np.sum(dv * dv, axis=-1) + np.sum(dR * dR, axis=(-3, -2, -1))
    gq = rot_decode_backward(q, 2.0 * dR)
    grad = np.empty_like(pred)
    grad[:, 0] = 2.0 * w_h * dh
    grad[:, 1:3] = 2.0 * w_v * dv
    grad[:, 3:] = gq.reshape(len(pred), -1)
    return loss, grad


def joint_angle_error_deg(gait, gait2, layout: PoseLayout):
    """Per-joint (mean, variance) over frames of the geodesic angle, in degrees."""
    per_frame = joint_angle_frames_deg(gait, gait2, layout)
    return per_frame.mean(axis=-2), per_frame.var(axis=-2)


def joint_angle_frames_deg(gait, gait2, layout: PoseLayout) -> np.ndarray:
    """``(..., N_FRAMES, J)`` geodesic joint-angle errors in degrees."""
    _, _, q = layout.split(layout.gait_to_frames(gait))
    _, _, q2 = layout.split(layout.gait_to_frames(gait2))
    return np.degrees(geodesic_angle(rot_decode(q), rot_decode(q2)))


# ---------------------------------------------------------------------------
# condition scaling


def normalize_condition(c, lo, hi) -> np.ndarray:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    return (np.asarray(c, float) - lo) / (hi - lo)


def denormalize_condition(u, lo, hi) -> np.ndarray:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    return np.clip(lo + np.asarray(u, float) * (hi - lo), lo, hi)


def check_range(c, lo, hi, names=None, tol: float = 1e-6) -> None:
    """Raise :class:`RangeError` naming the first parameter outside ``[lo, hi]``."""
    c = np.atleast_2d(np.asarray(c, float))
    span = np.asarray(hi) - np.asarray(lo)
    bad = (c < np.asarray(lo) - tol * span) | (c > np.asarray(hi) + tol * span) | ~np.isfinite(c)
    if np.any(bad):
        row, col = np.argwhere(bad)[0]
        name = names[col] if names is not None else f"#{col}"
        raise RangeError(
            f"condition {row}: {name} = {c[row, col]!r} outside [{np.asarray(lo)[col]}, {np.asarray(hi)[col]}]"
        )
