"""Skeleton, 279-dim pose representation, rotations and forward kinematics.

Frame layout (per frame, 279 floats)::

    [0:3]     root velocity, m/frame, sequence world frame
    [3:9]     root rotation, 6D
    [9:15]    root rotation velocity  R_t^-1 R_{t+1}, 6D
    [15:147]  22 local joint rotations, 6D
    [147:279] 22 local joint rotation velocities, 6D

A 6D rotation is the first two columns of the matrix, column-major
(``[c0x, c0y, c0z, c1x, c1y, c1z]``). Y is up.

Velocity channels are forward differences; the final frame repeats the
previous frame's value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from .errors import (
    DegenerateInput,
    NotARotation,
    ShapeMismatch,
    SkeletonMismatch,
    TooShort,
)

N_JOINTS = 23
N_BODY = 22
FRAME_DIM = 279

ROOT_VEL = slice(0, 3)
ROOT_ROT = slice(3, 9)
ROOT_ROT_VEL = slice(9, 15)
JOINT_ROT = slice(15, 147)
JOINT_ROT_VEL = slice(147, 279)

UP = np.array([0.0, 1.0, 0.0])


# ---------------------------------------------------------------------------
# Rotations
# ---------------------------------------------------------------------------

def _to_tensor(x):
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), True


def _cross(a, b):
    return torch.stack([a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
                        a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
                        a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]], dim=-1)


def rot6d_to_matrix(r, check: bool = True, eps: float = 1e-8):
    """Gram-Schmidt a 6D rotation ``(..., 6)`` into a matrix ``(..., 3, 3)``.

    Accepts numpy arrays (computed in float64, returned as numpy) or torch
    tensors (differentiable, dtype preserved). With ``check`` the two input
    vectors must be non-zero and non-parallel.
    """
    t, was_numpy = _to_tensor(r)
    a, b = t[..., 0:3], t[..., 3:6]
    na = (a * a).sum(-1, keepdim=True).sqrt()
    if check and bool((na <= eps).any()):
        raise DegenerateInput("6D rotation has a zero first column")
    a = a / na.clamp_min(eps)
    b = b - (a * b).sum(-1, keepdim=True) * a
    nb = (b * b).sum(-1, keepdim=True).sqrt()
    if check and bool((nb <= eps).any()):
        raise DegenerateInput("6D rotation columns are parallel or zero")
    b = b / nb.clamp_min(eps)
    c = _cross(a, b)
    m = torch.stack([a, b, c], dim=-1)
    return m.numpy() if was_numpy else m


def matrix_to_rot6d(R, check: bool = True, tol: float = 1e-4):
    t, was_numpy = _to_tensor(R)
    if t.shape[-2:] != (3, 3):
        raise ShapeMismatch(f"expected (..., 3, 3), got {tuple(t.shape)}")
    if check:
        eye = torch.eye(3, dtype=t.dtype)
        err = (t.transpose(-1, -2) @ t - eye).abs()
        if err.numel() and float(err.max()) > tol:
            raise NotARotation(f"matrix not orthonormal (max err {float(err.max()):.2e})")
        if t.numel() and bool((torch.linalg.det(t) <= 0).any()):
            raise NotARotation("matrix has negative determinant")
    out = torch.cat([t[..., :, 0], t[..., :, 1]], dim=-1)
    return out.numpy() if was_numpy else out


def yaw_matrix(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    K = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K


def geodesic_angle(R1, R2) -> np.ndarray:
    """Angle (radians) of ``R1^T R2``; batched over leading dims."""
    rel = np.swapaxes(np.asarray(R1), -1, -2) @ np.asarray(R2)
    tr = np.trace(rel, axis1=-2, axis2=-1)
    # atan2 keeps precision near 0 and pi where arccos of the trace does not
    w = np.stack([rel[..., 2, 1] - rel[..., 1, 2], rel[..., 0, 2] - rel[..., 2, 0],
                  rel[..., 1, 0] - rel[..., 0, 1]], axis=-1)
    return np.arctan2(np.linalg.norm(w, axis=-1) / 2.0, (tr - 1.0) / 2.0)


# ---------------------------------------------------------------------------
# Skeleton
# ---------------------------------------------------------------------------

@dataclass
class Skeleton:
    joint_names: list[str]
    parent_index: list[int]
    bone_offset: np.ndarray
    name: str = "canonical"

    def __post_init__(self):
        self.bone_offset = np.asarray(self.bone_offset, dtype=np.float64)
        n = len(self.joint_names)
        if n != N_JOINTS:
            raise SkeletonMismatch(f"skeleton needs {N_JOINTS} joints, got {n}")
        if len(set(self.joint_names)) != n:
            raise SkeletonMismatch("duplicate joint names")
        if self.parent_index[0] != -1:
            raise SkeletonMismatch("joint 0 must be the root")
        for k in range(1, n):
            p = self.parent_index[k]
            if not 0 <= p < k:
                raise SkeletonMismatch(f"joint {k} has parent {p}; parents must precede children")
        if self.bone_offset.shape != (n, 3) or not np.isfinite(self.bone_offset).all():
            raise SkeletonMismatch("bone offsets must be finite (23, 3)")

    def index(self, name: str) -> int:
        return self.joint_names.index(name)

    def bone_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.bone_offset, axis=1)

    def to_text(self) -> str:
        lines = ["# name parent offset_x offset_y offset_z"]
        for name, p, off in zip(self.joint_names, self.parent_index, self.bone_offset):
            parent = "-" if p < 0 else self.joint_names[p]
            lines.append(f"{name} {parent} {off[0]:.6f} {off[1]:.6f} {off[2]:.6f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, name: str = "canonical") -> "Skeleton":
        names, parents, offsets = [], [], []
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise SkeletonMismatch(f"bad skeleton line: {raw!r}")
            jn, parent = parts[0], parts[1]
            if parent == "-":
                parents.append(-1)
            elif parent in names:
                parents.append(names.index(parent))
            else:
                raise SkeletonMismatch(f"parent {parent!r} of {jn!r} not defined before it")
            names.append(jn)
            offsets.append([float(v) for v in parts[2:]])
        return cls(names, parents, np.array(offsets), name=name)


def load_skeleton(path) -> Skeleton:
    path = Path(path)
    return Skeleton.from_text(path.read_text(), name=path.stem)


def default_skeleton() -> Skeleton:
    text = resources.files("motionlm.data").joinpath("skeleton.txt").read_text()
    return Skeleton.from_text(text)


UPPER_BODY = (
    "spine1", "spine2", "spine3", "chest", "neck", "head",
    "l_collar", "l_shoulder", "l_elbow", "l_wrist",
    "r_collar", "r_shoulder", "r_elbow", "r_wrist",
)
LOWER_BODY = (
    "root", "l_hip", "l_knee", "l_ankle", "l_toe",
    "r_hip", "r_knee", "r_ankle", "r_toe",
)


# ---------------------------------------------------------------------------
# Motion representation
# ---------------------------------------------------------------------------

@dataclass
class PoseFrame:
    root_vel: np.ndarray
    root_rot: np.ndarray
    root_rot_vel: np.ndarray
    joint_rots: np.ndarray
    joint_rot_vels: np.ndarray

    @classmethod
    def from_vector(cls, v) -> "PoseFrame":
        v = np.asarray(v)
        if v.shape != (FRAME_DIM,):
            raise ShapeMismatch(f"pose frame must have {FRAME_DIM} entries, got {v.shape}")
        return cls(v[ROOT_VEL], v[ROOT_ROT], v[ROOT_ROT_VEL],
                   v[JOINT_ROT].reshape(N_BODY, 6), v[JOINT_ROT_VEL].reshape(N_BODY, 6))

    def to_vector(self) -> np.ndarray:
        out = np.concatenate([
            np.ravel(self.root_vel), np.ravel(self.root_rot), np.ravel(self.root_rot_vel),
            np.ravel(self.joint_rots), np.ravel(self.joint_rot_vels),
        ])
        if out.shape != (FRAME_DIM,):
            raise ShapeMismatch(f"pose frame concatenates to {out.shape[0]}, not {FRAME_DIM}")
        return out


@dataclass
class MotionSequence:
    """T frames of the 279-dim representation (stored as float32)."""

    frames: np.ndarray
    fps: float = 60.0
    skeleton: Skeleton = field(default_factory=default_skeleton, repr=False)
    initial_root_position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    initial_root_rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.initial_root_position = np.asarray(self.initial_root_position, dtype=np.float64).reshape(3)
        self.initial_root_rotation = np.asarray(self.initial_root_rotation, dtype=np.float64).reshape(3, 3)
        if self.frames.ndim != 2 or self.frames.shape[1] != FRAME_DIM:
            raise ShapeMismatch(f"frames must be (T, {FRAME_DIM}), got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise TooShort("a motion sequence needs at least one frame")
        if not self.fps > 0:
            raise ValueError("fps must be positive")
        if not np.isfinite(self.frames).all():
            raise ValueError("non-finite pose frames")
        R = self.initial_root_rotation
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-5:
            raise NotARotation("initial root rotation is not orthonormal")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    def frame(self, t: int) -> PoseFrame:
        return PoseFrame.from_vector(self.frames[t])

    def with_frames(self, frames) -> "MotionSequence":
        return replace(self, frames=frames)

    def slice(self, start: int, stop: int) -> "MotionSequence":
        """Sub-window with its own initial root pose."""
        pos = integrate_root_velocity(self)
        rot = rot6d_to_matrix(self.frames[start, ROOT_ROT].astype(np.float64), check=False)
        return replace(self, frames=self.frames[start:stop].copy(),
                       initial_root_position=pos[start], initial_root_rotation=rot)


def integrate_root_velocity(m: MotionSequence) -> np.ndarray:
    """Root trajectory ``(T, 3)``: ``p[0] = p0``, ``p[t] = p[t-1] + V[t-1]``."""
    vel = m.frames[:, ROOT_VEL].astype(np.float64)
    pos = np.empty_like(vel)
    pos[0] = m.initial_root_position
    if len(vel) > 1:
        pos[1:] = m.initial_root_position + np.cumsum(vel[:-1], axis=0)
    return pos


def _fk(frames: torch.Tensor, offsets: torch.Tensor, parents, root_pos: torch.Tensor) -> torch.Tensor:
    lead = frames.shape[:-1]
    root_R = rot6d_to_matrix(frames[..., ROOT_ROT], check=False)
    joint_R = rot6d_to_matrix(frames[..., JOINT_ROT].reshape(*lead, N_BODY, 6), check=False)
    glob = [root_R]
    pos = [root_pos]
    for k in range(1, len(parents)):
        p = parents[k]
        pos.append(pos[p] + (glob[p] @ offsets[k].unsqueeze(-1)).squeeze(-1))
        glob.append(glob[p] @ joint_R[..., k - 1, :, :])
    return torch.stack(pos, dim=-2)


def root_positions_torch(frames: torch.Tensor, p0: torch.Tensor | None = None) -> torch.Tensor:
    """Differentiable integration over the time axis (``-2``) of ``(..., T, 279)``."""
    vel = frames[..., ROOT_VEL]
    steps = torch.cumsum(vel, dim=-2)
    zero = torch.zeros_like(vel[..., :1, :])
    pos = torch.cat([zero, steps[..., :-1, :]], dim=-2)
    if p0 is not None:
        pos = pos + p0.unsqueeze(-2)
    return pos


def forward_kinematics_torch(frames: torch.Tensor, skeleton: Skeleton, p0: torch.Tensor | None = None) -> torch.Tensor:
    """Joint positions ``(..., T, 23, 3)`` from ``(..., T, 279)``; differentiable."""
    offsets = torch.as_tensor(skeleton.bone_offset, dtype=frames.dtype)
    return _fk(frames, offsets, skeleton.parent_index, root_positions_torch(frames, p0))


def forward_kinematics(m: MotionSequence) -> np.ndarray:
    """World joint positions ``(T, 23, 3)`` in float64."""
    if len(m.skeleton.joint_names) != N_JOINTS:
        raise SkeletonMismatch("skeleton joint count does not match the representation")
    frames = torch.as_tensor(m.frames.astype(np.float64))
    offsets = torch.as_tensor(m.skeleton.bone_offset)
    root = torch.as_tensor(integrate_root_velocity(m))
    with torch.no_grad():
        return _fk(frames, offsets, m.skeleton.parent_index, root).numpy()


def global_rotations(m: MotionSequence) -> np.ndarray:
    """Accumulated world rotation of every joint, ``(T, 23, 3, 3)``."""
    root_R, joint_R = absolute_rotations(m)
    parents = m.skeleton.parent_index
    out = np.empty((m.T, N_JOINTS, 3, 3))
    out[:, 0] = root_R
    for k in range(1, N_JOINTS):
        out[:, k] = out[:, parents[k]] @ joint_R[:, k - 1]
    return out


def absolute_rotations(m: MotionSequence) -> tuple[np.ndarray, np.ndarray]:
    f = m.frames.astype(np.float64)
    root_R = rot6d_to_matrix(f[:, ROOT_ROT], check=False)
    joint_R = rot6d_to_matrix(f[:, JOINT_ROT].reshape(-1, N_BODY, 6), check=False)
    return root_R, joint_R


def _forward_delta(R: np.ndarray) -> np.ndarray:
    """``R_t^-1 R_{t+1}`` along axis 0, last entry duplicated."""
    d = np.swapaxes(R[:-1], -1, -2) @ R[1:]
    return np.concatenate([d, d[-1:]], axis=0)


def derive_representation(root_positions, root_rotations, joint_rotations, fps: float = 60.0,
                          skeleton: Skeleton | None = None) -> MotionSequence:
    """Build a :class:`MotionSequence` from absolute per-frame poses.

    ``root_positions`` (T, 3), ``root_rotations`` (T, 3, 3) and
    ``joint_rotations`` (T, 22, 3, 3) local to each parent.
    """
    p = np.asarray(root_positions, dtype=np.float64)
    Rr = np.asarray(root_rotations, dtype=np.float64)
    Rj = np.asarray(joint_rotations, dtype=np.float64)
    T = p.shape[0]
    if T < 2:
        raise TooShort("need at least 2 absolute frames to derive velocities")
    if Rr.shape != (T, 3, 3) or Rj.shape != (T, N_BODY, 3, 3):
        raise ShapeMismatch("rotation arrays do not match the frame count / joint arity")
    vel = np.diff(p, axis=0)
    vel = np.concatenate([vel, vel[-1:]], axis=0)
    frames = np.concatenate([
        vel,
        matrix_to_rot6d(Rr),
        matrix_to_rot6d(_forward_delta(Rr)),
        matrix_to_rot6d(Rj).reshape(T, -1),
        matrix_to_rot6d(_forward_delta(Rj)).reshape(T, -1),
    ], axis=1)
    return MotionSequence(frames, fps=fps, skeleton=skeleton or default_skeleton(),
                          initial_root_position=p[0], initial_root_rotation=Rr[0])


def random_rotation_augment(m: MotionSequence, seed: int | None = None, angle: float | None = None) -> MotionSequence:
    """Rotate the whole sequence about the vertical axis through the origin.

    The yaw is drawn from ``seed`` unless ``angle`` (radians) is given.
    Root velocities, root rotations and the initial root pose rotate; the
    relative channels (rotation velocities, local joint rotations) do not.
    """
    if angle is None:
        angle = float(np.random.default_rng(seed).uniform(0.0, 2.0 * math.pi))
    Y = yaw_matrix(angle)
    f = m.frames.astype(np.float64).copy()
    f[:, ROOT_VEL] = f[:, ROOT_VEL] @ Y.T
    rr = f[:, ROOT_ROT].reshape(-1, 2, 3)
    f[:, ROOT_ROT] = (rr @ Y.T).reshape(-1, 6)
    out = replace(m, frames=f.astype(np.float32),
                  initial_root_position=Y @ m.initial_root_position,
                  initial_root_rotation=Y @ m.initial_root_rotation)
    if angle == 0.0:
        # bit-exact identity
        out.frames = m.frames.copy()
    return out


def rotation_velocity_residual(frames: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Stored rotation velocities vs. velocities implied by absolute rotations.

    Returns ``(stored, implied)`` 6D tensors over frames ``0..T-2`` for the
    root and every joint, shape ``(..., T-1, 23, 6)``.
    """
    lead = frames.shape[:-1]
    rot = torch.cat([frames[..., ROOT_ROT].unsqueeze(-2),
                     frames[..., JOINT_ROT].reshape(*lead, N_BODY, 6)], dim=-2)
    vel = torch.cat([frames[..., ROOT_ROT_VEL].unsqueeze(-2),
                     frames[..., JOINT_ROT_VEL].reshape(*lead, N_BODY, 6)], dim=-2)
    R = rot6d_to_matrix(rot, check=False)
    implied = R[..., :-1, :, :, :].transpose(-1, -2) @ R[..., 1:, :, :, :]
    implied6 = torch.cat([implied[..., :, 0], implied[..., :, 1]], dim=-1)
    return vel[..., :-1, :, :], implied6
