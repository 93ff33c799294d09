"""Procedural motion corpus: labelled clips, sensor tracks, stub video tracks,
narrations and manifests."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadParams, SkeletonMismatch
from .formats import write_manifest, write_mseq, write_vemb
from .kinematics import (
    N_BODY,
    MotionSequence,
    Skeleton,
    default_skeleton,
    derive_representation,
    forward_kinematics,
    global_rotations,
    matrix_to_rot6d,
)
from .sensors import POINT_WIDTH, SENSOR_POINTS, SensorStream, VideoEmbeddingTrack

TASKS = ("tracking", "understanding", "m2t", "t2m")


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    one, zero = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([one, zero, zero], -1),
                     np.stack([zero, c, -s], -1),
                     np.stack([zero, s, c], -1)], -2)


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    one, zero = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, zero, s], -1),
                     np.stack([zero, one, zero], -1),
                     np.stack([-s, zero, c], -1)], -2)


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    one, zero = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, -s, zero], -1),
                     np.stack([s, c, zero], -1),
                     np.stack([zero, zero, one], -1)], -2)


@dataclass
class MotionPrimitive:
    label: str
    cadence: tuple[float, float]      # Hz
    amplitude: tuple[float, float]    # rad, or metres of pelvis drop for squat/sit
    turn_rate: tuple[float, float]    # rad/s
    scenes: tuple[str, ...]
    templates: tuple[str, ...] = field(default=())


PRIMITIVES: dict[str, MotionPrimitive] = {
    "walk": MotionPrimitive("walk", (0.5, 2.5), (0.0, 0.6), (-0.6, 0.6), ("hallway", "park"),
                            ("walk forward in the {scene}", "walk across the {scene}",
                             "stroll through the {scene}")),
    "squat": MotionPrimitive("squat", (0.25, 1.5), (0.0, 0.4), (0.0, 0.0), ("garden", "garage"),
                             ("squat down in the {scene}", "crouch low in the {scene}")),
    "sit": MotionPrimitive("sit", (0.25, 1.5), (0.0, 0.4), (0.0, 0.0), ("office", "living room"),
                           ("sit down on a chair in the {scene}", "take a seat in the {scene}")),
    "wave": MotionPrimitive("wave", (0.5, 3.0), (0.0, 0.8), (0.0, 0.0), ("street", "lobby"),
                            ("wave the {side} hand in the {scene}", "greet someone in the {scene}")),
    "bend": MotionPrimitive("bend", (0.25, 1.5), (0.0, 1.2), (0.0, 0.0), ("kitchen", "laundry room"),
                            ("bend forward in the {scene}", "lean over in the {scene}")),
    "reach": MotionPrimitive("reach", (0.25, 1.5), (0.0, 1.4), (0.0, 0.0), ("bedroom", "library"),
                             ("reach out with the {side} hand in the {scene}",
                              "reach for a shelf in the {scene}")),
}
CLASSES = tuple(PRIMITIVES)
SCENES = tuple(s for p in PRIMITIVES.values() for s in p.scenes)


@dataclass
class ClipParams:
    cadence: float
    amplitude: float
    turn_rate: float = 0.0
    phase: float = 0.0
    heading: float = 0.0
    side: str = "left"


def sample_params(primitive: str, rng: np.random.Generator) -> ClipParams:
    p = PRIMITIVES[primitive]
    lo = p.amplitude[0] + 0.4 * (p.amplitude[1] - p.amplitude[0])
    return ClipParams(
        cadence=float(rng.uniform(*p.cadence)),
        amplitude=float(rng.uniform(lo, p.amplitude[1])),
        turn_rate=float(rng.uniform(*p.turn_rate)),
        phase=float(rng.uniform(0, 2 * math.pi)),
        heading=float(rng.uniform(0, 2 * math.pi)),
        side=("left", "right")[int(rng.integers(0, 2))],
    )


# rest pose has arms along +/-X; this brings them alongside the body
ARM_DOWN = math.radians(80)
SHIN = 0.42
THIGH = 0.42
PELVIS_HEIGHT = 0.95


def _pose_tracks(label: str, prm: ClipParams, T: int, fps: float, skel: Skeleton):
    t = np.arange(T) / fps
    J = {name: i - 1 for i, name in enumerate(skel.joint_names) if i > 0}
    rots = np.broadcast_to(np.eye(3), (T, N_BODY, 3, 3)).copy()
    zeros = np.zeros(T)

    def setj(name, R):
        rots[:, J[name]] = R

    heading = prm.heading + prm.turn_rate * t
    root_R = _ry(heading)
    root_p = np.zeros((T, 3))
    root_p[:, 1] = PELVIS_HEIGHT
    l_arm = _rz(np.full(T, -ARM_DOWN))
    r_arm = _rz(np.full(T, ARM_DOWN))
    A, f = prm.amplitude, prm.cadence

    if label == "walk":
        phi = 2 * math.pi * (f / 2) * t + prm.phase
        swing = A * np.sin(phi)
        setj("l_hip", _rx(-swing))
        setj("r_hip", _rx(swing))
        setj("l_knee", _rx(0.8 * A * np.clip(np.sin(phi + math.pi / 2), 0, None)))
        setj("r_knee", _rx(0.8 * A * np.clip(-np.sin(phi + math.pi / 2), 0, None)))
        l_arm = _rx(0.6 * swing) @ l_arm
        r_arm = _rx(-0.6 * swing) @ r_arm
        root_p[:, 1] = PELVIS_HEIGHT - 0.02 * A + 0.02 * A * np.cos(2 * math.pi * f * t + 2 * prm.phase)
        speed = f * 2 * (THIGH + SHIN) * math.sin(A) / fps
        step = speed * np.stack([np.sin(heading), zeros, np.cos(heading)], -1)
        root_p[:, [0, 2]] = np.cumsum(step, axis=0)[:, [0, 2]] - step[0, [0, 2]]
    elif label in ("squat", "sit"):
        s = (1 - np.cos(2 * math.pi * f * t + prm.phase)) / 2
        drop = np.minimum(A, THIGH - 1e-3) * s
        root_p[:, 1] = PELVIS_HEIGHT - drop
        extent = THIGH + SHIN - drop
        # upper body identical for both labels; only the legs differ
        lean = 0.8 * drop
        for j in ("spine1", "spine2", "spine3"):
            setj(j, _rx(lean / 3))
        l_arm = _rx(-1.2 * s * A / 0.4) @ l_arm
        r_arm = _rx(-1.2 * s * A / 0.4) @ r_arm
        if label == "squat":
            a = np.arccos(np.clip(extent / (THIGH + SHIN), -1, 1))
            hip, knee, ankle = _rx(-a), _rx(2 * a), _rx(-a)
        else:
            a = np.arccos(np.clip((extent - SHIN) / THIGH, -1, 1))
            hip, knee, ankle = _rx(-a), _rx(a), _rx(zeros)
        for side in ("l", "r"):
            setj(f"{side}_hip", hip)
            setj(f"{side}_knee", knee)
            setj(f"{side}_ankle", ankle)
    elif label == "wave":
        osc = A * np.sin(2 * math.pi * f * t + prm.phase)
        raise_ = _rz(np.full(T, math.radians(50)))
        bend = _rz(np.full(T, math.radians(60)) + osc)
        if prm.side == "left":
            l_arm = raise_
            setj("l_elbow", bend)
        else:
            r_arm = _rz(np.full(T, -math.radians(50)))
            setj("r_elbow", _rz(-(np.full(T, math.radians(60)) + osc)))
    elif label == "bend":
        s = (1 - np.cos(2 * math.pi * f * t + prm.phase)) / 2
        for j in ("spine1", "spine2", "spine3"):
            setj(j, _rx(A * s / 3))
        setj("neck", _rx(-0.3 * A * s))
        for side in ("l", "r"):
            setj(f"{side}_knee", _rx(0.15 * A * s))
            setj(f"{side}_hip", _rx(-0.1 * A * s))
        l_arm = _rx(-0.5 * A * s) @ l_arm
        r_arm = _rx(-0.5 * A * s) @ r_arm
    elif label == "reach":
        s = (1 - np.cos(2 * math.pi * f * t + prm.phase)) / 2
        arm = _rx(-A * s)
        elbow = _rz(0.6 * (1 - s))
        for j in ("spine2", "spine3"):
            setj(j, _rx(0.15 * A * s))
        if prm.side == "left":
            l_arm = arm @ l_arm
            setj("l_elbow", elbow)
        else:
            r_arm = arm @ r_arm
            setj("r_elbow", _rz(-0.6 * (1 - s)))
    setj("l_shoulder", l_arm)
    setj("r_shoulder", r_arm)
    return root_p, root_R, rots


def check_params(primitive: str, prm: ClipParams):
    if primitive not in PRIMITIVES:
        raise BadParams(f"unknown primitive {primitive!r}")
    p = PRIMITIVES[primitive]
    for name in ("cadence", "amplitude", "turn_rate"):
        lo, hi = getattr(p, name)
        v = getattr(prm, name)
        if not lo - 1e-9 <= v <= hi + 1e-9:
            raise BadParams(f"{primitive} {name}={v} outside [{lo}, {hi}]")
    if prm.side not in ("left", "right"):
        raise BadParams("side must be 'left' or 'right'")


def narration_for(primitive: str, prm: ClipParams, scene: str, rng: np.random.Generator) -> str:
    p = PRIMITIVES[primitive]
    tpl = p.templates[int(rng.integers(0, len(p.templates)))]
    if primitive == "walk" and abs(prm.turn_rate) > 0.3:
        tpl = "walk and turn {turn} in the {scene}"
    return tpl.format(scene=scene, side=prm.side, turn="left" if prm.turn_rate > 0 else "right")


def generate_clip(primitive: str, params: ClipParams | None = None, duration: int = 60, seed: int = 0,
                  fps: float = 60.0, down_rate: int = 4, skeleton: Skeleton | None = None,
                  scene: str | None = None) -> tuple[MotionSequence, str, str]:
    """One labelled clip: ``(motion, narration, scene)``; deterministic in ``seed``.

    Upper-body and root tracks depend only on ``params`` and ``seed``, so a
    squat and a sit generated with the same arguments have identical
    head/wrist trajectories.
    """
    if primitive not in PRIMITIVES:
        raise BadParams(f"unknown primitive {primitive!r}")
    if duration < 2 or duration % down_rate:
        raise BadParams(f"duration {duration} must be >= 2 and divisible by r={down_rate}")
    rng = np.random.default_rng(seed)
    prm = params if params is not None else sample_params(primitive, rng)
    check_params(primitive, prm)
    skel = skeleton or default_skeleton()
    root_p, root_R, rots = _pose_tracks(primitive, prm, duration, fps, skel)
    m = derive_representation(root_p, root_R, rots, fps=fps, skeleton=skel)
    text_rng = np.random.default_rng([seed, 7])
    if scene is None:
        scene = PRIMITIVES[primitive].scenes[int(text_rng.integers(0, len(PRIMITIVES[primitive].scenes)))]
    return m, narration_for(primitive, prm, scene, text_rng), scene


def derive_sensors(m: MotionSequence, kind: str = "three_points") -> SensorStream:
    """6-DoF tracks of head (and wrists) from forward kinematics."""
    names = SENSOR_POINTS[kind]
    try:
        idx = [m.skeleton.index(n) for n in names]
    except ValueError as exc:
        raise SkeletonMismatch(f"skeleton lacks sensor joints {names}") from exc
    pos = forward_kinematics(m)[:, idx]
    G = global_rotations(m)[:, idx]
    vel = np.diff(pos, axis=0)
    vel = np.concatenate([vel, vel[-1:]], axis=0)
    dG = np.swapaxes(G[:-1], -1, -2) @ G[1:]
    dG = np.concatenate([dG, dG[-1:]], axis=0)
    cols = []
    for p in range(len(idx)):
        cols += [pos[:, p], vel[:, p], matrix_to_rot6d(G[:, p], check=False), matrix_to_rot6d(dG[:, p], check=False)]
    feats = np.concatenate(cols, axis=1)
    assert feats.shape[1] == POINT_WIDTH * len(idx)
    return SensorStream(kind, feats)


def scene_anchor(scene: str, dim: int = 512) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(scene.encode()).digest()[:8], "little")
    v = np.random.default_rng(seed).normal(size=dim)
    return v / np.linalg.norm(v)


def video_track(scene: str, n_frames: int, dim: int = 512, seed: int = 0, noise: float = 0.05) -> VideoEmbeddingTrack:
    """Stub egocentric video features: scene anchor plus per-frame noise."""
    rng = np.random.default_rng([seed, 11])
    return VideoEmbeddingTrack(scene_anchor(scene, dim) + rng.normal(0.0, noise, (n_frames, dim)))


@dataclass
class Clip:
    clip_id: str
    label: str
    scene: str
    narration: str
    motion: MotionSequence
    video: VideoEmbeddingTrack
    seed: int

    def sensors(self, kind: str = "three_points") -> SensorStream:
        return derive_sensors(self.motion, kind)


def make_clip(clip_id: str, label: str, seed: int, duration: int = 60, fps: float = 60.0,
              video_dim: int = 512, down_rate: int = 4, params: ClipParams | None = None,
              scene: str | None = None) -> Clip:
    m, text, scene = generate_clip(label, params, duration, seed, fps, down_rate, scene=scene)
    return Clip(clip_id, label, scene, text, m, video_track(scene, duration // down_rate, video_dim, seed), seed)


def class_schedule(n: int, rng: np.random.Generator) -> list[str]:
    """Balanced labels: counts differ by at most one across primitives."""
    reps = -(-n // len(CLASSES))
    order = []
    for _ in range(reps):
        order.extend(rng.permutation(len(CLASSES)).tolist())
    return [CLASSES[i] for i in order[:n]]


def split_seeds(split: str, n: int, seed: int) -> list[int]:
    base = seed * 10_000_000 + (0 if split == "train" else 5_000_000)
    return [base + i for i in range(n)]


def generate_split(split: str, n: int, seed: int = 0, duration: int = 60, fps: float = 60.0,
                   video_dim: int = 512, down_rate: int = 4) -> list[Clip]:
    labels = class_schedule(n, np.random.default_rng([seed, 0 if split == "train" else 1]))
    return [make_clip(f"{split}_{i:05d}", lab, s, duration, fps, video_dim, down_rate)
            for i, (lab, s) in enumerate(zip(labels, split_seeds(split, n, seed)))]


def ambiguous_pairs(n: int, seed: int = 0, duration: int = 60, fps: float = 60.0, video_dim: int = 512,
                    down_rate: int = 4) -> list[tuple[Clip, Clip]]:
    """(sit, squat) pairs sharing every upper-body draw: identical three-point tracks."""
    pairs = []
    for i in range(n):
        s = seed * 10_000_000 + 9_000_000 + i
        prm = sample_params("squat", np.random.default_rng(s))
        prm.amplitude = float(np.random.default_rng([s, 3]).uniform(0.3, 0.4))
        sit = make_clip(f"amb_sit_{i:04d}", "sit", s, duration, fps, video_dim, down_rate, params=prm)
        squat = make_clip(f"amb_squat_{i:04d}", "squat", s, duration, fps, video_dim, down_rate, params=prm)
        pairs.append((sit, squat))
    return pairs


def build_corpus(out_dir, n_train: int = 256, n_test: int = 64, seed: int = 0, duration: int = 60,
                 fps: float = 60.0, video_dim: int = 512, down_rate: int = 4,
                 sensor_kind: str = "three_points") -> dict:
    """Write clips, video tracks, narrations, skeleton and per-split manifests."""
    out = Path(out_dir)
    for sub in ("motions", "video", "text"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    skel = default_skeleton()
    (out / "skeleton.txt").write_text(skel.to_text())
    summary = {}
    for split, n in (("train", n_train), ("test", n_test)):
        rows = []
        for clip in generate_split(split, n, seed, duration, fps, video_dim, down_rate):
            mpath = f"motions/{clip.clip_id}.mseq"
            vpath = f"video/{clip.clip_id}.vemb"
            tpath = f"text/{clip.clip_id}.txt"
            write_mseq(out / mpath, clip.motion)
            write_vemb(out / vpath, clip.video.embeddings)
            (out / tpath).write_text(clip.narration + "\n")
            for task in TASKS:
                rows.append({"clip": clip.clip_id, "split": split, "task": task, "motion": mpath,
                             "sensor_kind": sensor_kind, "video": vpath, "narration": clip.narration,
                             "label": clip.label, "scene": clip.scene, "seed": clip.seed})
        write_manifest(out / f"{split}.jsonl", rows)
        summary[split] = n
    return summary
