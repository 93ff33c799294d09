import math

import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from conftest import random_motion
from motionlm.errors import DegenerateInput, NotARotation, SkeletonMismatch, TooShort
from motionlm.kinematics import (
    FRAME_DIM,
    JOINT_ROT,
    N_BODY,
    N_JOINTS,
    ROOT_ROT,
    ROOT_VEL,
    MotionSequence,
    PoseFrame,
    Skeleton,
    absolute_rotations,
    derive_representation,
    forward_kinematics,
    forward_kinematics_torch,
    geodesic_angle,
    global_rotations,
    integrate_root_velocity,
    matrix_to_rot6d,
    random_rotation_augment,
    rot6d_to_matrix,
    rotation_velocity_residual,
    yaw_matrix,
)

IDENT6 = [1, 0, 0, 0, 1, 0]


def gram_schmidt(v):
    a = v[:3] / np.linalg.norm(v[:3])
    b = v[3:] - a.dot(v[3:]) * a
    b = b / np.linalg.norm(b)
    return np.column_stack([a, b, np.cross(a, b)])


def homogeneous_fk(m):
    """Per-frame chain of explicit 4x4 transforms."""
    sk = m.skeleton
    out = np.zeros((m.T, N_JOINTS, 3))
    root = m.initial_root_position.copy()
    for t in range(m.T):
        f = m.frames[t].astype(np.float64)
        T = [None] * N_JOINTS
        T[0] = np.eye(4)
        T[0][:3, :3] = gram_schmidt(f[3:9])
        T[0][:3, 3] = root
        for k in range(1, N_JOINTS):
            L = np.eye(4)
            L[:3, :3] = gram_schmidt(f[15 + 6 * (k - 1):21 + 6 * (k - 1)])
            L[:3, 3] = sk.bone_offset[k]
            T[k] = T[sk.parent_index[k]] @ L
        out[t] = [Tk[:3, 3] for Tk in T]
        root = root + f[0:3]
    return out


def static_motion(T=5, skeleton=None):
    f = np.zeros((T, FRAME_DIM))
    f[:, 3:9] = IDENT6
    f[:, 9:15] = IDENT6
    f[:, 15:147] = np.tile(IDENT6, N_BODY)
    f[:, 147:279] = np.tile(IDENT6, N_BODY)
    return MotionSequence(f)


def test_rot6d_examples():
    assert np.allclose(rot6d_to_matrix(np.array(IDENT6, float)), np.eye(3))
    R = rot6d_to_matrix(np.array([0, 1, 0, -1, 0, 0], float))
    assert np.allclose(R, np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]]))
    assert np.allclose(rot6d_to_matrix(np.array([2, 0, 0, 1, 3, 0], float)), np.eye(3))


def test_rot6d_degenerate():
    with pytest.raises(DegenerateInput):
        rot6d_to_matrix(np.array([1, 0, 0, 2, 0, 0], float))
    with pytest.raises(DegenerateInput):
        rot6d_to_matrix(np.zeros(6))


def test_matrix_to_rot6d_examples():
    assert np.allclose(matrix_to_rot6d(np.eye(3)), IDENT6)
    Rx = Rotation.from_euler("x", 180, degrees=True).as_matrix()
    assert np.allclose(matrix_to_rot6d(Rx), [1, 0, 0, 0, -1, 0])
    with pytest.raises(NotARotation):
        matrix_to_rot6d(np.diag([1.0, 1.0, 1.1]))
    with pytest.raises(NotARotation):
        matrix_to_rot6d(np.diag([1.0, 1.0, -1.0]))


def test_round_trip_random_rotations():
    R = Rotation.random(1000, random_state=0).as_matrix()
    back = rot6d_to_matrix(matrix_to_rot6d(R))
    assert np.linalg.norm(back - R, axis=(1, 2)).max() < 1e-5


def test_scale_invariance_of_6d():
    rng = np.random.default_rng(1)
    v = rng.normal(size=(50, 6))
    s = rng.uniform(0.1, 10, size=(50, 2))
    w = np.concatenate([v[:, :3] * s[:, :1], v[:, 3:] * s[:, 1:]], axis=1)
    assert np.allclose(rot6d_to_matrix(v), rot6d_to_matrix(w), atol=1e-12)


def test_rot6d_torch_differentiable():
    v = torch.randn(4, 6, dtype=torch.float64, requires_grad=True)
    rot6d_to_matrix(v).sum().backward()
    assert v.grad is not None and torch.isfinite(v.grad).all()
    assert np.allclose(rot6d_to_matrix(v.detach()).numpy(), rot6d_to_matrix(v.detach().numpy()))


def test_skeleton_invariants(skeleton):
    assert len(skeleton.joint_names) == 23 and skeleton.joint_names[0] == "root"
    assert skeleton.parent_index[0] == -1
    assert Skeleton.from_text(skeleton.to_text()).joint_names == skeleton.joint_names
    with pytest.raises(Exception):
        Skeleton(skeleton.joint_names[:-1], skeleton.parent_index[:-1], skeleton.bone_offset[:-1])


def test_pose_frame_arity():
    v = np.arange(FRAME_DIM, dtype=float)
    pf = PoseFrame.from_vector(v)
    assert pf.joint_rots.shape == (22, 6)
    assert np.array_equal(pf.to_vector(), v)
    assert 3 + 6 + 6 + 22 * 6 + 22 * 6 == FRAME_DIM == 279


def test_motion_sequence_validation():
    with pytest.raises(Exception):
        MotionSequence(np.zeros((0, FRAME_DIM)))
    with pytest.raises(Exception):
        MotionSequence(np.zeros((3, FRAME_DIM)), fps=0)
    with pytest.raises(NotARotation):
        MotionSequence(np.zeros((3, FRAME_DIM)), initial_root_rotation=np.diag([1, 1, 1.001]))


def test_fk_rest_pose(skeleton):
    m = static_motion()
    J = forward_kinematics(m)
    expect = np.zeros((N_JOINTS, 3))
    for k in range(1, N_JOINTS):
        expect[k] = expect[skeleton.parent_index[k]] + skeleton.bone_offset[k]
    assert np.allclose(J, expect[None], atol=1e-12)


def test_fk_two_bone_chain(skeleton):
    # rotate the left elbow 90 degrees about z; the wrist bone follows, the upper arm does not
    e = skeleton.index("l_elbow")
    w = skeleton.parent_index.index(e)
    Rz = Rotation.from_euler("z", 90, degrees=True).as_matrix()
    m = static_motion(T=1)
    m.frames[0, 15 + 6 * (e - 1):21 + 6 * (e - 1)] = matrix_to_rot6d(Rz)
    J = forward_kinematics(m)[0]
    rest = forward_kinematics(static_motion(T=1))[0]
    assert np.allclose(J[e], rest[e], atol=1e-12)
    assert np.allclose(J[w] - J[e], Rz @ skeleton.bone_offset[w], atol=1e-12)


def test_fk_matches_homogeneous_oracle():
    rng = np.random.default_rng(0)
    for _ in range(5):
        m = random_motion(rng)
        assert np.abs(forward_kinematics(m) - homogeneous_fk(m)).max() < 1e-6


def test_skeleton_wrong_size():
    with pytest.raises(SkeletonMismatch):
        Skeleton(["a", "b"], [-1, 0], np.zeros((2, 3)), name="tiny")


def test_integrate_root_velocity():
    m = static_motion(T=60)
    assert np.allclose(integrate_root_velocity(m), 0)
    m.frames[:, ROOT_VEL] = [0.01, 0, 0]
    pos = integrate_root_velocity(m)
    assert np.isclose(m.frames[:, 0].astype(np.float64).sum(), 0.6, atol=1e-6)
    assert np.allclose(pos[-1], [0.59, 0, 0], atol=1e-6)


def test_difference_then_integrate():
    rng = np.random.default_rng(2)
    T = 40
    p = np.cumsum(rng.normal(scale=0.01, size=(T, 3)), axis=0)
    R = Rotation.random(T, random_state=3).as_matrix()
    Rj = np.tile(np.eye(3), (T, N_BODY, 1, 1))
    m = derive_representation(p, R, Rj)
    assert np.abs(integrate_root_velocity(m) - p).max() < 1e-6


def test_derive_representation_constant_pose():
    T = 10
    m = derive_representation(np.zeros((T, 3)), np.tile(np.eye(3), (T, 1, 1)), np.tile(np.eye(3), (T, N_BODY, 1, 1)))
    assert np.allclose(m.frames[:, 9:15], IDENT6)
    assert np.allclose(m.frames[:, 147:].reshape(T, N_BODY, 6), IDENT6)
    assert np.allclose(m.frames[:, ROOT_VEL], 0)


def test_derive_representation_uniform_spin():
    T = 20
    Rj = np.tile(np.eye(3), (T, N_BODY, 1, 1))
    Rj[:, 4] = Rotation.from_euler("y", np.arange(T), degrees=True).as_matrix()
    m = derive_representation(np.zeros((T, 3)), np.tile(np.eye(3), (T, 1, 1)), Rj)
    step = Rotation.from_euler("y", 1, degrees=True).as_matrix()
    vel = rot6d_to_matrix(m.frames[:, 147:].reshape(T, N_BODY, 6).astype(np.float64))
    assert np.allclose(vel[:, 4], step[None], atol=1e-6)


def test_derive_representation_round_trip():
    rng = np.random.default_rng(4)
    T = 12
    p = rng.normal(size=(T, 3))
    Rr = Rotation.random(T, random_state=5).as_matrix()
    Rj = Rotation.random(T * N_BODY, random_state=6).as_matrix().reshape(T, N_BODY, 3, 3)
    m = derive_representation(p, Rr, Rj)
    root_R, joint_R = absolute_rotations(m)
    assert np.abs(root_R - Rr).max() < 1e-5 and np.abs(joint_R - Rj).max() < 1e-5
    stored, implied = rotation_velocity_residual(torch.as_tensor(m.frames.astype(np.float64)))
    assert float((stored - implied).abs().max()) < 1e-5
    # last frame duplicates the previous velocity
    assert np.array_equal(m.frames[-1, 147:], m.frames[-2, 147:])
    with pytest.raises(TooShort):
        derive_representation(p[:1], Rr[:1], Rj[:1])


def test_augment_zero_and_determinism():
    m = random_motion(np.random.default_rng(7))
    same = random_rotation_augment(m, angle=0.0)
    assert np.array_equal(same.frames, m.frames)
    a = random_rotation_augment(m, seed=11)
    b = random_rotation_augment(m, seed=11)
    assert np.array_equal(a.frames, b.frames)


def test_augment_fk_equivariance():
    m = random_motion(np.random.default_rng(8))
    for ang in (math.pi / 2, 1.234):
        rot = random_rotation_augment(m, angle=ang)
        expect = forward_kinematics(m) @ yaw_matrix(ang).T
        assert np.abs(forward_kinematics(rot) - expect).max() < 1e-5


def test_global_rotations_compose():
    m = random_motion(np.random.default_rng(9), T=3)
    G = global_rotations(m)
    root_R, joint_R = absolute_rotations(m)
    k = m.skeleton.index("l_wrist")
    chain = []
    j = k
    while j > 0:
        chain.append(j)
        j = m.skeleton.parent_index[j]
    acc = root_R[1].copy()
    for j in reversed(chain):
        acc = acc @ joint_R[1, j - 1]
    assert np.allclose(G[1, k], acc)


def test_geodesic_known_angle():
    R = Rotation.from_rotvec(np.radians(30) * np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8]))
    assert abs(np.degrees(geodesic_angle(np.eye(3), R.as_matrix())) - 30) < 1e-4
