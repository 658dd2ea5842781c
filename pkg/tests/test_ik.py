import math

import numpy as np
import pytest

from vtanim.ema import CoilRole, EmaTrajectory
from vtanim.ik import (
    IkConfig,
    IkError,
    IkTarget,
    JointLimit,
    attach_targets,
    dump_targets,
    effector_trajectories,
    pose_effectors,
    solve_frame,
    solve_sequence,
)
from vtanim.rig import BONE_AXIS, Pose, build_jaw_armature, build_tongue_armature, fk_arrays, merge_armatures
from vtanim.synth import (
    HINGE,
    JAW_COIL,
    TONGUE_COILS,
    record_ema,
    sinusoid_rotvecs,
    solve_two_link,
    two_link_problem,
)
from vtanim.transforms import RigidTransform, quat_rotate, rotvec_from_quat

ROLES = [
    CoilRole("T1", "tongue", 0),
    CoilRole("T2", "tongue", 1),
    CoilRole("T3", "tongue", 2),
    CoilRole("JAW", "jaw"),
    CoilRole("REF", "reference"),
]
SWING = {b: JointLimit.swing_only() for b in ("tongue.0", "tongue.1", "tongue.2", "jaw")}


@pytest.fixture(scope="module")
def rig():
    return merge_armatures(build_tongue_armature(TONGUE_COILS, 5.0), build_jaw_armature(JAW_COIL, HINGE))


def bind_targets(rig):
    traj = record_ema(rig, np.zeros((1, len(rig), 3)))
    return attach_targets(rig, ROLES, traj)[0]


def fk_frames(rig, n, seed=7):
    rv = sinusoid_rotvecs(rig, n, seed)
    return rv, attach_targets(rig, ROLES, record_ema(rig, rv))


# --- solve_frame ----------------------------------------------------------------------


def test_fixed_point(rig):
    res = solve_frame(rig, Pose.bind(rig), bind_targets(rig), IkConfig())
    assert res.converged and res.iterations_used == 0 and res.residual_mm == 0.0
    assert res.pose == Pose.bind(rig)


def test_two_link_reachable():
    problem = two_link_problem()
    out = solve_two_link(problem, "reachable")
    assert out["converged"]
    np.testing.assert_allclose(out["effector"], [1, 1, 0], atol=problem["ik"]["tolerance_mm"])
    np.testing.assert_allclose(out["angles_rad"], [0.0, math.pi / 2], atol=1e-3)


def test_two_link_unreachable():
    out = solve_two_link(two_link_problem(), "unreachable")
    assert not out["converged"]
    np.testing.assert_allclose(out["effector"], [0, 2, 0], atol=1e-3)
    assert out["residual_mm"] == pytest.approx(1.0, abs=1e-3)


def test_residual_never_increases(rig):
    rv, frames = fk_frames(rig, 40)
    cfg = IkConfig(joint_limits=SWING)
    for targets in frames[::5]:
        start = np.linalg.norm(pose_effectors(rig, Pose.bind(rig), targets) - [t.target_position for t in targets], axis=1).max()
        prev = start
        for cap in range(1, 6):
            res = solve_frame(rig, Pose.bind(rig), targets, IkConfig(max_iterations=cap, joint_limits=SWING))
            assert res.residual_mm <= prev + 1e-15
            prev = res.residual_mm
        assert solve_frame(rig, Pose.bind(rig), targets, cfg).residual_mm <= prev


def test_joint_limits_hold(rig):
    _, frames = fk_frames(rig, 30)
    limits = {b: JointLimit((0.0, -0.05, -0.05), (0.0, 0.05, 0.05), max_swing=0.06) for b in rig.bone_ids}
    clip = solve_sequence(rig, frames, IkConfig(joint_limits=limits))
    rv = rotvec_from_quat(clip.rotations)
    assert np.all(np.abs(rv[..., 0]) <= 1e-12)
    assert np.all(np.abs(rv[..., 1:]) <= 0.05 + 1e-12)
    assert np.all(np.linalg.norm(rv, axis=-1) <= 0.06 + 1e-12)


def test_solve_frame_rejects_bad_input(rig):
    with pytest.raises(IkError):
        solve_frame(rig, Pose.bind(rig), [], IkConfig())
    with pytest.raises(IkError):
        IkConfig(tolerance_mm=0)
    with pytest.raises(IkError):
        IkTarget("x", "jaw", [0, 0, 0], position_weight=0.0)


# --- solve_sequence ----------------------------------------------------------------------


def test_constant_targets(rig):
    _, frames = fk_frames(rig, 40)
    clip = solve_sequence(rig, [frames[30]] * 10, IkConfig(joint_limits=SWING))
    assert clip.converged.all()
    assert np.abs(clip.rotations[1:] - clip.rotations[1]).max() <= 1e-9


def test_fk_roundtrip_small(rig):
    rv, frames = fk_frames(rig, 80)
    cfg = IkConfig(joint_limits=SWING)
    clip = solve_sequence(rig, frames, cfg)
    eff, _ = effector_trajectories(rig, clip, frames[0])
    goal = np.array([[t.target_position for t in fr] for fr in frames])
    assert np.linalg.norm(eff - goal, axis=-1).max() <= cfg.tolerance_mm
    assert clip.converged.all()


def test_warm_start_not_slower(rig):
    _, frames = fk_frames(rig, 60, seed=3)
    cfg = IkConfig(joint_limits=SWING)
    warm = solve_sequence(rig, frames, cfg, warm_start=True)
    cold = solve_sequence(rig, frames, cfg, warm_start=False)
    assert warm.iterations.mean() <= cold.iterations.mean()


def test_determinism(rig):
    _, frames = fk_frames(rig, 20)
    a = solve_sequence(rig, frames, IkConfig(joint_limits=SWING))
    b = solve_sequence(rig, frames, IkConfig(joint_limits=SWING))
    assert a == b
    assert a.rotations.tobytes() == b.rotations.tobytes()


def test_missing_samples_are_held(rig):
    rv = sinusoid_rotvecs(rig, 12, 7)
    traj = record_ema(rig, rv)
    valid = traj.valid.copy()
    valid[[0, 5, 6], 1] = False
    frames = attach_targets(rig, ROLES, traj.replace(valid=valid))
    clip = solve_sequence(rig, frames, IkConfig(joint_limits=SWING))
    assert clip.held.tolist() == [i in (0, 5, 6) for i in range(12)]
    assert clip.residuals_mm.shape == (12,)


def test_empty_sequence(rig):
    with pytest.raises(IkError):
        solve_sequence(rig, [], IkConfig())


# --- attach and dump ---------------------------------------------------------------------------


def test_attach_bind_frame_zero_residual(rig):
    res = solve_frame(rig, Pose.bind(rig), bind_targets(rig), IkConfig())
    assert res.residual_mm < 1e-12


def test_attach_registration_translation(rig):
    traj = record_ema(rig, np.zeros((1, len(rig), 3)))
    a = attach_targets(rig, ROLES, traj)[0]
    b = attach_targets(rig, ROLES, traj, RigidTransform(translation=[0, 0, 10]))[0]
    for ta, tb in zip(a, b):
        np.testing.assert_array_equal(tb.target_position - ta.target_position, [0, 0, 10])


def test_attach_ignores_other_roles(rig):
    traj = record_ema(rig, np.zeros((1, len(rig), 3)))
    roles = ROLES[:-1] + [CoilRole("REF", "other")]
    assert [t.coil_id for t in attach_targets(rig, roles, traj)[0]] == ["T1", "T2", "T3", "JAW"]


def test_attach_errors_name_coil(rig):
    traj = record_ema(rig, np.zeros((1, len(rig), 3)))
    with pytest.raises(IkError, match="'T9'"):
        attach_targets(rig, ROLES + [CoilRole("T9", "tongue", 5)], traj)
    tongue_only = build_tongue_armature(TONGUE_COILS, 5.0)
    with pytest.raises(IkError, match="'JAW'"):
        attach_targets(tongue_only, ROLES, traj)


def test_dump_bind_clip(rig):
    targets = bind_targets(rig)
    clip = solve_sequence(rig, [targets] * 3, IkConfig())
    out = dump_targets(rig, clip, targets)
    want = np.vstack([TONGUE_COILS, JAW_COIL])
    assert np.abs(out.positions - want).max() < 1e-9
    assert out.coil_ids == ("T1", "T2", "T3", "JAW")


def test_dump_within_residual(rig):
    _, frames = fk_frames(rig, 30)
    clip = solve_sequence(rig, frames, IkConfig(joint_limits=SWING))
    out = dump_targets(rig, clip, frames[0])
    goal = np.array([[t.target_position for t in fr] for fr in frames])
    err = np.linalg.norm(out.positions - goal, axis=-1).max(axis=1)
    assert np.all(err <= clip.residuals_mm + 1e-12)
    np.testing.assert_array_equal(out.rms[:, 0], clip.residuals_mm)


def test_dump_axes_follow_bones(rig):
    _, frames = fk_frames(rig, 5)
    clip = solve_sequence(rig, frames, IkConfig(joint_limits=SWING))
    out = dump_targets(rig, clip, frames[0], rate_hz=100.0)
    assert isinstance(out, EmaTrajectory) and out.sample_rate_hz == 100.0
    gq, _ = fk_arrays(rig, clip.rotations, clip.root_translations)
    bones = [rig.index(t.bone_id) for t in frames[0]]
    np.testing.assert_allclose(out.orientations, quat_rotate(gq[:, bones], BONE_AXIS), atol=1e-12)
