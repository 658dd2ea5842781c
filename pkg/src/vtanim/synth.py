"""Deterministic desk-scale fixtures: meshes, config and EMA recordings.

Every scenario shares one vocal-tract layout (millimetres, x forward, z up):
three tongue coils on the midline of a heightfield tongue surface, a jaw coil
on a flat mandible plate, a static reference coil, and a downward-facing
palate plane. Coil motion comes from forward kinematics of a known pose
sequence on the same rig the compiler builds, so the generating poses are an
exact IK oracle.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from vtanim.compiler import CONFIG_FORMAT, build_rig, config_from_dict, skin_meshes
from vtanim.ema import EmaTrajectory, write_ema_csv
from vtanim.evaluation import dumps_json
from vtanim.ik import IkTarget, IkConfig, JointLimit, solve_frame
from vtanim.mesh import TriMesh, write_obj
from vtanim.rig import (
    BONE_AXIS,
    Armature,
    Pose,
    armature_to_dict,
    build_tongue_armature,
    fk_arrays,
    skin_vertices,
    skinning_matrices,
    bind_globals,
    GlobalTransforms,
    tongue_bone_id,
)
from vtanim.transforms import quat_from_rotvec, quat_rotate, rotvec_from_quat

SCENARIOS = ("bind", "fk-roundtrip", "penetrate", "two-link")
RATE_HZ = 200.0

TONGUE_COILS = np.array([[10.0, 0.0, 0.0], [19.0, 0.0, 2.0], [27.0, 0.0, 2.5]])
JAW_COIL = np.array([33.0, 0.0, -5.0])
HINGE = np.array([-2.0, 0.0, 10.0])
REF_COIL = np.array([0.0, 0.0, 20.0])
ROOT_OFFSET_MM = 5.0
SIGMA_MM = 5.0
PALATE_Z = 16.0


class SynthError(ValueError):
    pass


def grid_mesh(xs: np.ndarray, ys: np.ndarray, height, up: bool = True) -> TriMesh:
    """Heightfield ``z = height(x, y)`` over a rectilinear grid, normals up (or down)."""
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    verts = np.stack([gx, gy, height(gx, gy)], axis=-1).reshape(-1, 3)
    nx, ny = len(xs), len(ys)
    idx = np.arange(nx * ny).reshape(nx, ny)
    a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
    c, d = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    if up:
        tris = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    else:
        tris = np.concatenate([np.stack([a, c, b], 1), np.stack([a, d, c], 1)])
    return TriMesh(verts, tris)


def tongue_mesh() -> TriMesh:
    """Midline profile through the root head and the coils, falling off sideways.

    The grid includes every coil's x and y = 0, so each coil is a vertex.
    """
    head = TONGUE_COILS[0] - ROOT_OFFSET_MM * (TONGUE_COILS[1] - TONGUE_COILS[0]) / np.linalg.norm(
        TONGUE_COILS[1] - TONGUE_COILS[0]
    )
    px = np.concatenate([[head[0]], TONGUE_COILS[:, 0]])
    pz = np.concatenate([[head[2]], TONGUE_COILS[:, 2]])
    xs = np.arange(3.0, 31.0)
    ys = np.arange(-8.0, 9.0)
    return grid_mesh(xs, ys, lambda x, y: np.interp(x, px, pz) - 0.04 * y * y)


def mandible_mesh() -> TriMesh:
    xs = np.arange(JAW_COIL[0] - 14.0, JAW_COIL[0] + 5.0, 2.0)
    ys = np.arange(-10.0, 11.0, 2.0)
    return grid_mesh(xs, ys, lambda x, y: np.full_like(x, JAW_COIL[2]))


def plane_mesh(z: float, down: bool = True, extent=((-10.0, 50.0), (-25.0, 25.0))) -> TriMesh:
    (x0, x1), (y0, y1) = extent
    return grid_mesh(np.array([x0, x1]), np.array([y0, y1]), lambda x, y: np.full_like(x, z), up=not down)


def base_config(ik: dict | None = None, evaluation: dict | None = None, palate: bool = True) -> dict:
    meshes = {"tongue": "tongue.obj", "mandible": "mandible.obj", "maxilla": "maxilla.obj"}
    if palate:
        meshes["palate"] = "palate.obj"
    return {
        "format": CONFIG_FORMAT,
        "meshes": meshes,
        "ema": {"path": "ema.csv", "format": "csv"},
        "coils": [
            {"id": "T1", "articulator": "tongue", "chain_index": 0},
            {"id": "T2", "articulator": "tongue", "chain_index": 1},
            {"id": "T3", "articulator": "tongue", "chain_index": 2},
            {"id": "JAW", "articulator": "jaw"},
            {"id": "REF", "articulator": "reference"},
        ],
        "registration": {"rotation": [1.0, 0.0, 0.0, 0.0], "translation": [0.0, 0.0, 0.0]},
        "rig": {
            "falloff_sigma_mm": SIGMA_MM,
            "root_offset_mm": ROOT_OFFSET_MM,
            "hinge": HINGE.tolist(),
            "lock_twist": True,
            "max_swing_rad": None,
        },
        "ik": dict(ik or {}),
        "evaluation": dict(evaluation or {}),
    }


def fixture_rig(config_doc: dict) -> Armature:
    cfg = config_from_dict(config_doc, ".")
    binds = {"T1": TONGUE_COILS[0], "T2": TONGUE_COILS[1], "T3": TONGUE_COILS[2], "JAW": JAW_COIL}
    return build_rig(cfg, binds)


def record_ema(armature: Armature, rotvecs: np.ndarray) -> EmaTrajectory:
    """EMA as the articulograph would see the FK effectors of a pose sequence."""
    n = len(rotvecs)
    q = quat_from_rotvec(rotvecs)
    root_t = np.zeros((n, len(armature.roots), 3))
    gq, gt = fk_arrays(armature, q, root_t)
    bones = [armature.index(tongue_bone_id(i)) for i in range(3)] + [armature.index("jaw")]
    local = np.array([(armature.lengths[b], 0.0, 0.0) for b in bones])
    pos = quat_rotate(gq[:, bones], local) + gt[:, bones]
    axes = quat_rotate(gq[:, bones], BONE_AXIS)
    pos = np.concatenate([pos, np.broadcast_to(REF_COIL, (n, 1, 3))], axis=1)
    axes = np.concatenate([axes, np.broadcast_to(BONE_AXIS, (n, 1, 3))], axis=1)
    return EmaTrajectory(
        ("T1", "T2", "T3", "JAW", "REF"), RATE_HZ, pos, axes, np.zeros(pos.shape[:2]), np.ones(pos.shape[:2], bool)
    )


def sinusoid_rotvecs(armature: Armature, n_frames: int, seed: int) -> np.ndarray:
    """Swing-only (twist-free) joint motion, bind pose at frame 0."""
    rng = np.random.default_rng(seed)
    t = np.arange(n_frames) / RATE_HZ
    rv = np.zeros((n_frames, len(armature), 3))
    for b, bone_id in enumerate(armature.bone_ids):
        lo, hi = (0.02, 0.06) if bone_id == "jaw" else (0.05, 0.15)
        for k in (1, 2):
            amp = rng.uniform(lo, hi) * rng.choice([-1.0, 1.0])
            freq = rng.uniform(0.5, 2.0)
            rv[:, b, k] = amp * np.sin(2.0 * math.pi * freq * t)
    return rv


def skinned_tongue(armature: Armature, config_doc: dict, rotvecs: np.ndarray) -> np.ndarray:
    """Tongue vertices (F, V, 3) under the generating poses, weighted as the compiler does."""
    cfg = config_from_dict(config_doc, ".")
    mesh = tongue_mesh()
    w = skin_meshes(cfg, armature, {"tongue": mesh})["tongue"]
    bind = bind_globals(armature)
    gq, gt = fk_arrays(armature, quat_from_rotvec(rotvecs), np.zeros((len(rotvecs), len(armature.roots), 3)))
    return np.array(
        [skin_vertices(mesh.vertices, w, skinning_matrices(bind, GlobalTransforms(gq[f], gt[f]))) for f in range(len(rotvecs))]
    )


@dataclass(frozen=True)
class Fixture:
    files: dict[str, bytes]
    rotvecs: np.ndarray | None = None


def _common_files(config_doc: dict, palate_z: float | None) -> dict[str, bytes]:
    files = {
        "config.json": dumps_json(config_doc),
        "tongue.obj": write_obj(tongue_mesh()),
        "mandible.obj": write_obj(mandible_mesh()),
        "maxilla.obj": write_obj(plane_mesh(PALATE_Z + 3.0, extent=((20.0, 45.0), (-15.0, 15.0)))),
    }
    if palate_z is not None:
        files["palate.obj"] = write_obj(plane_mesh(palate_z))
    return files


def scenario_bind(n_frames: int = 20) -> Fixture:
    doc = base_config()
    arm = fixture_rig(doc)
    rv = np.zeros((n_frames, len(arm), 3))
    files = _common_files(doc, PALATE_Z)
    files["ema.csv"] = write_ema_csv(record_ema(arm, rv))
    return Fixture(files, rv)


def scenario_fk_roundtrip(n_frames: int = 500, seed: int = 7) -> Fixture:
    doc = base_config()
    arm = fixture_rig(doc)
    rv = sinusoid_rotvecs(arm, n_frames, seed)
    top = float(skinned_tongue(arm, doc, rv)[..., 2].max())
    if top >= PALATE_Z:
        raise SynthError(f"generated motion reaches the palate (z={top:.3f})")
    files = _common_files(doc, PALATE_Z)
    files["ema.csv"] = write_ema_csv(record_ema(arm, rv))
    return Fixture(files, rv)


def scenario_penetrate(n_frames: int = 30, depth_mm: float = 0.3, peak_frame: int = 10) -> Fixture:
    """Tongue tip lifts to a single peak; the palate sits ``depth_mm`` below the peak.

    IK runs at a tight tolerance so the solved peak reproduces the constructed
    depth to well below a micrometre.
    """
    if not 0 <= peak_frame < n_frames:
        raise SynthError(f"peak frame {peak_frame} outside 0..{n_frames - 1}")
    if not depth_mm > 0:
        raise SynthError("depth must be > 0")
    doc = base_config(ik={"tolerance_mm": 1e-8, "max_iterations": 100})
    arm = fixture_rig(doc)
    tip = arm.index(tongue_bone_id(2))
    ramp = np.clip(1.0 - np.abs(np.arange(n_frames) - peak_frame) / 4.0, 0.0, None)
    rv = np.zeros((n_frames, len(arm), 3))
    # pick the swing sign that lifts the tip
    for sign in (1.0, -1.0):
        rv[:, tip, 1] = sign * 0.35 * ramp
        verts = skinned_tongue(arm, doc, rv)
        if verts[peak_frame, :, 2].max() > verts[0, :, 2].max():
            break
    heights = verts[..., 2].max(axis=1)
    palate_z = float(heights[peak_frame]) - depth_mm
    others = np.delete(heights, peak_frame)
    if others.max() >= palate_z - 1e-3:
        raise SynthError("more than one frame would reach the palate; use a smaller depth")
    files = _common_files(doc, palate_z)
    files["ema.csv"] = write_ema_csv(record_ema(arm, rv))
    files["expected.json"] = dumps_json(
        {"peak_frame": peak_frame, "depth_mm": depth_mm, "palate_z": palate_z, "frames": n_frames}
    )
    return Fixture(files, rv)


def two_link_problem() -> dict:
    """Planar two-bone chain (lengths 1, 1) rooted at the origin along +x."""
    reach = 2.0
    unreachable = [0.0, 3.0, 0.0]
    return {
        "bones": [1.0, 1.0],
        "base": [0.0, 0.0, 0.0],
        "joint_axis": [0.0, 0.0, 1.0],
        "reachable": {"target": [1.0, 1.0, 0.0], "expected_angles_rad": [0.0, math.pi / 2]},
        "unreachable": {
            "target": unreachable,
            "reach_point": (reach * np.asarray(unreachable) / np.linalg.norm(unreachable)).tolist(),
        },
        "ik": {"tolerance_mm": 1e-7, "max_iterations": 50},
    }


def two_link_armature(problem: dict) -> Armature:
    l1, l2 = problem["bones"]
    base = np.asarray(problem["base"], dtype=float)
    return build_tongue_armature([base + [l1, 0.0, 0.0], base + [l1 + l2, 0.0, 0.0]], l1)


def two_link_config(problem: dict, armature: Armature) -> IkConfig:
    """Rotation about z only: x and y components locked."""
    planar = JointLimit((0.0, 0.0, -math.pi), (0.0, 0.0, math.pi))
    return IkConfig(**problem["ik"], joint_limits={b: planar for b in armature.bone_ids})


def solve_two_link(problem: dict, case: str) -> dict:
    """Solve one case; returns joint angles (rad), effector and solver status."""
    arm = two_link_armature(problem)
    target = IkTarget("T2", tongue_bone_id(1), problem[case]["target"])
    res = solve_frame(arm, Pose.bind(arm), [target], two_link_config(problem, arm))
    angles = rotvec_from_quat(res.pose.rotations)[:, 2]
    g = fk_arrays(arm, res.pose.rotations, res.pose.root_translations)
    eff = quat_rotate(g[0][1], [arm.lengths[1], 0.0, 0.0]) + g[1][1]
    return {
        "angles_rad": angles.tolist(),
        "effector": eff.tolist(),
        "residual_mm": res.residual_mm,
        "converged": res.converged,
        "iterations": res.iterations_used,
    }


def scenario_two_link() -> Fixture:
    problem = two_link_problem()
    arm = two_link_armature(problem)
    targets = np.array([problem["reachable"]["target"], problem["unreachable"]["target"]], dtype=float)[:, None, :]
    traj = EmaTrajectory(("T2",), RATE_HZ, targets, np.broadcast_to(BONE_AXIS, targets.shape), np.zeros((2, 1)),
                         np.ones((2, 1), bool))
    files = {
        "problem.json": dumps_json(problem),
        "armature.json": dumps_json(armature_to_dict(arm)),
        "targets.csv": write_ema_csv(traj),
    }
    return Fixture(files)


def generate(scenario: str, frames: int | None = None, seed: int = 7, **options) -> Fixture:
    if scenario == "bind":
        return scenario_bind(frames or 20)
    if scenario == "fk-roundtrip":
        return scenario_fk_roundtrip(frames or 500, seed)
    if scenario == "penetrate":
        return scenario_penetrate(frames or 30, **options)
    if scenario == "two-link":
        return scenario_two_link()
    raise SynthError(f"unknown scenario {scenario!r}; choose from {', '.join(SCENARIOS)}")


def write_fixture(fixture: Fixture, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, data in sorted(fixture.files.items()):
        (out / name).write_bytes(data)
        written.append(out / name)
    return written


def load_json(path) -> dict:
    return json.loads(Path(path).read_bytes())
