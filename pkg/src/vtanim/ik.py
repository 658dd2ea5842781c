"""Damped least-squares inverse kinematics driven by EMA coil targets.

Each bone contributes up to three exponential-map rotation parameters. The
Jacobian of the weighted effector positions is taken by central finite
differences, and updates follow ``dθ = Jᵀ(JJᵀ + λ²I)⁻¹ r``. Steps larger
than the per-joint clamp are re-solved with stronger damping, joint limits are
hard, and the step is halved whenever the worst effector error would grow.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from vtanim.ema import Articulator, CoilRole, EmaTrajectory
from vtanim.rig import (
    BONE_AXIS,
    Armature,
    Pose,
    RigError,
    fk_arrays,
    forward_kinematics,
    tongue_bone_id,
)
from vtanim.transforms import RigidTransform, quat_from_rotvec, quat_rotate, rotvec_from_quat

FD_STEP_RAD = 1e-5
MIN_IMPROVEMENT_MM = 1e-9
MAX_HALVINGS = 8
MAX_DAMPING_RAISES = 30


class IkError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class IkTarget:
    """A coil target bound to a point on a bone.

    The effector sits at the bone tail plus ``offset`` (bone-local, mm).
    A non-finite ``target_position`` marks a missing sample.
    """

    coil_id: str
    bone_id: str
    target_position: np.ndarray
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    target_orientation: np.ndarray | None = None
    position_weight: float = 1.0
    orientation_weight: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "target_position", np.asarray(self.target_position, dtype=float).reshape(3))
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=float).reshape(3))
        if self.target_orientation is not None:
            object.__setattr__(
                self, "target_orientation", np.asarray(self.target_orientation, dtype=float).reshape(3)
            )
        if self.position_weight < 0 or self.orientation_weight < 0:
            raise IkError("target weights must be >= 0")
        if self.position_weight == 0 and self.orientation_weight == 0:
            raise IkError(f"target {self.coil_id!r} has both weights zero")

    @property
    def binding(self) -> tuple[str, str, tuple[float, ...]]:
        return (self.coil_id, self.bone_id, tuple(self.offset.tolist()))

    @property
    def has_orientation(self) -> bool:
        return self.target_orientation is not None and self.orientation_weight > 0


@dataclass(frozen=True)
class JointLimit:
    """Bounds on a bone's exponential-map components (radians).

    ``lower[k] == upper[k]`` locks axis ``k``; ``max_swing`` bounds the total
    rotation angle from bind.
    """

    lower: tuple[float, float, float] = (-math.pi, -math.pi, -math.pi)
    upper: tuple[float, float, float] = (math.pi, math.pi, math.pi)
    max_swing: float | None = None

    def __post_init__(self) -> None:
        lo = tuple(float(x) for x in self.lower)
        hi = tuple(float(x) for x in self.upper)
        if len(lo) != 3 or len(hi) != 3 or any(a > b for a, b in zip(lo, hi)):
            raise IkError(f"invalid joint limit {lo} .. {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def swing_only(cls, max_swing: float | None = None) -> JointLimit:
        """Lock twist about the bone axis (local x)."""
        return cls((0.0, -math.pi, -math.pi), (0.0, math.pi, math.pi), max_swing)

    def to_dict(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper), "max_swing": self.max_swing}

    @classmethod
    def from_dict(cls, data: Mapping) -> JointLimit:
        return cls(
            tuple(data.get("lower", (-math.pi,) * 3)),
            tuple(data.get("upper", (math.pi,) * 3)),
            data.get("max_swing"),
        )


@dataclass(frozen=True)
class IkConfig:
    max_iterations: int = 50
    tolerance_mm: float = 0.01
    damping_lambda: float = 0.1
    step_clamp_rad: float = 0.2
    joint_limits: Mapping[str, JointLimit] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise IkError("max_iterations must be >= 1")
        if not self.tolerance_mm > 0 or not self.damping_lambda > 0 or not self.step_clamp_rad > 0:
            raise IkError("tolerance, damping and step clamp must be > 0")

    def to_dict(self) -> dict:
        return {
            "max_iterations": self.max_iterations,
            "tolerance_mm": self.tolerance_mm,
            "damping_lambda": self.damping_lambda,
            "step_clamp_rad": self.step_clamp_rad,
            "joint_limits": {k: v.to_dict() for k, v in sorted(self.joint_limits.items())},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> IkConfig:
        data = dict(data)
        limits = {k: JointLimit.from_dict(v) for k, v in data.pop("joint_limits", {}).items()}
        return cls(joint_limits=limits, **data)


@dataclass(frozen=True, eq=False)
class SolveResult:
    pose: Pose
    residual_mm: float
    iterations_used: int
    converged: bool


_CLIP_DTYPES = {
    "rotations": np.float64,
    "root_translations": np.float64,
    "residuals_mm": np.float64,
    "iterations": np.int32,
    "converged": np.bool_,
    "held": np.bool_,
}


@dataclass(frozen=True, eq=False)
class AnimationClip:
    """Solved pose sequence with per-frame solver diagnostics."""

    frame_rate_hz: float
    rotations: np.ndarray  # (F, B, 4)
    root_translations: np.ndarray  # (F, R, 3)
    residuals_mm: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    held: np.ndarray

    def __post_init__(self) -> None:
        if not self.frame_rate_hz > 0:
            raise IkError("frame rate must be > 0")
        object.__setattr__(self, "frame_rate_hz", float(self.frame_rate_hz))
        for name, dtype in _CLIP_DTYPES.items():
            a = np.array(getattr(self, name), dtype=dtype)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if self.rotations.ndim != 3 or self.rotations.shape[-1] != 4 or self.root_translations.ndim != 3:
            raise IkError("clip rotations must be (F, B, 4) and root translations (F, R, 3)")
        n = len(self.rotations)
        for name in ("root_translations", "residuals_mm", "iterations", "converged", "held"):
            if len(getattr(self, name)) != n:
                raise IkError(f"clip field {name} does not cover {n} frames")

    @property
    def n_frames(self) -> int:
        return len(self.rotations)

    def pose(self, frame: int) -> Pose:
        return Pose(self.rotations[frame], self.root_translations[frame])

    @property
    def poses(self) -> list[Pose]:
        return [self.pose(f) for f in range(self.n_frames)]

    def matches(self, armature: Armature) -> bool:
        return self.rotations.shape[1:] == (len(armature), 4) and self.root_translations.shape[1:] == (
            len(armature.roots),
            3,
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AnimationClip):
            return NotImplemented
        return self.frame_rate_hz == other.frame_rate_hz and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            and getattr(self, k).dtype == getattr(other, k).dtype
            for k in ("rotations", "root_translations", "residuals_mm", "iterations", "converged", "held")
        )


class _Problem:
    """Precomputed arrays for one target topology on one armature."""

    def __init__(self, armature: Armature, targets: Sequence[IkTarget], config: IkConfig):
        if not targets:
            raise IkError("no IK targets")
        self.armature = armature
        self.config = config
        self.bones = np.array([armature.index(t.bone_id) for t in targets])
        self.local = np.array([(armature.lengths[b], 0.0, 0.0) for b in self.bones]) + np.array(
            [t.offset for t in targets]
        )
        self.targets = np.array([t.target_position for t in targets])
        if not np.isfinite(self.targets).all():
            raise IkError("target positions must be finite")
        self.w_pos = np.array([t.position_weight for t in targets])
        self.orient = [i for i, t in enumerate(targets) if t.has_orientation]
        self.orient_targets = np.array([targets[i].target_orientation for i in self.orient]).reshape(-1, 3)
        self.w_ori = np.array([targets[i].orientation_weight for i in self.orient])
        self.pos_rows = self.w_pos > 0

        n = len(armature)
        lo = np.full((n, 3), -math.pi)
        hi = np.full((n, 3), math.pi)
        self.max_swing = np.full(n, np.inf)
        for bone_id, lim in config.joint_limits.items():
            if bone_id not in armature._index:
                continue
            b = armature.index(bone_id)
            lo[b], hi[b] = lim.lower, lim.upper
            if lim.max_swing is not None:
                self.max_swing[b] = lim.max_swing
        self.lo, self.hi = lo, hi
        # only ancestors of effector bones can move an effector
        relevant = set()
        for b in set(self.bones.tolist()):
            while b >= 0:
                relevant.add(b)
                b = int(armature.parents[b])
        self.free = [(b, k) for b in sorted(relevant) for k in range(3) if lo[b, k] < hi[b, k]]

    def clamp(self, theta: np.ndarray) -> np.ndarray:
        theta = np.clip(theta, self.lo, self.hi)
        ang = np.linalg.norm(theta, axis=-1)
        over = ang > self.max_swing
        if np.any(over):
            theta = theta.copy()
            theta[over] *= (self.max_swing[over] / ang[over])[:, None]
            theta = np.clip(theta, self.lo, self.hi)
        return theta

    def features(self, theta: np.ndarray, root_t: np.ndarray) -> np.ndarray:
        """Weighted effector positions and axes, shape (..., rows)."""
        q = quat_from_rotvec(theta)
        gq, gt = fk_arrays(self.armature, q, root_t)
        pos = quat_rotate(gq[..., self.bones, :], self.local) + gt[..., self.bones, :]
        parts = [(pos * self.w_pos[:, None]).reshape(pos.shape[:-2] + (-1,))]
        if self.orient:
            axes = quat_rotate(gq[..., self.bones[self.orient], :], BONE_AXIS)
            parts.append((axes * self.w_ori[:, None]).reshape(axes.shape[:-2] + (-1,)))
        return np.concatenate(parts, axis=-1)

    def target_features(self) -> np.ndarray:
        parts = [(self.targets * self.w_pos[:, None]).ravel()]
        if self.orient:
            parts.append((self.orient_targets * self.w_ori[:, None]).ravel())
        return np.concatenate(parts)

    def errors(self, feats: np.ndarray, target: np.ndarray) -> tuple[float, float]:
        """(objective, residual_mm): worst weighted error and worst position error."""
        diff = (target - feats)
        n_pos = 3 * len(self.bones)
        per_pos = np.linalg.norm(diff[:n_pos].reshape(-1, 3), axis=1)
        objective = float(per_pos.max())
        if self.orient:
            objective = max(objective, float(np.linalg.norm(diff[n_pos:].reshape(-1, 3), axis=1).max()))
        raw = per_pos[self.pos_rows] / self.w_pos[self.pos_rows]
        return objective, float(raw.max()) if len(raw) else 0.0


def solve_frame(armature: Armature, seed_pose: Pose, targets: Sequence[IkTarget], config: IkConfig) -> SolveResult:
    if not seed_pose.matches(armature):
        raise IkError("seed pose does not match armature")
    prob = _Problem(armature, targets, config)
    root_t = np.asarray(seed_pose.root_translations)
    theta0 = rotvec_from_quat(seed_pose.rotations)
    theta = prob.clamp(theta0)
    clamped = not np.array_equal(theta, theta0)
    goal = prob.target_features()
    objective, residual = prob.errors(prob.features(theta, root_t), goal)
    if residual <= config.tolerance_mm and not clamped:
        return SolveResult(seed_pose, residual, 0, True)

    free_b = np.array([b for b, _ in prob.free], dtype=int)
    free_k = np.array([k for _, k in prob.free], dtype=int)
    n_free = len(prob.free)
    h = FD_STEP_RAD
    lam2 = config.damping_lambda**2
    iterations = 0
    while residual > config.tolerance_mm and iterations < config.max_iterations and n_free:
        iterations += 1
        probes = np.repeat(theta[None], 2 * n_free, axis=0)
        j = np.arange(n_free)
        probes[2 * j, free_b, free_k] += h
        probes[2 * j + 1, free_b, free_k] -= h
        f = prob.features(probes, root_t)
        jac = ((f[0::2] - f[1::2]) / (2.0 * h)).T  # (rows, n_free)
        r = goal - prob.features(theta, root_t)
        jjt = jac @ jac.T
        eye = np.eye(len(r))
        # the clamp acts as a trust region: raise damping until the step fits,
        # so one near-singular joint cannot starve the others
        damp = lam2
        for _ in range(MAX_DAMPING_RAISES + 1):
            step = jac.T @ np.linalg.solve(jjt + damp * eye, r)
            full = np.zeros_like(theta)
            full[free_b, free_k] = step
            worst = float(np.linalg.norm(full, axis=1).max())
            if worst <= config.step_clamp_rad:
                break
            damp *= 4.0
        # uniform scaling keeps the direction (independent clamps can turn it uphill)
        if worst > config.step_clamp_rad:
            full *= config.step_clamp_rad / worst

        # halve on increase; once improving, keep halving while it still helps
        best = None
        scale = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = prob.clamp(theta + scale * full)
            cand_obj, cand_res = prob.errors(prob.features(cand, root_t), goal)
            if cand_obj < objective and (best is None or cand_obj < best[1]):
                best = (cand, cand_obj, cand_res)
            elif best is not None:
                break
            scale *= 0.5
        if best is None:
            break
        improvement = objective - best[1]
        theta, objective, residual = best
        if improvement < MIN_IMPROVEMENT_MM:
            break

    pose = Pose(quat_from_rotvec(theta), root_t)
    return SolveResult(pose, residual, iterations, residual <= config.tolerance_mm)


def _fill_missing(frames: Sequence[Sequence[IkTarget]]) -> tuple[list[list[IkTarget]], np.ndarray]:
    """Hold the last valid target for missing samples; flag affected frames.

    A coil missing from the first frames takes its first later valid value.
    """
    n_targets = len(frames[0])
    held = np.zeros(len(frames), dtype=bool)
    out = [list(fr) for fr in frames]
    for k in range(n_targets):
        ok = [bool(np.isfinite(fr[k].target_position).all()) for fr in frames]
        if not any(ok):
            raise IkError(f"coil {frames[0][k].coil_id!r} has no valid sample")
        last = next(i for i, v in enumerate(ok) if v)
        for f in range(len(frames)):
            if ok[f]:
                last = f
                continue
            src = frames[last][k]
            t = frames[f][k]
            ori = src.target_orientation if t.target_orientation is not None else None
            out[f][k] = IkTarget(
                t.coil_id, t.bone_id, src.target_position, t.offset, ori, t.position_weight, t.orientation_weight
            )
            held[f] = True
    return out, held


def solve_sequence(
    armature: Armature,
    frames: Sequence[Sequence[IkTarget]],
    config: IkConfig,
    frame_rate_hz: float = 200.0,
    warm_start: bool = True,
) -> AnimationClip:
    """Solve every frame, seeding each from the previous solution."""
    if not frames:
        raise IkError("empty target sequence")
    topology = [t.binding for t in frames[0]]
    for f, fr in enumerate(frames):
        if [t.binding for t in fr] != topology:
            raise IkError(f"frame {f} target topology differs from frame 0")
    frames, held = _fill_missing(frames)
    bind = Pose.bind(armature)
    seed = bind
    n = len(frames)
    rot = np.empty((n, len(armature), 4))
    root = np.empty((n, len(armature.roots), 3))
    res = np.empty(n)
    its = np.empty(n, dtype=np.int32)
    conv = np.empty(n, dtype=bool)
    for f, targets in enumerate(frames):
        out = solve_frame(armature, seed, targets, config)
        rot[f] = out.pose.rotations
        root[f] = out.pose.root_translations
        res[f] = out.residual_mm
        its[f] = out.iterations_used
        conv[f] = out.converged
        seed = out.pose if warm_start else bind
    return AnimationClip(frame_rate_hz, rot, root, res, its, conv, held)


def attach_targets(
    armature: Armature,
    coil_roles: Sequence[CoilRole],
    traj: EmaTrajectory,
    registration: RigidTransform = RigidTransform(),
    *,
    position_weight: float = 1.0,
    orientation_weight: float = 0.0,
    tongue_prefix: str = "tongue",
    jaw_bone: str = "jaw",
) -> list[list[IkTarget]]:
    """Per-frame targets from registered coil samples.

    Tongue coil ``i`` drives the tail of chain bone ``i`` and the jaw coil
    drives the jaw bone tail. Reference and other coils produce no target.
    Missing samples become non-finite targets (held by :func:`solve_sequence`).
    """
    bindings = []
    for role in coil_roles:
        if role.articulator is Articulator.TONGUE:
            bone = tongue_bone_id(role.chain_index, tongue_prefix)
        elif role.articulator is Articulator.JAW:
            bone = jaw_bone
        else:
            continue
        if role.coil_id not in traj.coil_ids:
            raise IkError(f"coil {role.coil_id!r} is rigged but missing from the trajectory")
        try:
            armature.index(bone)
        except RigError:
            raise IkError(f"coil {role.coil_id!r} maps to unrigged bone {bone!r}") from None
        bindings.append((role.coil_id, bone, traj.coil_index(role.coil_id)))
    if not bindings:
        raise IkError("no tongue or jaw coils in the role map")
    pos = registration.apply(traj.positions)
    ori = registration.apply_vector(traj.orientations)
    pos = np.where(traj.valid[..., None], pos, np.nan)
    frames = []
    for f in range(traj.n_frames):
        row = []
        for coil_id, bone, c in bindings:
            use_ori = orientation_weight > 0 and traj.valid[f, c]
            row.append(
                IkTarget(
                    coil_id,
                    bone,
                    pos[f, c],
                    target_orientation=ori[f, c] if use_ori else None,
                    position_weight=position_weight,
                    orientation_weight=orientation_weight,
                )
            )
        frames.append(row)
    return frames


def effector_trajectories(armature: Armature, clip: AnimationClip, topology: Sequence[IkTarget]) -> tuple[np.ndarray, np.ndarray]:
    """FK effector positions and bone axes per frame: (F, E, 3) each."""
    if not clip.matches(armature):
        raise IkError("clip does not match armature")
    bones = np.array([armature.index(t.bone_id) for t in topology])
    local = np.array([(armature.lengths[b], 0.0, 0.0) for b in bones]) + np.array([t.offset for t in topology])
    gq, gt = fk_arrays(armature, clip.rotations, clip.root_translations)
    pos = quat_rotate(gq[:, bones], local) + gt[:, bones]
    axes = quat_rotate(gq[:, bones], BONE_AXIS)
    return pos, axes


def dump_targets(
    armature: Armature, clip: AnimationClip, topology: Sequence[IkTarget], rate_hz: float | None = None
) -> EmaTrajectory:
    """Effector positions and bone axes as an articulograph-style trajectory.

    The rms channel carries each frame's solver residual.
    """
    pos, axes = effector_trajectories(armature, clip, topology)
    rms = np.repeat(clip.residuals_mm[:, None], len(topology), axis=1)
    return EmaTrajectory(
        tuple(t.coil_id for t in topology),
        clip.frame_rate_hz if rate_hz is None else rate_hz,
        pos,
        axes,
        rms,
        np.ones(rms.shape, dtype=bool),
    )


def pose_effectors(armature: Armature, pose: Pose, topology: Sequence[IkTarget]) -> np.ndarray:
    g = forward_kinematics(armature, pose)
    bones = [armature.index(t.bone_id) for t in topology]
    return np.array(
        [g.points(b, np.array([armature.lengths[b], 0.0, 0.0]) + t.offset) for b, t in zip(bones, topology)]
    )
