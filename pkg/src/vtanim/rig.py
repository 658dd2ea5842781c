"""Pseudo-skeletal armatures, forward kinematics and linear blend skinning.

Bone-local frames put the bone along local +x: the head is the local
origin and the tail sits at ``(length, 0, 0)``. A bone's global transform is
``global(parent) ∘ rest_local ∘ pose_local``; roots additionally get the
pose's root translation applied in the parent (world) frame.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from vtanim.mesh import TriMesh
from vtanim.transforms import (
    IDENTITY_QUAT,
    RigidTransform,
    quat_conj,
    quat_mul,
    quat_normalize,
    quat_rotate,
    quat_to_matrix,
    rotation_between,
)

BONE_AXIS = np.array([1.0, 0.0, 0.0])
MAX_INFLUENCES = 4
FAR_SIGMAS = 6.0


class RigError(ValueError):
    pass


@dataclass(frozen=True)
class Bone:
    id: str
    parent: str | None
    rest_local: RigidTransform
    length: float

    def __post_init__(self) -> None:
        if not self.id:
            raise RigError("bone id must be non-empty")
        if not self.length > 0:
            raise RigError(f"bone {self.id!r} length must be > 0")
        object.__setattr__(self, "length", float(self.length))


@dataclass(frozen=True)
class Armature:
    bones: tuple[Bone, ...]

    def __post_init__(self) -> None:
        bones = tuple(self.bones)
        object.__setattr__(self, "bones", bones)
        seen: dict[str, int] = {}
        for i, b in enumerate(bones):
            if b.id in seen:
                raise RigError(f"duplicate bone id {b.id!r}")
            if b.parent is not None and b.parent not in seen:
                raise RigError(f"bone {b.id!r} parent {b.parent!r} must appear earlier")
            seen[b.id] = i
        object.__setattr__(self, "_index", seen)
        object.__setattr__(self, "_parents", np.array([-1 if b.parent is None else seen[b.parent] for b in bones]))
        object.__setattr__(self, "_rest_q", np.array([b.rest_local.rotation for b in bones]).reshape(-1, 4))
        object.__setattr__(self, "_rest_t", np.array([b.rest_local.translation for b in bones]).reshape(-1, 3))
        object.__setattr__(self, "_lengths", np.array([b.length for b in bones]))

    def __len__(self) -> int:
        return len(self.bones)

    def index(self, bone_id: str) -> int:
        try:
            return self._index[bone_id]
        except KeyError:
            raise RigError(f"unknown bone {bone_id!r}") from None

    @property
    def bone_ids(self) -> tuple[str, ...]:
        return tuple(b.id for b in self.bones)

    @property
    def roots(self) -> tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self._parents < 0))

    @property
    def parents(self) -> np.ndarray:
        return self._parents

    @property
    def lengths(self) -> np.ndarray:
        return self._lengths

    def descendants(self, i: int) -> list[int]:
        out = [i]
        for j in range(i + 1, len(self.bones)):
            if self._parents[j] in out:
                out.append(j)
        return out


def armature_to_dict(armature: Armature) -> dict:
    return {
        "bones": [
            {"id": b.id, "parent": b.parent, "length": b.length, "rest": b.rest_local.to_dict()}
            for b in armature.bones
        ]
    }


def armature_from_dict(data: dict) -> Armature:
    try:
        return Armature(
            tuple(
                Bone(b["id"], b.get("parent"), RigidTransform.from_dict(b["rest"]), b["length"])
                for b in data["bones"]
            )
        )
    except (KeyError, TypeError) as exc:
        raise RigError(f"malformed armature document: {exc}") from None


def merge_armatures(*armatures: Armature) -> Armature:
    """Concatenate armatures into one forest; bone ids must not clash."""
    return Armature(tuple(b for a in armatures for b in a.bones))


@dataclass(frozen=True, eq=False)
class Pose:
    """Per-bone local rotations (unit quaternions) and per-root translations."""

    rotations: np.ndarray
    root_translations: np.ndarray

    def __post_init__(self) -> None:
        r = np.array(self.rotations, dtype=float).reshape(-1, 4)
        t = np.array(self.root_translations, dtype=float).reshape(-1, 3)
        if not np.allclose(np.linalg.norm(r, axis=1), 1.0, atol=1e-9, rtol=0):
            raise RigError("pose rotations must be unit quaternions")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotations", r)
        object.__setattr__(self, "root_translations", t)

    @classmethod
    def bind(cls, armature: Armature) -> Pose:
        return cls(np.tile(IDENTITY_QUAT, (len(armature), 1)), np.zeros((len(armature.roots), 3)))

    def matches(self, armature: Armature) -> bool:
        return len(self.rotations) == len(armature) and len(self.root_translations) == len(armature.roots)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotations, other.rotations) and np.array_equal(
            self.root_translations, other.root_translations
        )


@dataclass(frozen=True)
class GlobalTransforms:
    """Bone-to-world transforms: ``rotations`` (..., B, 4), ``translations`` (..., B, 3)."""

    rotations: np.ndarray
    translations: np.ndarray

    def transform(self, i: int) -> RigidTransform:
        return RigidTransform(self.rotations[i], self.translations[i])

    def heads(self) -> np.ndarray:
        return self.translations

    def points(self, bone_indices, local_points) -> np.ndarray:
        """World positions of bone-local points."""
        q = self.rotations[..., bone_indices, :]
        t = self.translations[..., bone_indices, :]
        return quat_rotate(q, local_points) + t


def fk_arrays(armature: Armature, rotations: np.ndarray, root_translations: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched FK: leading axes of ``rotations``/``root_translations`` broadcast."""
    rotations = np.asarray(rotations, dtype=float)
    root_translations = np.asarray(root_translations, dtype=float)
    lead = rotations.shape[:-2]
    n = len(armature)
    gq = np.empty(lead + (n, 4))
    gt = np.empty(lead + (n, 3))
    root_slot = 0
    for i in range(n):
        local = quat_mul(armature._rest_q[i], rotations[..., i, :])
        p = armature._parents[i]
        if p < 0:
            gq[..., i, :] = quat_normalize(local)
            gt[..., i, :] = armature._rest_t[i] + root_translations[..., root_slot, :]
            root_slot += 1
        else:
            gq[..., i, :] = quat_normalize(quat_mul(gq[..., p, :], local))
            gt[..., i, :] = gt[..., p, :] + quat_rotate(gq[..., p, :], armature._rest_t[i])
    return gq, gt


def forward_kinematics(armature: Armature, pose: Pose) -> GlobalTransforms:
    if not pose.matches(armature):
        raise RigError(
            f"pose has {len(pose.rotations)} rotations/{len(pose.root_translations)} roots, "
            f"armature has {len(armature)} bones/{len(armature.roots)} roots"
        )
    q, t = fk_arrays(armature, pose.rotations, pose.root_translations)
    return GlobalTransforms(q, t)


def bind_globals(armature: Armature) -> GlobalTransforms:
    return forward_kinematics(armature, Pose.bind(armature))


def bone_segments(armature: Armature, globals_: GlobalTransforms) -> tuple[np.ndarray, np.ndarray]:
    heads = globals_.translations
    tails = heads + quat_rotate(globals_.rotations, BONE_AXIS * armature.lengths[:, None])
    return heads, tails


# --- armature construction -----------------------------------------------------------


def _chain(ids: Sequence[str], points: np.ndarray, parent: str | None = None,
           parent_rotation: np.ndarray | None = None, parent_length: float = 0.0) -> list[Bone]:
    """Serial chain of bones through consecutive ``points``."""
    bones = []
    prev_q = IDENTITY_QUAT if parent_rotation is None else parent_rotation
    for k, bone_id in enumerate(ids):
        head, tail = points[k], points[k + 1]
        seg = tail - head
        length = float(np.linalg.norm(seg))
        if length < 1e-6:
            raise RigError(f"bone {bone_id!r}: coincident points {head.tolist()} and {tail.tolist()}")
        local_dir = quat_rotate(quat_conj(prev_q), seg / length)
        q_local = rotation_between(BONE_AXIS, local_dir)
        if parent is None:
            rest = RigidTransform(q_local, head)
        else:
            rest = RigidTransform(q_local, [parent_length, 0.0, 0.0])
        bones.append(Bone(bone_id, parent, rest, length))
        prev_q = quat_normalize(quat_mul(prev_q, q_local))
        parent, parent_length = bone_id, length
    return bones


def tongue_bone_id(chain_index: int, prefix: str = "tongue") -> str:
    return f"{prefix}.{chain_index}"


def build_tongue_armature(coil_bind_positions, root_offset_mm: float, prefix: str = "tongue") -> Armature:
    """Serial chain through tongue coils ordered rear to front.

    Bone ``{prefix}.0`` is the root: it starts ``root_offset_mm`` behind the
    rearmost coil and ends at it. Bone ``{prefix}.i`` ends at coil ``i``.
    """
    coils = np.asarray(coil_bind_positions, dtype=float).reshape(-1, 3)
    if len(coils) < 2:
        raise RigError(f"tongue chain needs >= 2 coils, got {len(coils)}")
    if not root_offset_mm > 0:
        raise RigError("root offset must be > 0")
    gaps = np.linalg.norm(np.diff(coils, axis=0), axis=1)
    if np.any(gaps < 1e-6):
        k = int(np.argmax(gaps < 1e-6))
        raise RigError(f"tongue coils {k} and {k + 1} coincide")
    forward = (coils[1] - coils[0]) / gaps[0]
    points = np.vstack([coils[0] - root_offset_mm * forward, coils])
    ids = [tongue_bone_id(i, prefix) for i in range(len(coils))]
    return Armature(tuple(_chain(ids, points)))


def build_jaw_armature(jaw_coil_bind, hinge_point, bone_id: str = "jaw") -> Armature:
    """One rigid bone from the hinge (condyle landmark) to the jaw coil."""
    hinge = np.asarray(hinge_point, dtype=float)
    coil = np.asarray(jaw_coil_bind, dtype=float)
    if np.linalg.norm(coil - hinge) < 1e-6:
        raise RigError("jaw coil and hinge point coincide")
    return Armature(tuple(_chain([bone_id], np.vstack([hinge, coil]))))


# --- skinning ------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SkinWeights:
    """Up to four (bone, weight) influences per vertex.

    ``indices`` index into ``bone_ids`` and are -1 in unused slots, whose
    weights are 0.
    """

    bone_ids: tuple[str, ...]
    indices: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        idx = np.array(self.indices, dtype=np.int32).reshape(-1, MAX_INFLUENCES)
        w = np.array(self.weights, dtype=np.float64).reshape(-1, MAX_INFLUENCES)
        if idx.shape != w.shape:
            raise RigError("indices/weights shape mismatch")
        if np.any(idx >= len(self.bone_ids)) or np.any(idx < -1):
            raise RigError("skin weight references an unknown bone")
        if np.any(w < 0) or np.any((idx < 0) & (w != 0)):
            raise RigError("invalid skin weights")
        if len(w) and not np.allclose(w.sum(axis=1), 1.0, atol=1e-6, rtol=0):
            raise RigError("skin weights must sum to 1 per vertex")
        idx.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "bone_ids", tuple(self.bone_ids))
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "weights", w)

    @property
    def n_vertices(self) -> int:
        return len(self.indices)

    def influences(self, vertex: int) -> list[tuple[str, float]]:
        return [
            (self.bone_ids[i], float(w))
            for i, w in zip(self.indices[vertex], self.weights[vertex])
            if i >= 0
        ]

    @classmethod
    def rigid(cls, n_vertices: int, bone_ids: Sequence[str], bone: str) -> SkinWeights:
        bone_ids = tuple(bone_ids)
        idx = np.full((n_vertices, MAX_INFLUENCES), -1, dtype=np.int32)
        idx[:, 0] = bone_ids.index(bone)
        w = np.zeros((n_vertices, MAX_INFLUENCES))
        w[:, 0] = 1.0
        return cls(bone_ids, idx, w)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SkinWeights):
            return NotImplemented
        return (
            self.bone_ids == other.bone_ids
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.weights, other.weights)
        )


def point_segment_distance(points: np.ndarray, heads: np.ndarray, tails: np.ndarray) -> np.ndarray:
    """Distances (P, S) from each point to each segment."""
    p = points[:, None, :]
    d = tails - heads
    t = np.einsum("psk,sk->ps", p - heads, d) / np.einsum("sk,sk->s", d, d)
    t = np.clip(t, 0.0, 1.0)
    nearest = heads + t[..., None] * d
    return np.linalg.norm(p - nearest, axis=-1)


def compute_skin_weights(
    mesh: TriMesh, armature: Armature, falloff_sigma_mm: float, bones: Sequence[str] | None = None
) -> SkinWeights:
    """Gaussian falloff on vertex-to-bone-segment distance, top four kept.

    ``bones`` restricts the candidate influences (default: every bone).
    Vertices farther than six sigma from every candidate bind fully to the
    nearest one.
    """
    if not falloff_sigma_mm > 0:
        raise RigError("falloff sigma must be > 0")
    if mesh.n_vertices == 0:
        raise RigError("cannot weight an empty mesh")
    cand = np.arange(len(armature)) if bones is None else np.array([armature.index(b) for b in bones])
    heads, tails = bone_segments(armature, bind_globals(armature))
    d = point_segment_distance(mesh.vertices, heads[cand], tails[cand])
    raw = np.exp(-(d * d) / (2.0 * falloff_sigma_mm**2))
    k = min(MAX_INFLUENCES, len(cand))
    top = np.argsort(-raw, axis=1, kind="stable")[:, :k]
    w_top = np.take_along_axis(raw, top, axis=1)
    far = d.min(axis=1) > FAR_SIGMAS * falloff_sigma_mm
    if np.any(far):
        nearest = np.argmin(d[far], axis=1)
        top[far] = 0
        top[far, 0] = nearest
        w_top[far] = 0.0
        w_top[far, 0] = 1.0
    w_top = w_top / w_top.sum(axis=1, keepdims=True)
    idx = np.full((mesh.n_vertices, MAX_INFLUENCES), -1, dtype=np.int32)
    w = np.zeros((mesh.n_vertices, MAX_INFLUENCES))
    idx[:, :k] = cand[top]
    w[:, :k] = w_top
    unused = w == 0.0
    idx[unused] = -1
    return SkinWeights(armature.bone_ids, idx, w)


def skinning_matrices(bind: GlobalTransforms, posed: GlobalTransforms) -> np.ndarray:
    """Per-bone 3x4 matrices ``posed ∘ bind⁻¹``."""
    dq = quat_mul(posed.rotations, quat_conj(bind.rotations))
    r = quat_to_matrix(dq)
    t = posed.translations - np.einsum("bij,bj->bi", r, bind.translations)
    return np.concatenate([r, t[..., None]], axis=-1)


def skin_vertices(vertices: np.ndarray, weights: SkinWeights, mats: np.ndarray) -> np.ndarray:
    idx = np.where(weights.indices < 0, 0, weights.indices)
    m = mats[idx]  # (V, 4, 3, 4)
    moved = np.einsum("vkij,vj->vki", m[..., :3], vertices) + m[..., 3]
    return np.einsum("vk,vki->vi", weights.weights, moved)


def skin(mesh: TriMesh, weights: SkinWeights, bind: GlobalTransforms, posed: GlobalTransforms) -> TriMesh:
    if weights.n_vertices != mesh.n_vertices:
        raise RigError(f"weights cover {weights.n_vertices} vertices, mesh has {mesh.n_vertices}")
    if bind.rotations.shape != posed.rotations.shape or len(bind.rotations) != len(weights.bone_ids):
        raise RigError("bind/posed transforms do not match the weights' armature")
    return mesh.with_vertices(skin_vertices(mesh.vertices, weights, skinning_matrices(bind, posed)))


# --- rigid fitting -------------------------------------------------------------------


@dataclass(frozen=True)
class RigidFit:
    transform: RigidTransform
    residual_rms: float


def fit_rigid(bind_points, observed_points) -> RigidFit:
    """Least-squares proper rotation and translation mapping bind onto observed."""
    p = np.asarray(bind_points, dtype=float).reshape(-1, 3)
    q = np.asarray(observed_points, dtype=float).reshape(-1, 3)
    if p.shape != q.shape:
        raise RigError("point sets differ in size")
    if len(p) < 3:
        raise RigError("rigid fit needs >= 3 correspondences")
    pc, qc = p.mean(axis=0), q.mean(axis=0)
    h = (p - pc).T @ (q - qc)
    spread = np.linalg.svd(p - pc, compute_uv=False)
    # planar sets are fine; a rank < 2 spread (collinear) is not
    if spread[1] < 1e-9:
        raise RigError("degenerate correspondences (collinear or coincident points)")
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = qc - r @ pc
    resid = q - (p @ r.T + t)
    return RigidFit(RigidTransform.from_matrix(r, t), float(np.sqrt(np.mean(np.sum(resid**2, axis=1)))))
