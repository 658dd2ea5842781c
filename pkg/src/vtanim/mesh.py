"""Triangle meshes, OBJ I/O and exact point-to-surface queries."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.stats import qmc

from vtanim import kernels

MIN_TRIANGLE_AREA = 1e-12
LEAF_SIZE = 4


class MeshError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class Side(str, Enum):
    FRONT = "front"
    BACK = "back"


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    v = vertices[triangles]
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Indexed triangle surface in millimetres with counter-clockwise winding."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self) -> None:
        v = _frozen(self.vertices, np.float64).reshape(-1, 3)
        t = _frozen(self.triangles, np.int64).reshape(-1, 3)
        if not np.isfinite(v).all():
            raise MeshError("vertex coordinates must be finite")
        if len(t):
            if t.min() < 0 or t.max() >= len(v):
                raise MeshError("triangle index out of range")
            if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
                raise MeshError("triangle repeats a vertex index")
            small = np.flatnonzero(triangle_areas(v, t) < MIN_TRIANGLE_AREA)
            if len(small):
                raise MeshError(f"degenerate triangle {int(small[0])} (area < {MIN_TRIANGLE_AREA})")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def normals(self) -> np.ndarray:
        return face_normals(self.vertices, self.triangles)

    def with_vertices(self, vertices: np.ndarray) -> TriMesh:
        """Same topology, new positions; skips the degeneracy check."""
        out = object.__new__(TriMesh)
        object.__setattr__(out, "vertices", _frozen(vertices, np.float64).reshape(-1, 3))
        object.__setattr__(out, "triangles", self.triangles)
        if out.vertices.shape != self.vertices.shape:
            raise MeshError("vertex count changed")
        return out

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TriMesh):
            return NotImplemented
        return np.array_equal(self.vertices, other.vertices) and np.array_equal(
            self.triangles, other.triangles
        )


def face_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    v = vertices[triangles]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(norm > 0, norm, 1.0)


# --- OBJ ------------------------------------------------------------------------


def parse_obj(data: bytes) -> TriMesh:
    """Parse the ``v``/``f`` subset of Wavefront OBJ; polygons are fan-triangulated."""
    vertices: list[tuple[float, float, float]] = []
    triangles: list[tuple[int, int, int]] = []
    for lineno, raw in enumerate(data.decode("utf-8").splitlines(), start=1):
        tokens = raw.split("#", 1)[0].split()
        if not tokens:
            continue
        if tokens[0] == "v":
            if len(tokens) < 4:
                raise MeshError("vertex needs three coordinates", lineno)
            try:
                xyz = tuple(float(c) for c in tokens[1:4])
            except ValueError as exc:
                raise MeshError(f"non-numeric coordinate ({exc})", lineno) from None
            if not all(math.isfinite(c) for c in xyz):
                raise MeshError("non-finite coordinate", lineno)
            vertices.append(xyz)
        elif tokens[0] == "f":
            if len(tokens) < 4:
                raise MeshError("face needs at least three vertices", lineno)
            idx = []
            for tok in tokens[1:]:
                try:
                    k = int(tok.split("/", 1)[0])
                except ValueError:
                    raise MeshError(f"bad face index {tok!r}", lineno) from None
                k = k - 1 if k > 0 else len(vertices) + k
                if k < 0 or k >= len(vertices):
                    raise MeshError(
                        f"face index {tok} out of range for {len(vertices)} vertices", lineno
                    )
                idx.append(k)
            for i in range(1, len(idx) - 1):
                tri = (idx[0], idx[i], idx[i + 1])
                if len(set(tri)) < 3:
                    raise MeshError(f"degenerate face {tri}", lineno)
                p = np.array([vertices[j] for j in tri])
                if np.linalg.norm(np.cross(p[1] - p[0], p[2] - p[0])) * 0.5 < MIN_TRIANGLE_AREA:
                    raise MeshError(f"degenerate face {tri} (zero area)", lineno)
                triangles.append(tri)
    return TriMesh(np.array(vertices, dtype=float).reshape(-1, 3), np.array(triangles, dtype=np.int64).reshape(-1, 3))


def write_obj(mesh: TriMesh) -> bytes:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles.tolist()]
    return ("\n".join(lines) + "\n").encode("utf-8")


def load_obj(path) -> TriMesh:
    with open(path, "rb") as fh:
        return parse_obj(fh.read())


# --- acceleration structure -------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AccelStructure:
    """Median-split AABB tree over a mesh's triangles, nodes in pre-order."""

    mesh: TriMesh
    lo: np.ndarray
    hi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.left)

    @property
    def n_leaves(self) -> int:
        return int(np.count_nonzero(self.left < 0))

    def refit(self, vertices: np.ndarray) -> AccelStructure:
        """Accel for the same topology with moved vertices (bounds recomputed)."""
        mesh = self.mesh.with_vertices(vertices)
        lo, hi = kernels.impl.refit_bvh(
            mesh.vertices, mesh.triangles, self.left, self.right, self.start, self.count, self.order
        )
        return AccelStructure(mesh, lo, hi, self.left, self.right, self.start, self.count, self.order)


def build_bvh(mesh: TriMesh, leaf_size: int = LEAF_SIZE) -> AccelStructure:
    if mesh.n_triangles == 0:
        raise MeshError("cannot build a BVH over an empty mesh")
    tri = mesh.vertices[mesh.triangles]
    centroids = tri.mean(axis=1)
    left: list[int] = []
    right: list[int] = []
    start: list[int] = []
    count: list[int] = []
    order = np.arange(mesh.n_triangles, dtype=np.int64)

    def node(lo_i: int, hi_i: int) -> int:
        me = len(left)
        left.append(-1)
        right.append(-1)
        start.append(lo_i)
        count.append(hi_i - lo_i)
        n = hi_i - lo_i
        if n <= leaf_size:
            return me
        members = order[lo_i:hi_i]
        c = centroids[members]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        order[lo_i:hi_i] = members[np.argsort(c[:, axis], kind="stable")]
        mid = lo_i + n // 2
        left[me] = node(lo_i, mid)
        right[me] = node(mid, hi_i)
        start[me] = 0
        count[me] = 0
        return me

    node(0, mesh.n_triangles)
    args = [np.array(a, dtype=np.int64) for a in (left, right, start, count)]
    lo, hi = kernels.impl.refit_bvh(mesh.vertices, mesh.triangles, *args, order)
    return AccelStructure(mesh, lo, hi, *args, order)


@dataclass(frozen=True)
class DistanceQueryResult:
    distance: float
    closest_point: np.ndarray
    triangle_index: int
    side: Side


@dataclass(frozen=True)
class BatchQuery:
    """Vectorized counterpart of :class:`DistanceQueryResult`."""

    distance: np.ndarray
    closest_point: np.ndarray
    triangle_index: np.ndarray
    front: np.ndarray


def _sides(accel: AccelStructure, queries, cp, idx) -> np.ndarray:
    normals = face_normals(accel.mesh.vertices, accel.mesh.triangles[idx])
    return np.einsum("ij,ij->i", queries - cp, normals) >= 0.0


def closest_points(accel: AccelStructure, queries: np.ndarray) -> BatchQuery:
    q = np.asarray(queries, dtype=float).reshape(-1, 3)
    m = accel.mesh
    dist, cp, idx = kernels.impl.query_bvh(
        m.vertices, m.triangles, accel.lo, accel.hi, accel.left, accel.right,
        accel.start, accel.count, accel.order, q,
    )
    return BatchQuery(dist, cp, idx, _sides(accel, q, cp, idx))


def closest_points_brute(mesh: TriMesh, queries: np.ndarray) -> BatchQuery:
    """Reference scan over every triangle (used to check the BVH)."""
    if mesh.n_triangles == 0:
        raise MeshError("empty mesh")
    q = np.asarray(queries, dtype=float).reshape(-1, 3)
    dist, cp, idx = kernels.impl.query_brute(mesh.vertices, mesh.triangles, q)
    normals = face_normals(mesh.vertices, mesh.triangles[idx])
    return BatchQuery(dist, cp, idx, np.einsum("ij,ij->i", q - cp, normals) >= 0.0)


def closest_point(accel: AccelStructure, query) -> DistanceQueryResult:
    r = closest_points(accel, np.asarray(query, dtype=float).reshape(1, 3))
    return DistanceQueryResult(
        float(r.distance[0]),
        r.closest_point[0],
        int(r.triangle_index[0]),
        Side.FRONT if r.front[0] else Side.BACK,
    )


def penetration_depths(accel: AccelStructure, queries: np.ndarray) -> np.ndarray:
    """Depth behind an oriented surface; zero on the front side or on the surface."""
    r = closest_points(accel, queries)
    return np.where(r.front | (r.distance == 0.0), 0.0, r.distance)


def penetration_depth(accel: AccelStructure, query) -> float:
    return float(penetration_depths(accel, np.asarray(query, dtype=float).reshape(1, 3))[0])


def in_contact(accel: AccelStructure, query, contact_eps: float) -> bool:
    r = closest_points(accel, np.asarray(query, dtype=float).reshape(1, 3))
    return bool(r.front[0] and r.distance[0] <= contact_eps)


# --- surface comparison -----------------------------------------------------------


@dataclass(frozen=True)
class SurfaceDistanceStats:
    mean: float
    max: float
    rms: float
    sample_count: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "max": self.max, "rms": self.rms, "sample_count": self.sample_count}


def surface_samples(mesh: TriMesh, samples_per_triangle: int, seed: int = 0) -> np.ndarray:
    """Vertices plus scrambled-Halton interior points on every triangle."""
    if samples_per_triangle < 1:
        raise MeshError("samples_per_triangle must be >= 1")
    if mesh.n_triangles == 0:
        raise MeshError("empty mesh")
    n = mesh.n_triangles * samples_per_triangle
    uv = qmc.Halton(d=2, scramble=True, seed=seed).random(n)
    u, v = uv[:, 0], uv[:, 1]
    flip = u + v > 1.0
    u = np.where(flip, 1.0 - u, u)
    v = np.where(flip, 1.0 - v, v)
    tri = np.repeat(mesh.vertices[mesh.triangles], samples_per_triangle, axis=0)
    interior = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])
    return np.concatenate([mesh.vertices, interior])


def surface_distance_stats(
    source: TriMesh, target: AccelStructure, samples_per_triangle: int, seed: int = 0
) -> SurfaceDistanceStats:
    """Directed distances from samples of ``source`` to the ``target`` surface."""
    pts = surface_samples(source, samples_per_triangle, seed)
    d = closest_points(target, pts).distance
    return SurfaceDistanceStats(
        mean=min(float(np.mean(d)), float(np.max(d))),
        max=float(np.max(d)),
        rms=float(np.sqrt(np.mean(d * d))),
        sample_count=len(d),
    )


def symmetric_stats(a: SurfaceDistanceStats, b: SurfaceDistanceStats) -> SurfaceDistanceStats:
    return SurfaceDistanceStats(
        mean=max(a.mean, b.mean),
        max=max(a.max, b.max),
        rms=max(a.rms, b.rms),
        sample_count=max(a.sample_count, b.sample_count),
    )
