"""Animation fidelity metrics, gates and report rendering.

Three checks are provided: distance from each coil target to the skinned
surface it rides on, tongue contact with (and penetration of) an oriented
palate, and surface similarity between a deformed tongue and a reference
mesh. Results are per-frame :class:`MetricSeries`, compared against
thresholds by :class:`Gate`, and written by :func:`generate_report`.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from vtanim.asset import AnimatedModelAsset
from vtanim.mesh import (
    SurfaceDistanceStats,
    TriMesh,
    build_bvh,
    closest_points,
    surface_distance_stats,
    symmetric_stats,
)
from vtanim.rig import bind_globals, fk_arrays, GlobalTransforms, skin_vertices, skinning_matrices

REPORT_FORMAT = "report-v1"
DEFAULT_DISTANCE_MM = 1.0
DEFAULT_PENETRATION_MM = 0.2
DEFAULT_CONTACT_EPS_MM = 0.5
DEFAULT_SIMILARITY_MM = 1.0
DEFAULT_SAMPLES_PER_TRIANGLE = 4


class EvalError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MetricSeries:
    """One value per frame; the summary is always recomputed from the values."""

    name: str
    unit: str
    values: np.ndarray
    frame_rate_hz: float = 200.0

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=float).reshape(-1)
        if len(v) == 0:
            raise EvalError(f"series {self.name!r} is empty")
        if not np.isfinite(v).all():
            raise EvalError(f"series {self.name!r} has non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n_frames(self) -> int:
        return len(self.values)

    @property
    def summary(self) -> dict[str, float]:
        v = self.values
        return {
            "min": float(v.min()),
            "max": float(v.max()),
            "mean": float(v.mean()),
            "rms": float(np.sqrt(np.mean(v * v))),
            "p95": float(np.percentile(v, 95)),
        }


@dataclass(frozen=True)
class Gate:
    """Pass when ``measured <= threshold`` (or ``>=`` for ``at_least`` gates)."""

    name: str
    metric: str
    threshold: float
    measured: float
    at_least: bool = False

    @property
    def passed(self) -> bool:
        if self.at_least:
            return self.measured >= self.threshold
        return self.measured <= self.threshold

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "metric": self.metric,
            "threshold": self.threshold,
            "measured": self.measured,
            "comparison": ">=" if self.at_least else "<=",
            "passed": self.passed,
        }


def max_gate(name: str, series: Sequence[MetricSeries], threshold: float) -> Gate:
    """Gate on the largest value across one or more series."""
    worst = max(series, key=lambda s: s.summary["max"])
    return Gate(name, worst.name, float(threshold), worst.summary["max"])


# --- posing helpers ------------------------------------------------------------------


def posed_globals(asset: AnimatedModelAsset) -> tuple[GlobalTransforms, np.ndarray, np.ndarray]:
    """Bind globals plus per-frame global rotations (F, B, 4) and translations (F, B, 3)."""
    gq, gt = fk_arrays(asset.armature, asset.clip.rotations, asset.clip.root_translations)
    return bind_globals(asset.armature), gq, gt


def _frame_vertices(asset, name: str, bind: GlobalTransforms, gq, gt) -> Iterator[np.ndarray]:
    mesh = asset.meshes[name]
    w = asset.weights.get(name)
    for f in range(asset.clip.n_frames):
        if w is None:
            yield mesh.vertices
        else:
            yield skin_vertices(mesh.vertices, w, skinning_matrices(bind, GlobalTransforms(gq[f], gt[f])))


def deformed_mesh(asset: AnimatedModelAsset, name: str, frame: int) -> TriMesh:
    if name not in asset.meshes:
        raise EvalError(f"asset has no mesh {name!r}")
    if not 0 <= frame < asset.clip.n_frames:
        raise EvalError(f"frame {frame} outside 0..{asset.clip.n_frames - 1}")
    mesh = asset.meshes[name]
    w = asset.weights.get(name)
    if w is None:
        return mesh
    bind, gq, gt = posed_globals(asset)
    posed = GlobalTransforms(gq[frame], gt[frame])
    return mesh.with_vertices(skin_vertices(mesh.vertices, w, skinning_matrices(bind, posed)))


# --- metrics -------------------------------------------------------------------------


def target_surface_distance(asset: AnimatedModelAsset) -> list[MetricSeries]:
    """Per-coil distance from the frame's target to its deformed mesh surface."""
    by_mesh: dict[str, list[int]] = {}
    for k, t in enumerate(asset.topology):
        marker = next((c for c in asset.coils if c.coil_id == t.coil_id), None)
        if marker is None or marker.mesh is None:
            raise EvalError(f"coil {t.coil_id!r} is not mapped to a mesh")
        by_mesh.setdefault(marker.mesh, []).append(k)
    n = asset.clip.n_frames
    out = np.zeros((n, len(asset.topology)))
    bind, gq, gt = posed_globals(asset)
    for name, cols in by_mesh.items():
        accel = build_bvh(asset.meshes[name])
        static = name not in asset.weights
        for f, verts in enumerate(_frame_vertices(asset, name, bind, gq, gt)):
            a = accel if static else accel.refit(verts)
            out[f, cols] = closest_points(a, asset.target_positions[f, cols]).distance
    rate = asset.clip.frame_rate_hz
    return [
        MetricSeries(f"target_distance.{t.coil_id}", "mm", out[:, k], rate) for k, t in enumerate(asset.topology)
    ]


def check_oriented(mesh: TriMesh) -> None:
    """Reject empty meshes and meshes whose neighbouring faces disagree in winding."""
    if mesh.n_triangles == 0:
        raise EvalError("palate mesh is empty")
    t = mesh.triangles
    directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    _, counts = np.unique(directed, axis=0, return_counts=True)
    if np.any(counts > 1):
        raise EvalError("palate mesh is not consistently oriented (an edge is shared with equal direction)")


def palate_contact(
    asset: AnimatedModelAsset,
    palate: TriMesh,
    contact_eps_mm: float = DEFAULT_CONTACT_EPS_MM,
    tongue: str = "tongue",
) -> tuple[MetricSeries, MetricSeries]:
    """Per-frame contact flag (0/1) and maximum penetration depth of tongue vertices."""
    check_oriented(palate)
    if not contact_eps_mm >= 0:
        raise EvalError("contact_eps must be >= 0")
    if tongue not in asset.meshes:
        raise EvalError(f"asset has no mesh {tongue!r}")
    accel = build_bvh(palate)
    n = asset.clip.n_frames
    contact = np.zeros(n)
    depth = np.zeros(n)
    bind, gq, gt = posed_globals(asset)
    for f, verts in enumerate(_frame_vertices(asset, tongue, bind, gq, gt)):
        r = closest_points(accel, verts)
        behind = ~r.front & (r.distance > 0.0)
        depth[f] = r.distance[behind].max() if np.any(behind) else 0.0
        contact[f] = float(np.any(~behind & (r.distance <= contact_eps_mm)))
    rate = asset.clip.frame_rate_hz
    return MetricSeries("palate_contact", "bool", contact, rate), MetricSeries("penetration", "mm", depth, rate)


def pose_similarity(
    deformed: TriMesh,
    reference: TriMesh,
    samples_per_triangle: int = DEFAULT_SAMPLES_PER_TRIANGLE,
    seed: int = 0,
) -> SurfaceDistanceStats:
    """Symmetric sampled surface distance between two meshes."""
    if deformed.n_triangles == 0 or reference.n_triangles == 0:
        raise EvalError("pose similarity needs two non-empty meshes")
    ab = surface_distance_stats(deformed, build_bvh(reference), samples_per_triangle, seed)
    ba = surface_distance_stats(reference, build_bvh(deformed), samples_per_triangle, seed)
    return symmetric_stats(ab, ba)


# --- reports -------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EvalReport:
    series: tuple[MetricSeries, ...]
    gates: tuple[Gate, ...]
    scalars: Mapping[str, float] = field(default_factory=dict)
    provenance: Mapping = field(default_factory=dict)
    seed: int = 0
    thresholds: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "series", tuple(self.series))
        object.__setattr__(self, "gates", tuple(self.gates))
        names = [s.name for s in self.series]
        if len(set(names)) != len(names):
            raise EvalError("duplicate series names")
        known = set(names) | set(self.scalars)
        for g in self.gates:
            if g.metric not in known:
                raise EvalError(f"gate {g.name!r} references unknown metric {g.metric!r}")

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.gates)

    def threshold_for(self, name: str) -> float | None:
        if name in self.thresholds:
            return float(self.thresholds[name])
        return next((g.threshold for g in self.gates if g.metric == name), None)

    @property
    def failed_gates(self) -> list[Gate]:
        return [g for g in self.gates if not g.passed]

    def summary_document(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "status": "pass" if self.passed else "fail",
            "seed": self.seed,
            "provenance": dict(self.provenance),
            "scalars": dict(self.scalars),
            "gates": [g.to_dict() for g in self.gates],
            "series": [
                {
                    "name": s.name,
                    "unit": s.unit,
                    "frames": s.n_frames,
                    "frame_rate_hz": s.frame_rate_hz,
                    "summary": s.summary,
                    "threshold": self.threshold_for(s.name),
                    "csv": f"{s.name}.csv",
                    "svg": f"{s.name}.svg",
                }
                for s in self.series
            ],
        }


def series_csv(series: MetricSeries) -> bytes:
    rows = ["frame,time_s,value"]
    rows += [f"{f},{f / series.frame_rate_hz!r},{v!r}" for f, v in enumerate(series.values.tolist())]
    return ("\n".join(rows) + "\n").encode("utf-8")


def series_svg(series: MetricSeries, threshold: float | None = None, width: int = 640, height: int = 240) -> bytes:
    """Line plot of the series, with a dashed horizontal threshold line."""
    pad = 40
    v = series.values
    top = max(float(v.max()), threshold if threshold is not None else float(v.max()))
    bottom = min(float(v.min()), 0.0)
    span = top - bottom or 1.0
    n = max(len(v) - 1, 1)

    def xy(f: float, y: float) -> tuple[float, float]:
        return pad + (width - 2 * pad) * f / n, height - pad - (height - 2 * pad) * (y - bottom) / span

    pts = " ".join("%.3f,%.3f" % xy(f, y) for f, y in enumerate(v.tolist()))
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f"<title>{series.name} ({series.unit})</title>",
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{pad}" y="{pad - 8}" font-size="12">{series.name} [{series.unit}] max={v.max():.6g}</text>',
    ]
    if threshold is not None:
        x0, y = xy(0, threshold)
        x1, _ = xy(n, threshold)
        lines.append(
            f'<line class="threshold" x1="{x0:.3f}" y1="{y:.3f}" x2="{x1:.3f}" y2="{y:.3f}" '
            f'stroke="red" stroke-dasharray="6,4"/>'
        )
    lines.append(f'<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{pts}"/>')
    lines.append("</svg>")
    return ("\n".join(lines) + "\n").encode("utf-8")


def dumps_json(doc) -> bytes:
    return (json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n").encode("utf-8")


def write_files_atomically(output_dir, files: Mapping[str, bytes]) -> None:
    """Stage every file in a scratch directory, then move each into place."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".staging-", dir=out))
    try:
        for name, data in files.items():
            with open(stage / name, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
        for name in files:
            os.replace(stage / name, out / name)
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def report_files(report: EvalReport) -> dict[str, bytes]:
    files = {"summary.json": dumps_json(report.summary_document())}
    for s in report.series:
        files[f"{s.name}.csv"] = series_csv(s)
        files[f"{s.name}.svg"] = series_svg(s, report.threshold_for(s.name))
    return files


def generate_report(
    series: Sequence[MetricSeries],
    gates: Sequence[Gate],
    output_dir,
    *,
    scalars: Mapping[str, float] | None = None,
    provenance: Mapping | None = None,
    seed: int = 0,
    thresholds: Mapping[str, float] | None = None,
) -> EvalReport:
    """Write ``summary.json`` plus one CSV and one SVG per series.

    ``thresholds`` sets the plotted threshold line per series; by default a
    series uses the threshold of the first gate that references it.
    """
    report = EvalReport(
        tuple(series), tuple(gates), dict(scalars or {}), dict(provenance or {}), seed, dict(thresholds or {})
    )
    write_files_atomically(output_dir, report_files(report))
    return report
