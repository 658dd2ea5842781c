"""Model compiler: config loading and the validate/rig/solve/evaluate/package lifecycle."""

from __future__ import annotations

import json
import logging
import time
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from vtanim import __version__
from vtanim.asset import (
    AnimatedModelAsset,
    AssetError,
    CoilMarker,
    remove_asset,
    sha256_bytes,
    sha256_file,
    write_asset,
)
from vtanim.ema import (
    Articulator,
    CoilRole,
    EmaFormatError,
    EmaTrajectory,
    check_roles,
    interpolate_gaps,
    parse_ag500_pos,
    parse_ema_csv,
    smooth,
    validate,
)
from vtanim.evaluation import (
    DEFAULT_CONTACT_EPS_MM,
    DEFAULT_DISTANCE_MM,
    DEFAULT_PENETRATION_MM,
    DEFAULT_SAMPLES_PER_TRIANGLE,
    DEFAULT_SIMILARITY_MM,
    EvalError,
    EvalReport,
    Gate,
    MetricSeries,
    deformed_mesh,
    generate_report,
    max_gate,
    palate_contact,
    pose_similarity,
    target_surface_distance,
    write_files_atomically,
    dumps_json,
)
from vtanim.ik import IkConfig, IkError, JointLimit, attach_targets, solve_sequence
from vtanim.mesh import MeshError, TriMesh, parse_obj
from vtanim.rig import (
    Armature,
    RigError,
    SkinWeights,
    build_jaw_armature,
    build_tongue_armature,
    compute_skin_weights,
    merge_armatures,
)
from vtanim.transforms import RigidTransform

log = logging.getLogger("vtanim.compiler")

CONFIG_FORMAT = "config-v1"
LIFECYCLE_FORMAT = "lifecycle-v1"
PHASES = ("validate", "rig", "solve", "evaluate", "package")
MESH_ROLES = ("tongue", "mandible", "maxilla", "palate")
TONGUE_MESH = "tongue"
JAW_MESH = "mandible"
JAW_BONE = "jaw"
TONGUE_PREFIX = "tongue"


class ConfigError(ValueError):
    pass


def _take(data: Mapping, allowed: Sequence[str], where: str) -> dict:
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where} must be an object")
    extra = sorted(set(data) - set(allowed))
    if extra:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(extra)}")
    return dict(data)


@dataclass(frozen=True)
class EmaSource:
    path: Path
    format: str = "csv"
    channels: int | None = None
    sample_rate_hz: float | None = None
    max_rms_mm: float = 1.0
    max_gap_frames: int = 10
    interpolate_gaps: bool = False
    smooth_window: int = 0

    def __post_init__(self) -> None:
        if self.format not in ("csv", "pos"):
            raise ConfigError(f"ema.format must be 'csv' or 'pos', got {self.format!r}")
        if self.format == "pos" and (not self.channels or not self.sample_rate_hz):
            raise ConfigError("ema.format 'pos' needs channels and sample_rate_hz")
        if not self.max_rms_mm > 0 or self.max_gap_frames < 0 or self.smooth_window < 0:
            raise ConfigError("ema hygiene parameters out of range")


@dataclass(frozen=True)
class RigParams:
    falloff_sigma_mm: float = 5.0
    root_offset_mm: float = 5.0
    hinge: tuple[float, float, float] | None = None
    lock_twist: bool = True
    max_swing_rad: float | None = None

    def __post_init__(self) -> None:
        if not self.falloff_sigma_mm > 0 or not self.root_offset_mm > 0:
            raise ConfigError("rig sigma and root offset must be > 0")
        if self.hinge is not None:
            object.__setattr__(self, "hinge", tuple(float(x) for x in self.hinge))


@dataclass(frozen=True)
class EvalParams:
    distance_mm: float = DEFAULT_DISTANCE_MM
    penetration_mm: float = DEFAULT_PENETRATION_MM
    contact_eps_mm: float = DEFAULT_CONTACT_EPS_MM
    similarity_mm: float = DEFAULT_SIMILARITY_MM
    require_contact: bool = False
    samples_per_triangle: int = DEFAULT_SAMPLES_PER_TRIANGLE
    seed: int = 0
    reference_mesh: Path | None = None
    reference_frame: int | None = None

    def __post_init__(self) -> None:
        for name in ("distance_mm", "penetration_mm", "contact_eps_mm", "similarity_mm"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"evaluation.{name} must be > 0")
        if self.reference_mesh is not None and self.reference_frame is None:
            raise ConfigError("evaluation.reference_mesh needs reference_frame")

    def thresholds(self) -> dict:
        return {
            "distance_mm": self.distance_mm,
            "penetration_mm": self.penetration_mm,
            "contact_eps_mm": self.contact_eps_mm,
            "similarity_mm": self.similarity_mm,
            "require_contact": self.require_contact,
            "samples_per_triangle": self.samples_per_triangle,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class CompileConfig:
    """Everything a compile needs; paths are absolute once loaded."""

    meshes: Mapping[str, Path]
    ema: EmaSource
    coils: tuple[CoilRole, ...]
    coil_binds: Mapping[str, tuple[float, float, float]] = field(default_factory=dict)
    registration: RigidTransform = RigidTransform()
    rig: RigParams = RigParams()
    ik: IkConfig = IkConfig()
    position_weight: float = 1.0
    orientation_weight: float = 0.0
    warm_start: bool = True
    evaluation: EvalParams = EvalParams()
    source_sha256: str | None = None

    def __post_init__(self) -> None:
        if TONGUE_MESH not in self.meshes:
            raise ConfigError("meshes.tongue is required")
        for role, p in self.meshes.items():
            if role not in MESH_ROLES:
                raise ConfigError(f"unknown mesh role {role!r}")
            if not str(p):
                raise ConfigError(f"meshes.{role} path is empty")
        if not str(self.ema.path):
            raise ConfigError("ema.path is empty")
        try:
            check_roles(self.coils)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        tongue = sorted(r.chain_index for r in self.coils if r.articulator is Articulator.TONGUE)
        if tongue != list(range(len(tongue))):
            raise ConfigError(f"tongue chain indices must be 0..n-1, got {tongue}")
        if len(tongue) < 2:
            raise ConfigError("at least two tongue coils are required")
        if sum(r.articulator is Articulator.JAW for r in self.coils) > 1:
            raise ConfigError("at most one jaw coil is supported")
        if any(r.articulator is Articulator.JAW for r in self.coils) and self.rig.hinge is None:
            raise ConfigError("a jaw coil needs rig.hinge")

    @property
    def digest(self) -> str:
        if self.source_sha256 is not None:
            return self.source_sha256
        return sha256_bytes(json.dumps(self.to_dict(), sort_keys=True).encode("utf-8"))

    def to_dict(self) -> dict:
        e = self.ema
        return {
            "format": CONFIG_FORMAT,
            "meshes": {k: str(v) for k, v in sorted(self.meshes.items())},
            "ema": {
                "path": str(e.path),
                "format": e.format,
                "channels": e.channels,
                "sample_rate_hz": e.sample_rate_hz,
                "max_rms_mm": e.max_rms_mm,
                "max_gap_frames": e.max_gap_frames,
                "interpolate_gaps": e.interpolate_gaps,
                "smooth_window": e.smooth_window,
            },
            "coils": [
                {
                    "id": r.coil_id,
                    "articulator": r.articulator.value,
                    "chain_index": r.chain_index,
                    **({"bind": list(self.coil_binds[r.coil_id])} if r.coil_id in self.coil_binds else {}),
                }
                for r in self.coils
            ],
            "registration": self.registration.to_dict(),
            "rig": {
                "falloff_sigma_mm": self.rig.falloff_sigma_mm,
                "root_offset_mm": self.rig.root_offset_mm,
                "hinge": None if self.rig.hinge is None else list(self.rig.hinge),
                "lock_twist": self.rig.lock_twist,
                "max_swing_rad": self.rig.max_swing_rad,
            },
            "ik": {
                **self.ik.to_dict(),
                "position_weight": self.position_weight,
                "orientation_weight": self.orientation_weight,
                "warm_start": self.warm_start,
            },
            "evaluation": {
                **self.evaluation.thresholds(),
                "reference_mesh": None if self.evaluation.reference_mesh is None else str(self.evaluation.reference_mesh),
                "reference_frame": self.evaluation.reference_frame,
            },
        }


def config_from_dict(doc: Mapping, base_dir=".", source_sha256: str | None = None) -> CompileConfig:
    """Build a config from a ``config-v1`` document; relative paths resolve against ``base_dir``."""
    base = Path(base_dir)
    doc = _take(doc, ("format", "meshes", "ema", "coils", "registration", "rig", "ik", "evaluation"), "config")
    if doc.get("format") != CONFIG_FORMAT:
        raise ConfigError(f"unsupported config format {doc.get('format')!r} (expected {CONFIG_FORMAT!r})")

    def path(p) -> Path:
        if not isinstance(p, str) or not p:
            raise ConfigError(f"invalid path {p!r}")
        return base / p

    try:
        meshes = {k: path(v) for k, v in _take(doc.get("meshes", {}), MESH_ROLES, "meshes").items()}
        e = _take(
            doc.get("ema", {}),
            ("path", "format", "channels", "sample_rate_hz", "max_rms_mm", "max_gap_frames",
             "interpolate_gaps", "smooth_window"),
            "ema",
        )
        if "path" not in e:
            raise ConfigError("ema.path is required")
        e["path"] = path(e["path"])
        ema = EmaSource(**e)
        coils, binds = [], {}
        for c in doc.get("coils", []):
            c = _take(c, ("id", "articulator", "chain_index", "bind"), "coils[]")
            coils.append(CoilRole(c["id"], c["articulator"], c.get("chain_index")))
            if c.get("bind") is not None:
                binds[c["id"]] = tuple(float(x) for x in c["bind"])
        registration = RigidTransform.from_dict(_take(doc.get("registration", {}), ("rotation", "translation"), "registration"))
        rig = RigParams(**_take(doc.get("rig", {}), tuple(RigParams.__dataclass_fields__), "rig"))
        ik_doc = _take(
            doc.get("ik", {}),
            tuple(IkConfig.__dataclass_fields__) + ("position_weight", "orientation_weight", "warm_start"),
            "ik",
        )
        pw = float(ik_doc.pop("position_weight", 1.0))
        ow = float(ik_doc.pop("orientation_weight", 0.0))
        warm = bool(ik_doc.pop("warm_start", True))
        ik = IkConfig.from_dict(ik_doc)
        ev = _take(doc.get("evaluation", {}), tuple(EvalParams.__dataclass_fields__), "evaluation")
        if ev.get("reference_mesh") is not None:
            ev["reference_mesh"] = path(ev["reference_mesh"])
        evaluation = EvalParams(**ev)
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    return CompileConfig(
        meshes=meshes,
        ema=ema,
        coils=tuple(coils),
        coil_binds=binds,
        registration=registration,
        rig=rig,
        ik=ik,
        position_weight=pw,
        orientation_weight=ow,
        warm_start=warm,
        evaluation=evaluation,
        source_sha256=source_sha256,
    )


def load_config(path) -> CompileConfig:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return config_from_dict(doc, path.parent, sha256_bytes(raw))


# --- lifecycle report ----------------------------------------------------------------


@dataclass
class PhaseResult:
    name: str
    status: str = "pending"  # passed | failed | skipped
    kind: str | None = None  # input | gate | internal, for failures
    diagnostic: str | None = None

    def to_dict(self) -> dict:
        return {"name": self.name, "status": self.status, "kind": self.kind, "diagnostic": self.diagnostic}


_EXIT_CODES = {None: 0, "gate": 2, "input": 3, "internal": 4}


@dataclass
class LifecycleReport:
    """Ordered phase outcomes and gate results.

    ``timings_s`` is kept in memory and logged, but left out of the written
    document so that reports are byte-reproducible.
    """

    phases: list[PhaseResult] = field(default_factory=lambda: [PhaseResult(p) for p in PHASES])
    gates: list[Gate] = field(default_factory=list)
    timings_s: dict[str, float] = field(default_factory=dict)
    evaluation: EvalReport | None = None
    scalars: dict[str, float] = field(default_factory=dict)

    def phase(self, name: str) -> PhaseResult:
        return next(p for p in self.phases if p.name == name)

    @property
    def failed_phase(self) -> PhaseResult | None:
        return next((p for p in self.phases if p.status == "failed"), None)

    @property
    def passed(self) -> bool:
        return all(p.status == "passed" for p in self.phases)

    @property
    def exit_code(self) -> int:
        failed = self.failed_phase
        return _EXIT_CODES[failed.kind if failed else None]

    def fail(self, name: str, kind: str, diagnostic: str) -> None:
        seen = False
        for p in self.phases:
            if p.name == name:
                p.status, p.kind, p.diagnostic = "failed", kind, diagnostic
                seen = True
            elif seen:
                p.status = "skipped"

    def to_dict(self) -> dict:
        failed = self.failed_phase
        return {
            "format": LIFECYCLE_FORMAT,
            "status": "pass" if self.passed else "fail",
            "failed_phase": failed.name if failed else None,
            "phases": [p.to_dict() for p in self.phases],
            "gates": [g.to_dict() for g in self.gates],
            "scalars": dict(sorted(self.scalars.items())),
        }

    def summary_lines(self) -> list[str]:
        out = []
        for p in self.phases:
            line = f"{p.name:<9} {p.status}"
            if p.diagnostic:
                line += f": {p.diagnostic}"
            out.append(line)
        return out


# --- phases ---------------------------------------------------------------------------


class _PhaseFailure(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


_INPUT_ERRORS = (ConfigError, MeshError, EmaFormatError, RigError, IkError, EvalError, AssetError, OSError, ValueError)


@dataclass
class _State:
    config: CompileConfig
    meshes: dict[str, TriMesh] = field(default_factory=dict)
    traj: EmaTrajectory | None = None
    input_hashes: dict[str, str] = field(default_factory=dict)
    armature: Armature | None = None
    weights: dict[str, SkinWeights] = field(default_factory=dict)
    binds: dict[str, np.ndarray] = field(default_factory=dict)
    clip: object = None
    targets: list = field(default_factory=list)
    asset: AnimatedModelAsset | None = None


def _read(path: Path, what: str) -> bytes:
    try:
        return path.read_bytes()
    except FileNotFoundError:
        raise _PhaseFailure("input", f"{what}: file not found: {path}") from None
    except OSError as exc:
        raise _PhaseFailure("input", f"{what}: cannot read {path}: {exc.strerror}") from None


def load_trajectory(source: EmaSource, data: bytes) -> EmaTrajectory:
    if source.format == "csv":
        return parse_ema_csv(data)
    return parse_ag500_pos(data, source.channels, source.sample_rate_hz)


def _phase_validate(st: _State) -> None:
    cfg = st.config
    for role, p in sorted(cfg.meshes.items()):
        data = _read(p, f"mesh {role}")
        st.input_hashes[f"mesh.{role}"] = sha256_bytes(data)
        try:
            st.meshes[role] = parse_obj(data)
        except MeshError as exc:
            raise _PhaseFailure("input", f"mesh {role} ({p.name}): {exc}") from None
        if st.meshes[role].n_triangles == 0:
            raise _PhaseFailure("input", f"mesh {role} ({p.name}) has no triangles")
    if cfg.evaluation.reference_mesh is not None:
        data = _read(cfg.evaluation.reference_mesh, "reference mesh")
        st.input_hashes["mesh.reference"] = sha256_bytes(data)
        st.meshes["reference"] = parse_obj(data)
    data = _read(cfg.ema.path, "EMA")
    st.input_hashes["ema"] = sha256_bytes(data)
    try:
        traj = load_trajectory(cfg.ema, data)
    except EmaFormatError as exc:
        raise _PhaseFailure("input", f"EMA ({cfg.ema.path.name}): {exc}") from None
    roles = {r.coil_id for r in cfg.coils}
    unmapped = [c for c in traj.coil_ids if c not in roles]
    if unmapped:
        raise _PhaseFailure("input", f"coil(s) {', '.join(unmapped)} missing from the role map")
    absent = [r.coil_id for r in cfg.coils if r.coil_id not in traj.coil_ids]
    if absent:
        raise _PhaseFailure("input", f"role map coil(s) {', '.join(absent)} not in the EMA data")
    summary = validate(traj, cfg.ema.max_rms_mm, cfg.ema.max_gap_frames)
    if not summary.ok:
        worst = max(summary.runs, key=lambda r: r.length)
        raise _PhaseFailure(
            "input",
            f"EMA dropout: coil {worst.coil_id} invalid for {worst.length} frames from frame {worst.start} "
            f"(max_gap_frames={cfg.ema.max_gap_frames})",
        )
    traj = summary.trajectory
    if cfg.ema.interpolate_gaps:
        traj = interpolate_gaps(traj, cfg.ema.max_gap_frames)
    if cfg.ema.smooth_window > 1:
        traj = smooth(traj, cfg.ema.smooth_window)
    st.traj = traj


def coil_bind_positions(config: CompileConfig, traj: EmaTrajectory) -> dict[str, np.ndarray]:
    """Configured bind positions, else each coil's first valid registered sample."""
    out = {}
    for r in config.coils:
        if r.coil_id in config.coil_binds:
            out[r.coil_id] = np.array(config.coil_binds[r.coil_id], dtype=float)
            continue
        c = traj.coil_index(r.coil_id)
        ok = np.flatnonzero(traj.valid[:, c])
        if len(ok) == 0:
            raise RigError(f"coil {r.coil_id!r} has no valid sample to bind from")
        out[r.coil_id] = config.registration.apply(traj.positions[ok[0], c])
    return out


def build_rig(config: CompileConfig, binds: Mapping[str, np.ndarray]) -> Armature:
    tongue = sorted((r for r in config.coils if r.articulator is Articulator.TONGUE), key=lambda r: r.chain_index)
    parts = [build_tongue_armature([binds[r.coil_id] for r in tongue], config.rig.root_offset_mm, TONGUE_PREFIX)]
    jaw = [r for r in config.coils if r.articulator is Articulator.JAW]
    if jaw:
        parts.append(build_jaw_armature(binds[jaw[0].coil_id], config.rig.hinge, JAW_BONE))
    return merge_armatures(*parts)


def skin_meshes(config: CompileConfig, armature: Armature, meshes: Mapping[str, TriMesh]) -> dict[str, SkinWeights]:
    """Gaussian weights on the tongue bones for the tongue; rigid jaw weights for the mandible."""
    tongue_bones = [b for b in armature.bone_ids if b.startswith(TONGUE_PREFIX + ".")]
    out = {TONGUE_MESH: compute_skin_weights(meshes[TONGUE_MESH], armature, config.rig.falloff_sigma_mm, tongue_bones)}
    if JAW_MESH in meshes and JAW_BONE in armature.bone_ids:
        out[JAW_MESH] = SkinWeights.rigid(meshes[JAW_MESH].n_vertices, armature.bone_ids, JAW_BONE)
    return out


def effective_ik_config(config: CompileConfig, armature: Armature) -> IkConfig:
    """Per-bone default limits (twist locked unless disabled), then explicit overrides."""
    if config.rig.lock_twist:
        default = JointLimit.swing_only(config.rig.max_swing_rad)
    else:
        default = JointLimit(max_swing=config.rig.max_swing_rad)
    limits = {b: default for b in armature.bone_ids}
    limits.update(config.ik.joint_limits)
    ik = config.ik
    return IkConfig(ik.max_iterations, ik.tolerance_mm, ik.damping_lambda, ik.step_clamp_rad, limits)


def coil_mesh(role: CoilRole, meshes: Mapping[str, TriMesh]) -> str | None:
    if role.articulator is Articulator.TONGUE:
        return TONGUE_MESH
    if role.articulator is Articulator.JAW and JAW_MESH in meshes:
        return JAW_MESH
    return None


def _phase_rig(st: _State) -> None:
    cfg = st.config
    st.binds = coil_bind_positions(cfg, st.traj)
    st.armature = build_rig(cfg, st.binds)
    st.weights = skin_meshes(cfg, st.armature, st.meshes)


def _phase_solve(st: _State) -> None:
    cfg = st.config
    frames = attach_targets(
        st.armature,
        cfg.coils,
        st.traj,
        cfg.registration,
        position_weight=cfg.position_weight,
        orientation_weight=cfg.orientation_weight,
        tongue_prefix=TONGUE_PREFIX,
        jaw_bone=JAW_BONE,
    )
    ik = effective_ik_config(cfg, st.armature)
    st.clip = solve_sequence(st.armature, frames, ik, st.traj.sample_rate_hz, cfg.warm_start)
    # held samples take the last valid target, as the solver did
    pos = np.array([[t.target_position for t in fr] for fr in frames])
    for f in range(1, len(pos)):
        bad = ~np.isfinite(pos[f]).all(axis=1)
        pos[f, bad] = pos[f - 1, bad]
    for f in range(len(pos) - 2, -1, -1):
        bad = ~np.isfinite(pos[f]).all(axis=1)
        pos[f, bad] = pos[f + 1, bad]
    st.targets = frames[0]
    st.asset = AnimatedModelAsset(
        meshes={k: v for k, v in st.meshes.items() if k != "reference"},
        armature=st.armature,
        weights=st.weights,
        clip=st.clip,
        topology=tuple(frames[0]),
        target_positions=pos,
        coils=tuple(
            CoilMarker(r.coil_id, r.articulator, r.chain_index, st.binds[r.coil_id], coil_mesh(r, st.meshes))
            for r in cfg.coils
        ),
        registration=cfg.registration,
        parameters={
            "ik": {**ik.to_dict(), "position_weight": cfg.position_weight,
                   "orientation_weight": cfg.orientation_weight, "warm_start": cfg.warm_start},
            "rig": cfg.to_dict()["rig"],
            "evaluation": cfg.evaluation.thresholds(),
        },
        provenance={
            "config_sha256": cfg.digest,
            "inputs": dict(sorted(st.input_hashes.items())),
            "tool_version": __version__,
        },
    )


@dataclass(frozen=True)
class Evaluation:
    series: tuple[MetricSeries, ...]
    gates: tuple[Gate, ...]
    scalars: dict[str, float]


def evaluate_asset(
    asset: AnimatedModelAsset,
    params: EvalParams,
    palate: TriMesh | None = None,
    reference: TriMesh | None = None,
    reference_frame: int | None = None,
) -> Evaluation:
    """Run every applicable metric and its gate."""
    series = target_surface_distance(asset)
    gates = [max_gate("target_distance", series, params.distance_mm)]
    clip = asset.clip
    scalars = {
        "solver.converged_fraction": float(np.mean(clip.converged)),
        "solver.max_residual_mm": float(np.max(clip.residuals_mm)),
        "solver.mean_iterations": float(np.mean(clip.iterations)),
        "solver.held_frames": float(np.count_nonzero(clip.held)),
    }
    if palate is not None:
        contact, depth = palate_contact(asset, palate, params.contact_eps_mm)
        series += [contact, depth]
        gates.append(max_gate("penetration", [depth], params.penetration_mm))
        if params.require_contact:
            gates.append(Gate("palate_contact", contact.name, 1.0, contact.summary["max"], at_least=True))
    if reference is not None:
        stats = pose_similarity(
            deformed_mesh(asset, TONGUE_MESH, reference_frame), reference, params.samples_per_triangle, params.seed
        )
        scalars.update({f"similarity.{k}": float(v) for k, v in stats.to_dict().items()})
        scalars["similarity.frame"] = float(reference_frame)
        gates.append(Gate("pose_similarity", "similarity.mean", params.similarity_mm, stats.mean))
    return Evaluation(tuple(series), tuple(gates), scalars)


def _phase_evaluate(st: _State, report: LifecycleReport, report_dir: Path | None) -> None:
    cfg = st.config
    if cfg.evaluation.reference_frame is not None and not 0 <= cfg.evaluation.reference_frame < st.clip.n_frames:
        raise _PhaseFailure("input", f"reference_frame {cfg.evaluation.reference_frame} out of range")
    ev = evaluate_asset(
        st.asset,
        cfg.evaluation,
        st.meshes.get("palate"),
        st.meshes.get("reference"),
        cfg.evaluation.reference_frame,
    )
    report.gates = list(ev.gates)
    report.scalars = dict(ev.scalars)
    prov = dict(st.asset.provenance)
    if report_dir is not None:
        report.evaluation = generate_report(
            ev.series, ev.gates, report_dir, scalars=ev.scalars, provenance=prov, seed=cfg.evaluation.seed
        )
    else:
        report.evaluation = EvalReport(ev.series, ev.gates, ev.scalars, prov, cfg.evaluation.seed)
    failed = [g for g in ev.gates if not g.passed]
    if failed:
        raise _PhaseFailure(
            "gate",
            "; ".join(f"gate {g.name} failed: {g.measured:.6g} vs threshold {g.threshold:g}" for g in failed),
        )


def compile(config: CompileConfig, out_path=None, report_dir=None) -> tuple[AnimatedModelAsset | None, LifecycleReport]:
    """Run the lifecycle; returns the asset (None on failure) and the report.

    A failed compile never leaves an asset at ``out_path``: a stale one from a
    previous run is removed. With ``report_dir`` the lifecycle document (and,
    once evaluation ran, the metric report) is written there.
    """
    out_path = None if out_path is None else Path(out_path)
    report_dir = None if report_dir is None else Path(report_dir)
    report = LifecycleReport()
    st = _State(config)
    steps = {
        "validate": lambda: _phase_validate(st),
        "rig": lambda: _phase_rig(st),
        "solve": lambda: _phase_solve(st),
        "evaluate": lambda: _phase_evaluate(st, report, report_dir),
        "package": lambda: write_asset(st.asset, out_path) if out_path is not None else None,
    }
    for name in PHASES:
        t0 = time.perf_counter()
        try:
            steps[name]()
        except _PhaseFailure as exc:
            report.fail(name, exc.kind, str(exc))
        except _INPUT_ERRORS as exc:
            report.fail(name, "input", f"{type(exc).__name__}: {exc}")
        except Exception as exc:  # noqa: BLE001 - surfaced as an internal error
            log.exception("internal error in phase %s", name)
            report.fail(name, "internal", f"{type(exc).__name__}: {exc}")
        report.timings_s[name] = time.perf_counter() - t0
        if report.phase(name).status == "failed":
            log.info("phase %-8s failed (%.3f s)", name, report.timings_s[name])
            break
        report.phase(name).status = "passed"
        log.info("phase %-8s passed (%.3f s)", name, report.timings_s[name])
    if not report.passed and out_path is not None:
        remove_asset(out_path)
    if report_dir is not None:
        write_files_atomically(report_dir, {"lifecycle.json": dumps_json(report.to_dict())})
    return (st.asset if report.passed else None), report


def verify_provenance(asset: AnimatedModelAsset, config: CompileConfig) -> list[str]:
    """Names of recorded inputs whose current file content no longer matches."""
    paths = {f"mesh.{k}": v for k, v in config.meshes.items()}
    paths["ema"] = config.ema.path
    if config.evaluation.reference_mesh is not None:
        paths["mesh.reference"] = config.evaluation.reference_mesh
    recorded = asset.provenance.get("inputs", {})
    bad = []
    for name, p in sorted(paths.items()):
        try:
            actual = sha256_file(p)
        except OSError:
            actual = None
        if recorded.get(name) != actual:
            bad.append(name)
    return bad

