"""EMA motion-capture trajectories: parsing, hygiene and writing.

Two on-disk formats are supported.

Canonical CSV (``ema-csv v1``)::

    ema-csv v1; rate=200
    coil:T1.x,coil:T1.y,coil:T1.z,coil:T1.ox,coil:T1.oy,coil:T1.oz,coil:T1.rms,...
    1.0,2.0,3.0,0,0,1,0.05,...

AG500-compatible ``.pos``: frame-major little-endian float32 records of
seven values per channel ``(x, y, z, phi, theta, rms, extra)``. ``phi`` is
the elevation and ``theta`` the azimuth, both in degrees, and the orientation
axis is ``(cos phi cos theta, cos phi sin theta, sin phi)``. Channel count and
sample rate are supplied out of band.

Positions are millimetres throughout; orientations are unit axis vectors.
"""

from __future__ import annotations

import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

CSV_MAGIC = "ema-csv v1"
CSV_FIELDS = ("x", "y", "z", "ox", "oy", "oz", "rms")
POS_VALUES_PER_CHANNEL = 7
POS_RECORD_DTYPE = np.dtype("<f4")
UNIT_TOL = 1e-6


class EmaFormatError(ValueError):
    """Raised for malformed EMA input; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class Articulator(str, Enum):
    TONGUE = "tongue"
    JAW = "jaw"
    REFERENCE = "reference"
    OTHER = "other"


@dataclass(frozen=True)
class CoilSample:
    position: np.ndarray
    orientation: np.ndarray
    rms_error: float
    valid: bool


@dataclass(frozen=True)
class CoilRole:
    coil_id: str
    articulator: Articulator
    chain_index: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "articulator", Articulator(self.articulator))
        if self.articulator is Articulator.TONGUE and self.chain_index is None:
            raise ValueError(f"tongue coil {self.coil_id!r} needs a chain_index")


def check_roles(roles: Sequence[CoilRole]) -> None:
    """Enforce unique coil ids and unique tongue chain indices."""
    ids = [r.coil_id for r in roles]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate coil ids in role map")
    chain = [r.chain_index for r in roles if r.articulator is Articulator.TONGUE]
    if len(set(chain)) != len(chain):
        raise ValueError("tongue chain indices must be unique")


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EmaTrajectory:
    """Per-coil samples at a fixed rate, stored as frame-major arrays.

    ``positions`` and ``orientations`` have shape (frames, coils, 3);
    ``rms`` and ``valid`` have shape (frames, coils).
    """

    coil_ids: tuple[str, ...]
    sample_rate_hz: float
    positions: np.ndarray
    orientations: np.ndarray
    rms: np.ndarray
    valid: np.ndarray

    def __post_init__(self) -> None:
        ids = tuple(self.coil_ids)
        object.__setattr__(self, "coil_ids", ids)
        if not ids or any(not isinstance(c, str) or not c for c in ids):
            raise ValueError("coil ids must be non-empty strings")
        if len(set(ids)) != len(ids):
            raise ValueError("coil ids must be unique")
        if not (self.sample_rate_hz > 0 and math.isfinite(self.sample_rate_hz)):
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "sample_rate_hz", float(self.sample_rate_hz))
        pos = _frozen(self.positions, float)
        ori = _frozen(self.orientations, float)
        rms = _frozen(self.rms, float)
        valid = _frozen(self.valid, bool)
        n_frames, n_coils = valid.shape if valid.ndim == 2 else (0, 0)
        if n_frames < 1:
            raise ValueError("trajectory needs at least one frame")
        if n_coils != len(ids) or pos.shape != (n_frames, n_coils, 3) or ori.shape != pos.shape:
            raise ValueError("array shapes do not match coil count")
        if rms.shape != valid.shape:
            raise ValueError("rms shape does not match")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "orientations", ori)
        object.__setattr__(self, "rms", rms)
        object.__setattr__(self, "valid", valid)

    @property
    def n_frames(self) -> int:
        return self.valid.shape[0]

    @property
    def n_coils(self) -> int:
        return len(self.coil_ids)

    @property
    def duration_s(self) -> float:
        return (self.n_frames - 1) / self.sample_rate_hz

    def coil_index(self, coil_id: str) -> int:
        try:
            return self.coil_ids.index(coil_id)
        except ValueError:
            raise KeyError(f"coil {coil_id!r} not in trajectory") from None

    def sample(self, frame: int, coil: int | str) -> CoilSample:
        c = self.coil_index(coil) if isinstance(coil, str) else coil
        return CoilSample(
            self.positions[frame, c].copy(),
            self.orientations[frame, c].copy(),
            float(self.rms[frame, c]),
            bool(self.valid[frame, c]),
        )

    def frames(self) -> Iterator[list[CoilSample]]:
        for f in range(self.n_frames):
            yield [self.sample(f, c) for c in range(self.n_coils)]

    def replace(self, **changes) -> EmaTrajectory:
        fields = dict(
            coil_ids=self.coil_ids,
            sample_rate_hz=self.sample_rate_hz,
            positions=self.positions,
            orientations=self.orientations,
            rms=self.rms,
            valid=self.valid,
        )
        fields.update(changes)
        return EmaTrajectory(**fields)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmaTrajectory):
            return NotImplemented
        return (
            self.coil_ids == other.coil_ids
            and self.sample_rate_hz == other.sample_rate_hz
            and np.array_equal(self.valid, other.valid)
            and np.array_equal(self.positions, other.positions, equal_nan=True)
            and np.array_equal(self.orientations, other.orientations, equal_nan=True)
            and np.array_equal(self.rms, other.rms, equal_nan=True)
        )


def _sample_validity(pos: np.ndarray, ori: np.ndarray, rms: np.ndarray) -> np.ndarray:
    finite = np.isfinite(pos).all(-1) & np.isfinite(ori).all(-1) & np.isfinite(rms)
    norms = np.linalg.norm(np.where(np.isfinite(ori), ori, 0.0), axis=-1)
    return finite & (norms > 0.5) & (rms >= 0)


def _normalize_axes(ori: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Renormalize valid axes that drift from unit length by more than 1e-9."""
    out = ori.copy()
    norms = np.linalg.norm(np.where(np.isfinite(ori), ori, 1.0), axis=-1)
    fix = valid & (np.abs(norms - 1.0) > 1e-9)
    out[fix] = ori[fix] / norms[fix][:, None]
    return out


def from_arrays(coil_ids, sample_rate_hz, positions, orientations, rms) -> EmaTrajectory:
    """Build a trajectory, deriving validity from the sample values."""
    pos = np.asarray(positions, dtype=float)
    ori = np.asarray(orientations, dtype=float)
    rms = np.asarray(rms, dtype=float)
    valid = _sample_validity(pos, ori, rms)
    return EmaTrajectory(tuple(coil_ids), sample_rate_hz, pos, _normalize_axes(ori, valid), rms, valid)


# --- canonical CSV -----------------------------------------------------------


def _parse_header(line: str, lineno: int) -> list[str]:
    coils: list[str] = []
    tokens = [t.strip() for t in line.split(",")]
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("coil:"):
            raise EmaFormatError(f"unexpected header column {tok!r}", lineno)
        name = tok[len("coil:") :]
        if "." not in name:
            # shorthand: one bare token stands for the seven columns
            if not name:
                raise EmaFormatError("empty coil id", lineno)
            coils.append(name)
            i += 1
            continue
        coil = name.rsplit(".", 1)[0]
        expected = [f"coil:{coil}.{f}" for f in CSV_FIELDS]
        if tokens[i : i + len(CSV_FIELDS)] != expected:
            raise EmaFormatError(
                f"coil {coil!r} columns must be {','.join(expected)}", lineno
            )
        if not coil:
            raise EmaFormatError("empty coil id", lineno)
        coils.append(coil)
        i += len(CSV_FIELDS)
    if not coils:
        raise EmaFormatError("header lists no coils", lineno)
    if len(set(coils)) != len(coils):
        raise EmaFormatError("duplicate coil ids in header", lineno)
    return coils


def parse_ema_csv(data: bytes) -> EmaTrajectory:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise EmaFormatError(f"not UTF-8: {exc}") from None
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if len(lines) < 2:
        raise EmaFormatError("missing magic/header lines", len(lines) + 1)

    magic = [p.strip() for p in lines[0].rstrip("\r").split(";")]
    if magic[0] != CSV_MAGIC or len(magic) != 2 or not magic[1].startswith("rate="):
        raise EmaFormatError(f"expected '{CSV_MAGIC}; rate=<hz>'", 1)
    try:
        rate = float(magic[1][len("rate=") :])
    except ValueError:
        raise EmaFormatError(f"bad sample rate {magic[1]!r}", 1) from None
    if not (rate > 0 and math.isfinite(rate)):
        raise EmaFormatError(f"sample rate must be positive, got {rate}", 1)

    coils = _parse_header(lines[1].rstrip("\r"), 2)
    width = len(coils) * len(CSV_FIELDS)
    rows = []
    for lineno, line in enumerate(lines[2:], start=3):
        line = line.rstrip("\r")
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != width:
            raise EmaFormatError(f"expected {width} columns, found {len(cells)}", lineno)
        try:
            rows.append([float(c) for c in cells])
        except ValueError as exc:
            raise EmaFormatError(str(exc), lineno) from None
    if not rows:
        raise EmaFormatError("no data rows", len(lines) + 1)
    table = np.array(rows, dtype=float).reshape(len(rows), len(coils), len(CSV_FIELDS))
    return from_arrays(coils, rate, table[..., 0:3], table[..., 3:6], table[..., 6])


def write_ema_csv(traj: EmaTrajectory) -> bytes:
    """Serialize to canonical CSV; invalid samples are written as ``nan``."""
    header = ",".join(f"coil:{c}.{f}" for c in traj.coil_ids for f in CSV_FIELDS)
    out = [f"{CSV_MAGIC}; rate={traj.sample_rate_hz!r}", header]
    table = np.concatenate(
        [traj.positions, traj.orientations, traj.rms[..., None]], axis=-1
    ).copy()
    table[~traj.valid] = np.nan
    for row in table.reshape(traj.n_frames, -1):
        out.append(",".join(repr(float(v)) for v in row))
    return ("\n".join(out) + "\n").encode("utf-8")


# --- AG500 .pos ----------------------------------------------------------------


def angles_to_axis(phi_deg: np.ndarray, theta_deg: np.ndarray) -> np.ndarray:
    phi = np.radians(np.asarray(phi_deg, dtype=float))
    theta = np.radians(np.asarray(theta_deg, dtype=float))
    cp = np.cos(phi)
    axis = np.stack([cp * np.cos(theta), cp * np.sin(theta), np.sin(phi)], axis=-1)
    pole = np.abs(np.asarray(phi_deg, dtype=float)) == 90.0
    if np.any(pole):
        axis[pole] = np.stack(
            [np.zeros(pole.sum()), np.zeros(pole.sum()), np.sign(np.asarray(phi_deg)[pole])], -1
        )
    return axis


def axis_to_angles(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`angles_to_axis` with phi in [-90, 90], theta in (-180, 180].

    theta is emitted as 0 wherever phi rounds to +-90 in float32.
    """
    axis = np.asarray(axis, dtype=float)
    horiz = np.hypot(axis[..., 0], axis[..., 1])
    phi = np.degrees(np.arctan2(axis[..., 2], horiz))
    theta = np.degrees(np.arctan2(axis[..., 1], axis[..., 0]))
    theta = np.where(theta <= -180.0, 180.0, theta)
    pole = np.abs(phi.astype(np.float32)) == np.float32(90.0)
    theta = np.where(pole, 0.0, theta)
    return phi, theta


def parse_ag500_pos(data: bytes, channel_count: int, sample_rate_hz: float) -> EmaTrajectory:
    if channel_count < 1:
        raise EmaFormatError(f"channel count must be >= 1, got {channel_count}")
    record = channel_count * POS_VALUES_PER_CHANNEL * POS_RECORD_DTYPE.itemsize
    if len(data) == 0 or len(data) % record:
        n = max(1, -(-len(data) // record))
        raise EmaFormatError(
            f"byte length {len(data)} is not a multiple of the {record}-byte frame record "
            f"(expected {n * record} bytes for {n} frame(s))"
        )
    raw = np.frombuffer(data, dtype=POS_RECORD_DTYPE).astype(float)
    raw = raw.reshape(-1, channel_count, POS_VALUES_PER_CHANNEL)
    ids = [f"ch{i + 1:02d}" for i in range(channel_count)]
    with np.errstate(invalid="ignore"):
        axis = angles_to_axis(raw[..., 3], raw[..., 4])
    return from_arrays(ids, sample_rate_hz, raw[..., 0:3], axis, raw[..., 5])


def write_ag500_pos(traj: EmaTrajectory) -> bytes:
    if not traj.valid.all():
        bad = np.argwhere(~traj.valid)[0]
        raise ValueError(
            f"cannot write .pos with invalid samples (first at frame {bad[0]}, "
            f"coil {traj.coil_ids[bad[1]]!r}); interpolate or drop them first"
        )
    phi, theta = axis_to_angles(traj.orientations)
    out = np.zeros((traj.n_frames, traj.n_coils, POS_VALUES_PER_CHANNEL))
    out[..., 0:3] = traj.positions
    out[..., 3] = phi
    out[..., 4] = theta
    out[..., 5] = traj.rms
    return out.astype(POS_RECORD_DTYPE).tobytes()


# --- hygiene -------------------------------------------------------------------


@dataclass(frozen=True)
class DropoutRun:
    coil_id: str
    start: int
    length: int

    @property
    def stop(self) -> int:
        return self.start + self.length


@dataclass(frozen=True)
class ValidationSummary:
    status: str
    flagged: tuple[tuple[int, str], ...]
    runs: tuple[DropoutRun, ...]
    trajectory: EmaTrajectory = field(repr=False)
    max_rms_mm: float = 0.0
    max_gap_frames: int = 0

    @property
    def ok(self) -> bool:
        return self.status == "pass"


def _invalid_runs(valid_col: np.ndarray) -> list[tuple[int, int]]:
    runs = []
    start = None
    for i, ok in enumerate(valid_col):
        if not ok and start is None:
            start = i
        elif ok and start is not None:
            runs.append((start, i - start))
            start = None
    if start is not None:
        runs.append((start, len(valid_col) - start))
    return runs


def validate(traj: EmaTrajectory, max_rms_mm: float, max_gap_frames: int) -> ValidationSummary:
    """Flag high-error samples and report per-coil dropout runs.

    The result carries a copy of the trajectory with flagged samples marked
    invalid; the input is never modified. Status is ``"fail"`` when any run
    of invalid samples is longer than ``max_gap_frames``.
    """
    with np.errstate(invalid="ignore"):
        over = traj.valid & (traj.rms > max_rms_mm)
    flagged = tuple((int(f), traj.coil_ids[c]) for f, c in np.argwhere(over))
    valid = traj.valid & ~over
    runs = []
    for c, coil in enumerate(traj.coil_ids):
        runs.extend(DropoutRun(coil, s, n) for s, n in _invalid_runs(valid[:, c]))
    status = "fail" if any(r.length > max_gap_frames for r in runs) else "pass"
    return ValidationSummary(
        status=status,
        flagged=flagged,
        runs=tuple(runs),
        trajectory=traj.replace(valid=valid),
        max_rms_mm=max_rms_mm,
        max_gap_frames=max_gap_frames,
    )


def slerp_axes(a: np.ndarray, b: np.ndarray, t) -> np.ndarray:
    """Spherical interpolation between unit axes; ``t`` broadcasts.

    Antiparallel endpoints have no unique great circle and fall back to a
    fixed perpendicular plane.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    t = np.asarray(t, dtype=float)[..., None]
    dot = np.clip(np.sum(a * b, axis=-1, keepdims=True), -1.0, 1.0)
    omega = np.arccos(dot)
    so = np.sin(omega)
    near = so < 1e-9
    safe = np.where(near, 1.0, so)
    wa = np.where(near, 1.0 - t, np.sin((1.0 - t) * omega) / safe)
    wb = np.where(near, t, np.sin(t * omega) / safe)
    out = wa * a + wb * b
    anti = near & (dot < 0)
    if np.any(anti):
        perp = np.cross(a, np.array([1.0, 0.0, 0.0]))
        perp = np.where(np.linalg.norm(perp, axis=-1, keepdims=True) < 1e-6,
                        np.cross(a, np.array([0.0, 1.0, 0.0])), perp)
        perp /= np.linalg.norm(perp, axis=-1, keepdims=True)
        ang = t * np.pi
        alt = np.cos(ang) * a + np.sin(ang) * perp
        out = np.where(anti, alt, out)
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def interpolate_gaps(traj: EmaTrajectory, max_gap_frames: int) -> EmaTrajectory:
    """Fill invalid runs by lerp (positions) and slerp (orientations)."""
    if traj.valid.all():
        return traj
    pos = traj.positions.copy()
    ori = traj.orientations.copy()
    rms = traj.rms.copy()
    n = traj.n_frames
    for c, coil in enumerate(traj.coil_ids):
        for start, length in _invalid_runs(traj.valid[:, c]):
            stop = start + length
            where = f"coil {coil!r} frames {start}..{stop - 1}"
            if start == 0 or stop == n:
                raise ValueError(f"cannot interpolate gap at sequence boundary: {where}")
            if length > max_gap_frames:
                raise ValueError(f"gap of {length} frames exceeds {max_gap_frames}: {where}")
            lo, hi = start - 1, stop
            t = (np.arange(start, stop) - lo) / (hi - lo)
            pos[start:stop, c] = pos[lo, c] + t[:, None] * (pos[hi, c] - pos[lo, c])
            ori[start:stop, c] = slerp_axes(ori[lo, c], ori[hi, c], t)
            rms[start:stop, c] = rms[lo, c] + t * (rms[hi, c] - rms[lo, c])
    return traj.replace(
        positions=pos, orientations=ori, rms=rms, valid=np.ones_like(traj.valid)
    )


def _require_valid(traj: EmaTrajectory, op: str) -> None:
    if not traj.valid.all():
        raise ValueError(f"{op} requires all samples valid; run interpolate_gaps first")


def smooth(traj: EmaTrajectory, window_frames: int) -> EmaTrajectory:
    """Centered moving average; edges shrink the window symmetrically."""
    if window_frames < 1 or window_frames % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window_frames}")
    if window_frames > traj.n_frames:
        raise ValueError(f"window {window_frames} exceeds frame count {traj.n_frames}")
    _require_valid(traj, "smooth")
    if window_frames == 1:
        return traj
    half = window_frames // 2
    n = traj.n_frames
    pos = np.empty_like(traj.positions)
    ori = np.empty_like(traj.orientations)
    if n > 2 * half:
        win_p = np.lib.stride_tricks.sliding_window_view(traj.positions, window_frames, axis=0)
        win_o = np.lib.stride_tricks.sliding_window_view(traj.orientations, window_frames, axis=0)
        pos[half : n - half] = win_p.mean(axis=-1)
        ori[half : n - half] = win_o.mean(axis=-1)
    for i in (*range(min(half, n)), *range(max(n - half, half), n)):
        h = min(half, i, n - 1 - i)
        pos[i] = traj.positions[i - h : i + h + 1].mean(axis=0)
        ori[i] = traj.orientations[i - h : i + h + 1].mean(axis=0)
    ori /= np.linalg.norm(ori, axis=-1, keepdims=True)
    return traj.replace(positions=pos, orientations=ori)


def resample(traj: EmaTrajectory, target_hz: float) -> EmaTrajectory:
    """Uniform resampling over the original duration; frame 0 is kept exactly."""
    if not (target_hz > 0 and math.isfinite(target_hz)):
        raise ValueError(f"target rate must be positive, got {target_hz}")
    _require_valid(traj, "resample")
    n_src = traj.n_frames
    n_out = int(math.floor((n_src - 1) * target_hz / traj.sample_rate_hz + 1e-9)) + 1
    # source-frame coordinate of each output frame
    u = np.arange(n_out) * traj.sample_rate_hz / target_hz
    i0 = np.minimum(np.floor(u).astype(int), max(n_src - 2, 0))
    frac = u - i0
    if n_src == 1:
        i1 = i0
        frac = np.zeros_like(u)
    else:
        i1 = i0 + 1
    p0, p1 = traj.positions[i0], traj.positions[i1]
    pos = p0 + frac[:, None, None] * (p1 - p0)
    exact = frac == 0.0
    pos[exact] = traj.positions[i0[exact]]
    ori = slerp_axes(
        traj.orientations[i0], traj.orientations[i1], np.broadcast_to(frac[:, None], i0.shape + (traj.n_coils,))
    )
    ori[exact] = traj.orientations[i0[exact]]
    r0, r1 = traj.rms[i0], traj.rms[i1]
    rms = r0 + frac[:, None] * (r1 - r0)
    return EmaTrajectory(
        traj.coil_ids, target_hz, pos, ori, rms, np.ones((n_out, traj.n_coils), dtype=bool)
    )
