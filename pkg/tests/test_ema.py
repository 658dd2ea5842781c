import math

import numpy as np
import pytest
from hypothesis import given, settings

from ag500_strategies import pos_buffers
from vtanim.ema import (
    EmaFormatError,
    EmaTrajectory,
    from_arrays,
    interpolate_gaps,
    parse_ag500_pos,
    parse_ema_csv,
    resample,
    smooth,
    validate,
    write_ag500_pos,
    write_ema_csv,
)


def traj_of(positions, orientations=None, rms=None, rate=200.0, ids=None):
    pos = np.asarray(positions, dtype=float)
    if pos.ndim == 2:
        pos = pos[:, None, :]
    ori = np.broadcast_to([1.0, 0.0, 0.0], pos.shape) if orientations is None else np.asarray(orientations, float)
    r = np.full(pos.shape[:2], 0.05) if rms is None else np.asarray(rms, float)
    ids = ids or [f"C{i}" for i in range(pos.shape[1])]
    return from_arrays(ids, rate, pos, ori, r)


def random_traj(rng, frames=50, coils=3, rate=200.0):
    pos = rng.normal(scale=20.0, size=(frames, coils, 3))
    ori = rng.normal(size=(frames, coils, 3))
    ori /= np.linalg.norm(ori, axis=-1, keepdims=True)
    return from_arrays([f"C{i}" for i in range(coils)], rate, pos, ori, rng.uniform(0, 0.5, (frames, coils)))


# --- canonical CSV ------------------------------------------------------------


def test_csv_single_row():
    t = parse_ema_csv(b"ema-csv v1; rate=200\ncoil:T1\n1.0,2.0,3.0,0,0,1,0.05\n")
    assert t.n_frames == 1 and t.coil_ids == ("T1",)
    np.testing.assert_array_equal(t.positions[0, 0], [1, 2, 3])
    np.testing.assert_array_equal(t.orientations[0, 0], [0, 0, 1])
    assert t.sample_rate_hz == 200.0


def test_csv_nan_invalidates_only_that_coil():
    data = b"ema-csv v1; rate=200\ncoil:A,coil:B\nnan,2,3,1,0,0,0.1,4,5,6,1,0,0,0.1\n"
    t = parse_ema_csv(data)
    assert t.valid.tolist() == [[False, True]]
    np.testing.assert_array_equal(t.positions[0, 1], [4, 5, 6])


def test_csv_shape(rng):
    t = random_traj(rng, frames=100, coils=3)
    back = parse_ema_csv(write_ema_csv(t))
    assert (back.n_frames, back.n_coils) == (100, 3)
    assert back == t


def test_csv_long_header_form():
    cols = ",".join(f"coil:T1.{f}" for f in ("x", "y", "z", "ox", "oy", "oz", "rms"))
    t = parse_ema_csv(f"ema-csv v1; rate=100\n{cols}\n1,2,3,0,1,0,0\n".encode())
    np.testing.assert_array_equal(t.orientations[0, 0], [0, 1, 0])


@pytest.mark.parametrize(
    "data, line",
    [
        (b"ema-csv v2; rate=200\ncoil:T1\n1,2,3,1,0,0,0\n", 1),
        (b"ema-csv v1; rate=-5\ncoil:T1\n1,2,3,1,0,0,0\n", 1),
        (b"ema-csv v1; rate=200\nT1\n1,2,3,1,0,0,0\n", 2),
        (b"ema-csv v1; rate=200\ncoil:T1\n1,2,3,1,0,0,0\n1,2,3\n", 4),
        (b"ema-csv v1; rate=200\ncoil:T1\n1,2,x,1,0,0,0\n", 3),
    ],
)
def test_csv_errors_name_the_line(data, line):
    with pytest.raises(EmaFormatError) as exc:
        parse_ema_csv(data)
    assert exc.value.line == line
    assert f"line {line}" in str(exc.value)


# --- AG500 .pos -------------------------------------------------------------------


def test_pos_identity_sample():
    t = parse_ag500_pos(np.array([1, 2, 3, 0, 0, 0.1, 0], "<f4").tobytes(), 1, 200.0)
    np.testing.assert_array_equal(t.positions[0, 0], [1, 2, 3])
    np.testing.assert_array_equal(t.orientations[0, 0], [1, 0, 0])
    assert t.rms[0, 0] == pytest.approx(0.1, abs=1e-7)


def test_pos_pole():
    t = parse_ag500_pos(np.array([0, 0, 0, 90, 0, 0, 0], "<f4").tobytes(), 1, 200.0)
    np.testing.assert_allclose(t.orientations[0, 0], [0, 0, 1], atol=1e-6)


def test_pos_write_single_sample():
    t = traj_of([[1.0, 2.0, 3.0]], rms=[[0.1]])
    raw = write_ag500_pos(t)
    assert len(raw) == 28
    np.testing.assert_array_equal(np.frombuffer(raw, "<f4"), np.array([1, 2, 3, 0, 0, 0.1, 0], "<f4"))


def test_pos_write_pole_convention():
    t = traj_of([[0.0, 0.0, 0.0]], orientations=[[[0.0, 0.0, 1.0]]])
    vals = np.frombuffer(write_ag500_pos(t), "<f4")
    assert vals[3] == 90.0 and vals[4] == 0.0


def test_pos_length_error_reports_sizes():
    with pytest.raises(EmaFormatError, match="not a multiple of the 56-byte frame record"):
        parse_ag500_pos(b"\0" * 60, 2, 200.0)


def test_pos_refuses_invalid_samples():
    t = traj_of([[np.nan, 0.0, 0.0], [1.0, 0.0, 0.0]])
    with pytest.raises(ValueError, match="invalid samples"):
        write_ag500_pos(t)


def test_pos_random_trajectory_roundtrip(rng):
    t = random_traj(rng, frames=40, coils=4)
    back = parse_ag500_pos(write_ag500_pos(t), 4, t.sample_rate_hz)
    np.testing.assert_allclose(back.positions, t.positions, atol=1e-5 * 20, rtol=1e-6)
    np.testing.assert_allclose(back.orientations, t.orientations, atol=1e-5)
    np.testing.assert_allclose(back.rms, t.rms, atol=1e-5)


@settings(max_examples=300, deadline=None)
@given(pos_buffers())
def test_pos_bytes_roundtrip(buf):
    data, channels = buf
    assert write_ag500_pos(parse_ag500_pos(data, channels, 200.0)) == data


@settings(max_examples=100, deadline=None)
@given(pos_buffers())
def test_parsed_axes_are_unit(buf):
    data, channels = buf
    t = parse_ag500_pos(data, channels, 200.0)
    assert np.all(np.abs(np.linalg.norm(t.orientations, axis=-1) - 1.0) < 1e-6)


# --- hygiene ------------------------------------------------------------------------


def test_validate_clean():
    t = traj_of(np.zeros((10, 3)), rms=np.full((10, 1), 0.05))
    s = validate(t, 0.3, 5)
    assert s.flagged == () and s.status == "pass"


def test_validate_single_flag():
    rms = np.full((10, 1), 0.05)
    rms[4] = 0.5
    s = validate(traj_of(np.zeros((10, 3)), rms=rms), 0.3, 5)
    assert s.flagged == ((4, "C0"),)
    assert [(r.start, r.length) for r in s.runs] == [(4, 1)]
    assert s.status == "pass"


def test_validate_long_run_fails_and_does_not_mutate():
    pos = np.zeros((20, 3))
    pos[5:15] = np.nan
    t = traj_of(pos)
    before = t.valid.copy()
    s = validate(t, 0.3, 5)
    assert s.status == "fail"
    np.testing.assert_array_equal(t.valid, before)


def test_interpolate_midpoint():
    t = traj_of([[0, 0, 0], [np.nan, 0, 0], [2, 0, 0]])
    np.testing.assert_allclose(interpolate_gaps(t, 5).positions[1, 0], [1, 0, 0])


def test_interpolate_identity_when_clean(rng):
    t = random_traj(rng)
    assert interpolate_gaps(t, 5) == t


def test_interpolate_slerp_midpoint():
    pos = [[0, 0, 0], [np.nan, 0, 0], [0, 0, 0]]
    ori = [[[1, 0, 0]], [[1, 0, 0]], [[0, 1, 0]]]
    out = interpolate_gaps(traj_of(pos, orientations=ori), 5)
    h = math.sqrt(2) / 2
    np.testing.assert_allclose(out.orientations[1, 0], [h, h, 0], atol=1e-6)


def test_interpolate_idempotent(rng):
    pos = rng.normal(size=(30, 3))
    pos[[3, 4, 10, 20, 21, 22]] = np.nan
    once = interpolate_gaps(traj_of(pos), 5)
    assert interpolate_gaps(once, 5) == once


@pytest.mark.parametrize("pos", [[[np.nan, 0, 0], [1, 0, 0]], [[0, 0, 0]] + [[np.nan, 0, 0]] * 6 + [[1, 0, 0]]])
def test_interpolate_errors_name_coil_and_frames(pos):
    with pytest.raises(ValueError, match=r"coil 'C0' frames \d+\.\.\d+"):
        interpolate_gaps(traj_of(pos), 5)


def test_smooth_constant_unchanged():
    t = traj_of(np.tile([1.0, 2.0, 3.0], (9, 1)))
    out = smooth(t, 5)
    np.testing.assert_allclose(out.positions, t.positions, atol=1e-12)


def test_smooth_arithmetic_mean():
    out = smooth(traj_of([[0, 0, 0], [3, 0, 0], [0, 0, 0]]), 3)
    assert out.positions[1, 0, 0] == pytest.approx(1.0)


def test_smooth_reduces_noise_variance():
    rng = np.random.default_rng(3)
    t = traj_of(rng.normal(size=(500, 3)))
    assert smooth(t, 5).positions.var() < t.positions.var()


@pytest.mark.parametrize("window", [2, 0, 11])
def test_smooth_bad_window(window):
    with pytest.raises(ValueError):
        smooth(traj_of(np.zeros((10, 3))), window)


def test_smooth_and_resample_keep_coils(rng):
    t = random_traj(rng, frames=21, coils=3)
    for out in (smooth(t, 3), resample(t, 333.0)):
        assert out.coil_ids == t.coil_ids
        assert np.all(np.abs(np.linalg.norm(out.orientations, axis=-1) - 1) < 1e-6)


def test_resample_same_rate_identity(rng):
    t = random_traj(rng)
    out = resample(t, t.sample_rate_hz)
    np.testing.assert_allclose(out.positions, t.positions, atol=1e-9)
    np.testing.assert_allclose(out.orientations, t.orientations, atol=1e-9)


def test_resample_midpoint():
    out = resample(traj_of([[0, 0, 0], [1, 0, 0]], rate=100.0), 200.0)
    assert out.n_frames == 3
    np.testing.assert_allclose(out.positions[1, 0], [0.5, 0, 0])


def test_resample_ramp_down_up():
    n = 201
    t = traj_of(np.column_stack([np.linspace(0, 10, n), np.zeros(n), np.zeros(n)]), rate=200.0)
    back = resample(resample(t, 100.0), 200.0)
    assert back.n_frames == n
    assert np.abs(back.positions - t.positions).max() < 1e-9


def test_resample_bad_rate():
    with pytest.raises(ValueError):
        resample(traj_of([[0, 0, 0]]), 0.0)


def test_trajectory_rejects_bad_rate():
    with pytest.raises(ValueError):
        EmaTrajectory(("a",), 0.0, np.zeros((1, 1, 3)), np.zeros((1, 1, 3)), np.zeros((1, 1)), np.ones((1, 1), bool))
