import json

import numpy as np
import pytest

from vtanim.ema import parse_ema_csv
from vtanim.mesh import parse_obj
from vtanim.synth import (
    PALATE_Z,
    SCENARIOS,
    SynthError,
    generate,
    solve_two_link,
    two_link_problem,
)


@pytest.mark.parametrize("scenario", SCENARIOS)
def test_deterministic(scenario):
    a, b = generate(scenario, 12 if scenario != "two-link" else None), generate(scenario, 12 if scenario != "two-link" else None)
    assert a.files == b.files


def test_bind_is_static():
    traj = parse_ema_csv(generate("bind", 5).files["ema.csv"])
    assert np.all(traj.positions == traj.positions[0])


def test_fk_roundtrip_stays_below_palate():
    fx = generate("fk-roundtrip", 200, 7)
    traj = parse_ema_csv(fx.files["ema.csv"])
    assert traj.n_frames == 200 and traj.valid.all()
    assert fx.rotvecs.shape[0] == 200
    # the motion actually moves every tongue coil
    assert np.all(np.ptp(traj.positions[:, :3], axis=0).max(axis=-1) > 1.0)
    palate = parse_obj(fx.files["palate.obj"])
    assert np.all(palate.vertices[:, 2] == PALATE_Z)


def test_penetrate_expected_depth():
    fx = generate("penetrate", 30, depth_mm=0.3, peak_frame=10)
    expected = json.loads(fx.files["expected.json"])
    assert expected["peak_frame"] == 10 and expected["depth_mm"] == 0.3


def test_penetrate_rejects_bad_options():
    with pytest.raises(SynthError):
        generate("penetrate", 30, peak_frame=40)
    with pytest.raises(SynthError):
        generate("penetrate", 30, depth_mm=-1.0)


def test_unknown_scenario():
    with pytest.raises(SynthError, match="unknown scenario"):
        generate("bogus")


def test_two_link_analytic():
    problem = two_link_problem()
    out = solve_two_link(problem, "reachable")
    # closed form: elbow angle from the law of cosines, shoulder from the target bearing
    x, y, _ = problem["reachable"]["target"]
    l1, l2 = problem["bones"]
    c2 = (x * x + y * y - l1 * l1 - l2 * l2) / (2 * l1 * l2)
    q2 = np.arccos(c2)
    q1 = np.arctan2(y, x) - np.arctan2(l2 * np.sin(q2), l1 + l2 * np.cos(q2))
    np.testing.assert_allclose(out["angles_rad"], [q1, q2], atol=1e-3)
