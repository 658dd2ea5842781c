import json
import subprocess
import sys

import numpy as np
import pytest

from vtanim.asset import read_asset
from vtanim.cli import build_parser, main
from vtanim.ema import parse_ag500_pos, parse_ema_csv
from vtanim.evaluation import deformed_mesh
from vtanim.mesh import write_obj
from vtanim.synth import JAW_COIL, TONGUE_COILS

from conftest import make_fixture


@pytest.fixture(scope="module")
def bind_asset(tmp_path_factory):
    root = make_fixture("bind", tmp_path_factory.mktemp("cli_bind"))
    assert main(["compile", str(root / "config.json"), "--out", str(root / "model.json")]) == 0
    return root


@pytest.fixture(scope="module")
def penetrate_asset(tmp_path_factory):
    """Penetrate fixture compiled without a palate, so an asset exists to evaluate."""
    root = make_fixture("penetrate", tmp_path_factory.mktemp("cli_pen"))
    doc = json.loads((root / "config.json").read_text())
    del doc["meshes"]["palate"]
    (root / "config.json").write_text(json.dumps(doc))
    assert main(["compile", str(root / "config.json"), "--out", str(root / "model.json")]) == 0
    return root


# --- compile ----------------------------------------------------------------------------------


def test_compile_success(tmp_path, capsys):
    root = make_fixture("bind", tmp_path)
    code = main(["compile", str(root / "config.json"), "--out", str(root / "a.json"), "--report-dir", str(root / "r")])
    assert code == 0 and (root / "a.json").exists() and (root / "r" / "lifecycle.json").exists()
    err = capsys.readouterr().err
    for phase in ("validate", "rig", "solve", "evaluate", "package"):
        assert phase in err


def test_compile_gate_failure(tmp_path):
    root = make_fixture("penetrate", tmp_path)
    code = main(["compile", str(root / "config.json"), "--out", str(root / "a.json"), "--report-dir", str(root / "r")])
    assert code == 2
    assert (root / "r" / "lifecycle.json").exists() and not (root / "a.json").exists()


def test_compile_missing_mesh(tmp_path, capsys):
    root = make_fixture("bind", tmp_path)
    (root / "tongue.obj").unlink()
    assert main(["compile", str(root / "config.json"), "--out", str(root / "a.json")]) == 3
    assert str(root / "tongue.obj") in capsys.readouterr().err


def test_compile_missing_config(tmp_path):
    assert main(["compile", str(tmp_path / "none.json")]) == 3


def test_compile_bad_json(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    assert main(["compile", str(tmp_path / "c.json")]) == 3


# --- dump -----------------------------------------------------------------------------------------


def test_dump_csv_bind_positions(bind_asset, tmp_path):
    out = tmp_path / "d.csv"
    assert main(["dump", str(bind_asset / "model.json"), "--format", "csv", "--out", str(out)]) == 0
    traj = parse_ema_csv(out.read_bytes())
    want = np.vstack([TONGUE_COILS, JAW_COIL])
    assert np.abs(traj.positions - want).max() < 1e-9


def test_dump_pos_roundtrip(tmp_path, fk_fixture):
    root, asset, _ = fk_fixture
    out = tmp_path / "d.pos"
    assert main(["dump", str(root / "out" / "model.json"), "--format", "pos", "--out", str(out)]) == 0
    main(["dump", str(root / "out" / "model.json"), "--format", "csv", "--out", str(tmp_path / "d.csv")])
    ref = parse_ema_csv((tmp_path / "d.csv").read_bytes())
    traj = parse_ag500_pos(out.read_bytes(), ref.n_coils, ref.sample_rate_hz)
    assert np.abs(traj.positions - ref.positions).max() <= 1e-5


def test_dump_unknown_format(bind_asset, tmp_path):
    assert main(["dump", str(bind_asset / "model.json"), "--format", "xml", "--out", str(tmp_path / "x")]) == 3


def test_dump_missing_asset(tmp_path):
    assert main(["dump", str(tmp_path / "no.json"), "--format", "csv", "--out", str(tmp_path / "x")]) == 3


# --- evaluate ---------------------------------------------------------------------------------------


def test_evaluate_separated_palate(bind_asset, tmp_path):
    code = main(["evaluate", str(bind_asset / "model.json"), "--palate", str(bind_asset / "palate.obj"),
                 "--report-dir", str(tmp_path / "r")])
    assert code == 0
    doc = json.loads((tmp_path / "r" / "summary.json").read_text())
    assert doc["status"] == "pass"


def test_evaluate_reference_equals_deformed(penetrate_asset, tmp_path):
    asset = read_asset(penetrate_asset / "model.json")
    (tmp_path / "ref.obj").write_bytes(write_obj(deformed_mesh(asset, "tongue", 10)))
    code = main(["evaluate", str(penetrate_asset / "model.json"), "--reference-mesh", str(tmp_path / "ref.obj"),
                 "--frame", "10", "--report-dir", str(tmp_path / "r")])
    assert code == 0
    doc = json.loads((tmp_path / "r" / "summary.json").read_text())
    sim = {k: v for k, v in doc["scalars"].items() if k.startswith("similarity.") and k != "similarity.frame"}
    assert sim and all(abs(v) < 1e-9 for k, v in sim.items() if k != "similarity.sample_count")


def test_evaluate_reference_needs_frame(bind_asset):
    assert main(["evaluate", str(bind_asset / "model.json"), "--reference-mesh", str(bind_asset / "tongue.obj")]) == 3


def test_evaluate_frame_out_of_range(bind_asset):
    args = ["evaluate", str(bind_asset / "model.json"), "--reference-mesh", str(bind_asset / "tongue.obj")]
    assert main(args + ["--frame", "999"]) == 3


def test_evaluate_penetration(penetrate_asset, tmp_path):
    code = main(["evaluate", str(penetrate_asset / "model.json"), "--palate", str(penetrate_asset / "palate.obj"),
                 "--report-dir", str(tmp_path / "r")])
    assert code == 2
    rows = (tmp_path / "r" / "penetration.csv").read_text().strip().split("\n")[1:]
    depth = np.array([float(r.split(",")[2]) for r in rows])
    assert int(np.argmax(depth)) == 10 and abs(depth[10] - 0.3) <= 1e-6
    assert np.all(np.delete(depth, 10) == 0.0)


def test_evaluate_threshold_override(penetrate_asset):
    args = ["evaluate", str(penetrate_asset / "model.json"), "--palate", str(penetrate_asset / "palate.obj")]
    assert main(args + ["--penetration-mm", "0.5"]) == 0
    assert main(args + ["--penetration-mm", "-1"]) == 3


# --- inspect ----------------------------------------------------------------------------------------------


def test_inspect(bind_asset, tmp_path, capsys):
    assert main(["inspect", str(bind_asset / "model.json"), "--out", str(tmp_path / "i.json")]) == 0
    out = capsys.readouterr().out
    assert "tongue" in out and "jaw" in out
    info = json.loads((tmp_path / "i.json").read_text())
    assert info["clip"]["frames"] == 20 and info["clip"]["converged_fraction"] == 1.0


# --- synth ---------------------------------------------------------------------------------------------------


def test_synth_deterministic(tmp_path):
    for d in ("a", "b"):
        assert main(["synth", "fk-roundtrip", "--frames", "500", "--seed", "7", "--out-dir", str(tmp_path / d)]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_synth_seed_changes_motion(tmp_path):
    main(["synth", "fk-roundtrip", "--frames", "50", "--seed", "1", "--out-dir", str(tmp_path / "a")])
    main(["synth", "fk-roundtrip", "--frames", "50", "--seed", "2", "--out-dir", str(tmp_path / "b")])
    assert (tmp_path / "a" / "ema.csv").read_bytes() != (tmp_path / "b" / "ema.csv").read_bytes()


def test_synth_unknown_scenario(tmp_path):
    assert main(["synth", "nope", "--out-dir", str(tmp_path)]) == 3


def test_synth_bad_frames(tmp_path):
    assert main(["synth", "bind", "--frames", "0", "--out-dir", str(tmp_path)]) == 3


def test_synth_two_link(tmp_path):
    assert main(["synth", "two-link", "--out-dir", str(tmp_path)]) == 0
    problem = json.loads((tmp_path / "problem.json").read_text())
    assert problem["reachable"]["target"] == [1.0, 1.0, 0.0]
    assert parse_ema_csv((tmp_path / "targets.csv").read_bytes()).n_frames == 2


# --- parser ------------------------------------------------------------------------------------------------------


def _flags(parser):
    return {s for a in parser._actions for s in a.option_strings}


def test_help_lists_every_flag():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction")
    for name, p in sub.choices.items():
        text = p.format_help()
        for flag in _flags(p):
            assert flag in text, (name, flag)
    out = subprocess.run([sys.executable, "-m", "vtanim.cli", "compile", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "--report-dir" in out.stdout


@pytest.mark.parametrize("argv", [["compile", "c.json", "--bogus"], ["--nope"], [], ["synth"]])
def test_usage_errors_exit_3(argv):
    assert main(argv) == 3


def test_console_script_version():
    out = subprocess.run([sys.executable, "-m", "vtanim.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("vtanim ")
