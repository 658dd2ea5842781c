from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from vtanim import kernels
from vtanim.compiler import compile, load_config
from vtanim.synth import generate, write_fixture

_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(params=sorted(kernels.available_backends()))
def backend(request, monkeypatch):
    """Run the test once per available geometry kernel."""
    monkeypatch.setattr(kernels, "impl", kernels.available_backends()[request.param])
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_fixture(scenario: str, out_dir: Path, **kw) -> Path:
    write_fixture(generate(scenario, **kw), out_dir)
    return out_dir


@pytest.fixture(scope="session")
def fk_fixture(tmp_path_factory):
    """The fk-roundtrip fixture (500 frames, seed 7), compiled once per session."""
    root = tmp_path_factory.mktemp("fk")
    make_fixture("fk-roundtrip", root, frames=500, seed=7)
    asset, report = compile(load_config(root / "config.json"), root / "out" / "model.json", root / "report")
    return root, asset, report


@pytest.fixture(scope="session")
def bind_fixture(tmp_path_factory):
    root = tmp_path_factory.mktemp("bind")
    make_fixture("bind", root)
    asset, report = compile(load_config(root / "config.json"), root / "out" / "model.json", root / "report")
    return root, asset, report


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  ({detail})"
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
