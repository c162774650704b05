import json
from pathlib import Path

import pytest

from ideloop.harness import RunConfig


@pytest.fixture
def seed_dir(tmp_path):
    """A small seed workspace with one notebook, one script, one file."""
    seed = tmp_path / "seed"
    seed.mkdir()
    (seed / "README.txt").write_text("task notes\n")
    (seed / "train.sim").write_text("print start\nloss 1.0\nsleep 3\nloss 0.5\nexit 0\n")
    (seed / "sleeper.sim").write_text("sleep 100\nexit 0\n")
    (seed / "nb.ipynb").write_text(json.dumps({"cells": [{"source": "print hi\nexit 0"}, {"source": "sleep 2\nexit 0"}]}))
    return seed


@pytest.fixture
def make_config(seed_dir):
    def _make(script=(), **overrides):
        data = {
            "task_id": "t",
            "workspace": str(seed_dir),
            "budget": {"max_ticks": 500},
            "policy": {"kind": "scripted", "script": list(script)},
        }
        data.update(overrides)
        return RunConfig.from_dict(data)

    return _make


def load_history(run_dir: Path) -> dict:
    return json.loads((Path(run_dir) / "full_history.json").read_text())


# -- acceptance summary --------------------------------------------------------

ACCEPTANCE_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion summary line")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    number, title = marker.args
    ACCEPTANCE_RESULTS[number] = (title, report.passed, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        title, ok, duration = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} {title} ({duration:.2f} s)")
