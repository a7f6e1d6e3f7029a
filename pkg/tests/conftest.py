import os
from pathlib import Path

import numpy as np
import pytest

from csforest.dataset import JTPA_SCHEMA, load_csv

REPO = Path(__file__).resolve().parents[1]
JTPA_ENV = "CSFOREST_JTPA_CSV"
JTPA_VENDORED = REPO / "data" / "jtpa.csv"


def jtpa_path():
    """Vendored JTPA copy, or the file named by $CSFOREST_JTPA_CSV; None when absent."""
    candidate = os.environ.get(JTPA_ENV)
    path = Path(candidate) if candidate else JTPA_VENDORED
    return path if path.is_file() else None


@pytest.fixture
def write_csv(tmp_path):
    def _write(text, name="data.csv"):
        path = tmp_path / name
        path.write_text(text)
        return path
    return _write


@pytest.fixture(scope="session")
def jtpa():
    path = jtpa_path()
    if path is None:
        pytest.fail(f"JTPA data not found: place it at {JTPA_VENDORED} or set ${JTPA_ENV} "
                    "(csforest fetch-jtpa can download or import it)")
    return load_csv(path, JTPA_SCHEMA)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture
def criterion(request):
    """Record one pass/fail line per acceptance criterion, then assert it."""
    def _record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        request.config.stash[ACCEPTANCE_KEY].append(line)
        print(line)
        assert passed, line
    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
