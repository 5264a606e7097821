import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tcace.data import Dataset  # noqa: E402
from tcace.simulation import ScenarioSpec, gen_trial  # noqa: E402


def make_dataset(rng, n_study=40, n_target=30, p=2, **extra):
    """Random merged dataset with both arms present and a nonzero first stage."""
    total = n_study + n_target
    x = rng.uniform(-1, 1, size=(total, p))
    s = np.r_[np.ones(n_study), np.zeros(n_target)]
    z = np.full(total, np.nan)
    z[:n_study] = np.resize([1.0, 0.0], n_study)
    d = np.full(total, np.nan)
    comply = rng.random(n_study) < 0.7
    d[:n_study] = np.where(comply, z[:n_study], rng.integers(0, 2, n_study))
    y = np.full(total, np.nan)
    y[:n_study] = 1.0 + 2.0 * d[:n_study] + x[:n_study].sum(axis=1) + rng.normal(0, 0.5, n_study)
    return Dataset.from_arrays(x, s, z, d, y, **extra)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_dataset(rng):
    return make_dataset(rng)


@pytest.fixture(scope="session")
def standard_trial():
    return gen_trial(ScenarioSpec(n_total=1500, trials=1, seed=7), 0)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    """Store one pass/fail line; the lines are printed after the test run."""
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
