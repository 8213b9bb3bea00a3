import numpy as np
import pytest
from hypothesis import settings

from nmglab.lab import ModelRecipe, cached_model
from nmglab.schedule import make_schedule

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture(scope="session")
def sched():
    return make_schedule(1000, 50, 1e-4, 0.02)


@pytest.fixture(scope="session")
def trained():
    """The 20k-step shapes denoiser plus its loss curve (trained once, then cached)."""
    return cached_model(ModelRecipe())


@pytest.fixture(scope="session")
def model(trained):
    return trained[0]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def verdict(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion, then assert it."""

    def _verdict(n: int, ok: bool, detail: str):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[n] = line
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return _verdict


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
