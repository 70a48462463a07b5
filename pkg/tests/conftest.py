import numpy as np
import pytest

from expotime.fitting import channel_tau, get_fitter
from expotime.models import Diffusion1D, contiguous_regions

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def report():
    """Record one pass/fail line; the line is printed and kept for the summary."""

    def emit(tag: str, ok: bool, detail: str):
        line = f"[{'PASS' if ok else 'FAIL'}] {tag}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return emit


def family_on(ratio: float, degree: int, tmin: float):
    """Shared-pole family for 31 log-spaced channels starting at ``tmin``."""
    tau = channel_tau(ratio)
    return get_fitter(tau).family(degree, times=tau * tmin)


def three_region_model(n_cells: int = 301, sigma=(0.1, 0.01, 0.03)):
    regions = contiguous_regions(n_cells, len(sigma))
    return Diffusion1D(100.0, np.asarray(sigma)[regions]), regions


@pytest.fixture(scope="session")
def small_family():
    """Degree-10 family on [1e-6, 1e-5] (ratio 10)."""
    return family_on(10.0, 10, 1e-6)


@pytest.fixture(scope="session")
def inversion_family():
    """Degree-20 family on [1e-6, 1e-3] used by the inversion checks."""
    return family_on(1e3, 20, 1e-6)
