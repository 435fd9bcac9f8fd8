import numpy as np
import pytest

from fracheat.heatkernel import HeatKernelEvaluator
from fracheat.operator import DomainGrid, Fractional, build_operator, eigendecompose


def make_evaluator(spec, R=1.0, N=64, extrapolate=False):
    grid = DomainGrid(R, N)
    return HeatKernelEvaluator(eigendecompose(build_operator(spec, grid), extrapolate=extrapolate))


@pytest.fixture(scope="session")
def ev15():
    return make_evaluator(Fractional(1.5))


@pytest.fixture(scope="session")
def ev2():
    return make_evaluator(Fractional(2.0))


@pytest.fixture(scope="session")
def ev15_small():
    return make_evaluator(Fractional(1.5), N=16)


@pytest.fixture
def cosine(ev15):
    return np.cos(0.5 * np.pi * ev15.grid.nodes)


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict(request):
    """Record (and print) one PASS/FAIL line per acceptance criterion."""

    def record(ok: bool, text: str):
        line = f"{'PASS' if ok else 'FAIL'}  {request.node.name}: {text}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
