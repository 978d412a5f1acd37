import numpy as np
import pytest

from lapselab.portfolio import SynthConfig, generate_synthetic
from lapselab.survival.retention import ACCEPTANT, LAPSER, RECODINGS, build_retention_matrices, fit_model


@pytest.fixture(scope="session")
def portfolio():
    return generate_synthetic(SynthConfig(n_subjects=1500, seed=11))


@pytest.fixture(scope="session")
def cox_models(portfolio):
    d = portfolio
    return {
        target: fit_model("cox", d.features, d.durations, d.events, RECODINGS[target], {"select": None})
        for target in (ACCEPTANT, LAPSER)
    }


@pytest.fixture(scope="session")
def matrices(portfolio, cox_models):
    return build_retention_matrices(cox_models[ACCEPTANT], cox_models[LAPSER], portfolio, 20)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = {}


def record_criterion(number: int, passed: bool, detail: str) -> str:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
