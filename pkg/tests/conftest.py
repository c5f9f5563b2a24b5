import numpy as np
import pytest

from psem.market_data import synth_universe


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_universe():
    return synth_universe(12, 400, corr=0.5, seed=3)


def write_csv(path, text):
    path.write_text(text)
    return str(path)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number, ok, text):
    ACCEPTANCE[number] = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {text}"
    print(ACCEPTANCE[number])
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
