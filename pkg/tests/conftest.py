import numpy as np
import pytest

from fmkr.ingest import split_support_query
from fmkr.stages import StageLabel
from fmkr.synth import SynthConfig, fused_samples

SMALL_COUNTS = {StageLabel.NT: 120, StageLabel.RN: 40, StageLabel.EF: 30,
                StageLabel.LM: 20, StageLabel.DE: 8}


@pytest.fixture(scope="session")
def small_samples():
    return fused_samples(SynthConfig(counts=SMALL_COUNTS, flow_dim=12, seed=3))


@pytest.fixture(scope="session")
def small_ds(small_samples):
    return split_support_query(small_samples)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_log():
    """Record a one-line criterion verdict; echoed in the terminal summary."""
    def record(line):
        print(line)
        _ACCEPTANCE_LINES.append(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
