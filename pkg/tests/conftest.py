import pytest

from scfusion.harness.config import ExperimentConfig
from scfusion.harness.training import pretrain

ACCEPTANCE = {}


@pytest.fixture(scope="session")
def pretrained():
    """Step-1 result for the default config, seed 0, matched domain."""
    return pretrain(ExperimentConfig())


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  criterion {key}: {detail}")
