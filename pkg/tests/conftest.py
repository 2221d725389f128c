import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from imcbn.data import SyntheticDatasetSpec, make_synthetic  # noqa: E402
from imcbn.tensor import smallconv_spec  # noqa: E402
from imcbn.tune import pretrain  # noqa: E402


@pytest.fixture(scope="session")
def small_data():
    spec = SyntheticDatasetSpec(train_per_class=150, test_per_class=50, noise=2.0, seed=3)
    return make_synthetic(spec)


@pytest.fixture(scope="session")
def small_model(small_data):
    xtr, ytr, xte, yte = small_data
    return pretrain(smallconv_spec(), xtr, ytr, epochs=3, lr=0.02, seed=0, test=(xte, yte))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one summary line per acceptance criterion
_ACCEPTANCE: list = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE.append((report.nodeid.split("::")[-1], report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}")
