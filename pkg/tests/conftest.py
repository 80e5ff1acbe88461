import numpy as np
import pytest

from barl.gp import Dataset, KernelParams


def random_dataset(rng, n, d, na, scale=1.0):
    data = Dataset(d, na)
    for _ in range(n):
        s = rng.uniform(-scale, scale, d)
        a = rng.uniform(-scale, scale, na)
        data.append(s, a, s + 0.3 * np.sin(np.sum(s) + a[0]) + 0.1 * rng.standard_normal(d))
    return data


def random_params(rng, d, D, noise=None):
    ls = np.exp(rng.uniform(np.log(0.3), np.log(3.0), (d, D)))
    sf2 = np.exp(rng.uniform(np.log(0.5), np.log(2.0), d))
    sn2 = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), d)) if noise is None else \
        np.full(d, noise)
    return KernelParams(ls, sf2, sn2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run multi-hour sample-complexity criteria")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-hour experiment, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict = {}


def record_criterion(number, ok, detail):
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, 10):
        terminalreporter.write_line(ACCEPTANCE_LINES.get(
            number, f"criterion {number}: NOT RUN  (deselected, or slow without --runslow)"))
