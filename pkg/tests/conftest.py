import numpy as np
import pytest


def random_spd(k, gen, ridge=0.5):
    b = gen.standard_normal((k, k))
    return b @ b.T + ridge * np.eye(k)


def random_corr(k, gen):
    c = random_spd(k, gen, ridge=0.2)
    d = 1 / np.sqrt(np.diag(c))
    return c * d[:, None] * d[None, :]


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


# criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE = {}


def record(number, passed, detail):
    ACCEPTANCE[number] = (bool(passed), detail)
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}")
