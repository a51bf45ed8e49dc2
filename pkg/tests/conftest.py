import sys

import numpy as np
import pytest


def random_spd(rng, n, cond=10.0):
    """Random symmetric positive-definite matrix with eigenvalues in [1, cond]."""
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eig = np.exp(rng.uniform(0.0, np.log(cond), size=n))
    a = (q * eig) @ q.T
    return 0.5 * (a + a.T)


def dense_kron(factors):
    out = np.ones((1, 1))
    for f in factors:
        out = np.kron(out, f)
    return out


def dense_khatri_rao(blocks):
    """Row-wise Kronecker product, built one row at a time."""
    n = blocks[0].shape[0]
    rows = []
    for i in range(n):
        r = np.ones(1)
        for b in blocks:
            r = np.kron(r, b[i])
        rows.append(r)
    return np.array(rows)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance PASS/FAIL lines after the test report."""
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
