import numpy as np
import pytest

from adacanon.groups import RngStream


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


@pytest.fixture
def stream():
    return RngStream(7, 0)


def random_symmetric(gen, n):
    a = gen.standard_normal((n, n))
    return (a + a.T) / 2


def random_graph(gen, n, p=0.4, weighted=False):
    a = (gen.random((n, n)) < p).astype(float)
    if weighted:
        a *= gen.uniform(0.5, 2.0, (n, n))
    a = np.triu(a, 1)
    return a + a.T


# acceptance outcomes, criterion number -> list of (ok, detail)
ACCEPTANCE = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE.setdefault(criterion, []).append((bool(ok), detail))
    print(f"criterion {criterion} {'PASS' if ok else 'FAIL'}: {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(ACCEPTANCE):
        checks = ACCEPTANCE[c]
        ok = all(o for o, _ in checks)
        terminalreporter.write_line(f"criterion {c:>2} {'PASS' if ok else 'FAIL'}: "
                                    + "; ".join(d for _, d in checks))
