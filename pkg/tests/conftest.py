import numpy as np
import pytest

from basenas.rng import stream
from basenas.tensor import ops


def kinks_at(f, x):
    with ops.trace_kinks() as k:
        f(x)
    return k


def central_diff(f, x, idx, h=1e-5, base=None):
    """Central difference of scalar ``f`` at coordinate ``idx`` of array ``x``.

    Returns None when either probe moves across a ReLU or max-pool kink
    (the set of active branches differs from the one at ``x``), since the
    difference quotient is meaningless there. ``base`` is the kink pattern
    at ``x`` when the caller already has it.
    """
    if base is None:
        base = kinks_at(f, x)
    xp = x.copy()
    xp[idx] += h
    xm = x.copy()
    xm[idx] -= h
    with ops.trace_kinks() as kp:
        fp = f(xp)
    with ops.trace_kinks() as km:
        fm = f(xm)
    if kp != base or km != base:
        return None
    return (fp - fm) / (2 * h)


def rel_err(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def fd_check(f, x, analytic, n=None, rng=None, h=1e-5, floor=1e-6):
    """Worst relative error between ``analytic`` and central differences.

    Probes every coordinate, or ``n`` random ones. Returns ``(worst, probed,
    skipped)``.
    """
    rng = rng or np.random.default_rng(0)
    flat = [np.unravel_index(i, x.shape) for i in range(x.size)]
    if n is not None and n < len(flat):
        flat = [flat[i] for i in rng.choice(len(flat), size=n, replace=False)]
    worst, probed, skipped = 0.0, 0, 0
    for idx in flat:
        fd = central_diff(f, x, idx, h)
        if fd is None:
            skipped += 1
            continue
        probed += 1
        worst = max(worst, rel_err(fd, analytic[idx], floor))
    return worst, probed, skipped


@pytest.fixture
def rng():
    return stream(1234, "tests")


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE = []


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}"
        ACCEPTANCE.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok
    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
