import sys
from pathlib import Path

import numpy as np
import pytest

import rpe.weighting

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_LINES: list[str] = []
SUM_CHECKS = {"count": 0, "worst": 0.0}

_original_finish = rpe.weighting._finish


def _checked_finish(w, method, ids, diagnostics):
    out = _original_finish(w, method, ids, diagnostics)
    if method in ("linear", "linear_l1"):
        dev = abs(float(np.sum(out.weights)) - 1.0)
        SUM_CHECKS["count"] += 1
        SUM_CHECKS["worst"] = max(SUM_CHECKS["worst"], dev)
        assert dev <= 1e-9, f"{method} weights sum to 1 + {dev:.3e}"
    return out


@pytest.fixture(autouse=True, scope="session")
def _guard_weight_sums():
    """Every linear/linear_l1 solve anywhere in the suite must sum to 1 within 1e-9."""
    rpe.weighting._finish = _checked_finish
    yield
    rpe.weighting._finish = _original_finish


@pytest.fixture
def acceptance():
    def record(label: str, passed: bool, detail: str = ""):
        ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] {label}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
        terminalreporter.write_line(
            f"sum-to-one guard: {SUM_CHECKS['count']} linear/linear_l1 solves, "
            f"worst |sum(w) - 1| = {SUM_CHECKS['worst']:.2e}"
        )
