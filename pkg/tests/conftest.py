import contextlib
import os
import time

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_CRITERIA = []


class _Criterion:
    def __init__(self, number, title, budget_s):
        self.number, self.title, self.budget_s = number, title, budget_s
        self.detail = ""


@pytest.fixture
def criterion():
    """Context manager that times one acceptance criterion and logs a pass/fail line."""

    @contextlib.contextmanager
    def run(number, title, budget_s=None):
        c = _Criterion(number, title, budget_s)
        start = time.perf_counter()
        ok, err = False, ""
        try:
            yield c
            ok = True
        except Exception as exc:
            msg = str(exc).splitlines()[0] if str(exc) else ""
            err = msg or type(exc).__name__
            raise
        finally:
            elapsed = time.perf_counter() - start
            if ok and budget_s is not None and elapsed > budget_s:
                ok, err = False, f"runtime {elapsed:.1f}s over budget {budget_s}s"
            line = f"[{'PASS' if ok else 'FAIL'}] AC{number:02d} {title}: {c.detail or err} ({elapsed:.1f}s)"
            _CRITERIA.append((number, line))
            print(line)
        if budget_s is not None:
            assert elapsed <= budget_s, f"runtime {elapsed:.1f}s over budget {budget_s}s"

    return run


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_CRITERIA):
            terminalreporter.write_line(line)
