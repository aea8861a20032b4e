import numpy as np
import pytest

from heterocomm.device import DeviceDescriptor
from heterocomm.launch import run_world

_CRITERIA: list = []


def devices_for(kinds, **kw):
    return [DeviceDescriptor(r, k, **kw) for r, k in enumerate(kinds)]


@pytest.fixture
def world():
    """Run ``fn(ctx)`` on one in-process worker per device kind in ``kinds``."""

    def _run(kinds, fn, timeout=10.0, **device_kw):
        return run_world(devices_for(kinds, **device_kw), fn, timeout=timeout)

    return _run


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def criterion():
    """Record and print a one-line verdict for an acceptance criterion."""

    def _record(number, name, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name}" + (f" ({detail})" if detail else "")
        _CRITERIA.append(line)
        print(line)
        assert ok, line

    return _record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
