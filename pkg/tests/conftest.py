import functools
import sys
import time

import pytest

from mgdispatch import scenarios, sim

RUN_SECONDS: dict = {}


@functools.lru_cache(maxsize=None)
def cached_run(name: str, *args):
    """Simulate a reference case once per session."""
    builder = {"quiet": scenarios.quiet, **scenarios.CASES}[name]
    sc = builder(*args)
    t0 = time.perf_counter()
    trace = sim.run(sc)
    RUN_SECONDS[(name, *args)] = time.perf_counter() - t0
    return sc, trace


@pytest.fixture(scope="session")
def run_case():
    return cached_run


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
