import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from prs4d.constellation import get_format

settings.register_profile("default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FORMATS = ("pm8qam", "2a8psk", "4d-64prs")
_verdicts = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def formats():
    return {name: get_format(name) for name in FORMATS}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.stash[_verdicts] = {}


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    store = request.config.stash[_verdicts]

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        store[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(_verdicts, {})
    if store:
        terminalreporter.section("acceptance criteria")
        for number in sorted(store):
            terminalreporter.write_line(store[number])
