import os
import sys

import pytest
from hypothesis import HealthCheck, settings

import gimbalsim.moe
import gimbalsim.sim
from stats_check import check_identities

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_original_record_stats = gimbalsim.moe.record_stats
RECORDED = {"calls": 0}


def _checked_record_stats(tokens, n_experts=None):
    A, E, W = _original_record_stats(tokens, n_experts)
    check_identities(tokens, A, E, W)
    RECORDED["calls"] += 1
    return A, E, W


@pytest.fixture(autouse=True)
def _verify_every_recording(monkeypatch):
    """Every A/E/W recorded anywhere in the suite is checked against the exact identities."""
    monkeypatch.setattr(gimbalsim.moe, "record_stats", _checked_record_stats)
    monkeypatch.setattr(gimbalsim.sim, "record_stats", _checked_record_stats)
    yield


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
