from types import SimpleNamespace

import numpy as np
import pytest

from avamp.model import BgParams, synthesize_instance

_ACCEPTANCE = {}


def small_instance(seed, m=48, n=64, kappa=10.0, snr_db=30.0, theta=BgParams(0.2, 0.3, 1.0)):
    cfg = SimpleNamespace(m=m, n=n, kappa=kappa, snr_db=snr_db, theta1_true=theta)
    return synthesize_instance(cfg, np.random.default_rng(seed))


@pytest.fixture
def record_acceptance():
    """Tests call this with (criterion, passed, detail) before asserting."""

    def rec(criterion, passed, detail):
        _ACCEPTANCE[criterion] = (bool(passed), detail)

    return rec


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[crit]
        terminalreporter.write_line(f"criterion {crit}: {'PASS' if ok else 'FAIL'}  {detail}")
