import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lmadapt.config import load_config
from lmadapt.sources import MarkovSource, Vocab

settings.register_profile("default", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ROOT = Path(__file__).resolve().parents[1]
STANDARD_CONFIG = ROOT / "configs" / "standard.yaml"


@pytest.fixture(scope="session")
def standard_cfg():
    return load_config(STANDARD_CONFIG)


def chain(initial, transition, n):
    initial = np.asarray(initial, dtype=float)
    return MarkovSource(Vocab(initial.size), initial, np.asarray(transition, dtype=float), n)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for text in LINES:
            terminalreporter.write_line(text)
