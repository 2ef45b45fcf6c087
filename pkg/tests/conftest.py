import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def pytest_configure(config):
    # filled by tests/test_acceptance.py, echoed at the end of the session
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter):
    lines = getattr(terminalreporter.config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_pipeline():
    """A cascade trained on 40 generated events plus 10 held-out clean events."""
    from merge_tlhmm import scenario, tlhmm

    events = scenario.generate_dataset(50, seed=7)
    train, test = events[:40], events[40:]
    obs = [scenario.extract_features(e).observations for e in train]
    model, reports = tlhmm.train(obs, train, config=tlhmm.TlhmmConfig(seed=3))
    return {"model": model, "reports": reports, "train": train, "train_obs": obs, "test": test,
            "test_obs": [scenario.extract_features(e).observations for e in test]}
