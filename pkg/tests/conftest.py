from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from gaplab.envmodel import build_catalog, default_distractor_pool, load_bundled_environment  # noqa: E402
from gaplab.simulator import LocalSimBackend  # noqa: E402

settings.register_profile("ci", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")

FIXTURES = Path(__file__).parent / "fixtures"
DRUPAL = "CVE-2018-7600"


@pytest.fixture(scope="session")
def drupal():
    return load_bundled_environment(DRUPAL)


@pytest.fixture(scope="session")
def pool():
    return default_distractor_pool()


@pytest.fixture
def small_env(drupal, pool):
    """Drupal host with a 10-action catalog (5 scans, truth + 4 distractors)."""
    return LocalSimBackend(drupal, build_catalog([DRUPAL], pool, 10, seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
