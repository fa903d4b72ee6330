import math
import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def robot():
    from regrasp.kinematics import load_robot

    return load_robot()


@pytest.fixture(scope="session")
def category_models():
    """Trained and annotated models for both built-in categories (about 25 s)."""
    from regrasp.pipeline import build_category_model

    return {c: build_category_model(c) for c in ("spray_bottle", "watering_can")}


def rot_angle(a, b):
    """Angle between two rotation matrices, radians."""
    c = (np.trace(a.T @ b) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, c)))


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """``record(number, name, passed, detail)`` for the acceptance summary."""
    results = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(number, name, passed, detail=""):
        line = f"criterion {number} {name}: {'PASS' if passed else 'FAIL'} {detail}".rstrip()
        results[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
