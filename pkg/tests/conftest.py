import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bonesynth.volcore import LabelVolume, ScalarVolume

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_labels(rng, dims, num_classes, spacing=(1.0, 1.0, 1.0)) -> LabelVolume:
    return LabelVolume(rng.integers(0, num_classes, size=dims), spacing, num_classes)


def random_scan(rng, dims, spacing=(1.0, 1.0, 1.0), lo=-1000.0, hi=1500.0) -> ScalarVolume:
    return ScalarVolume(rng.uniform(lo, hi, size=dims), spacing)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
