import numpy as np
import pandas as pd
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def toy_cohort():
    """Three subjects from the design example plus enough filler for a full-rank fit."""
    rows = [
        ("s0", "CN", 70.0, 1500.0),
        ("s1", "MCI", 75.0, 1400.0),
        ("s2", "AD", 80.0, 1300.0),
    ]
    return pd.DataFrame(rows, columns=["subject_id", "diagnosis", "age", "tiv"])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from ._registry import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS, key=lambda k: (int(k.split()[0]), k)):
            terminalreporter.write_line(RESULTS[key])
