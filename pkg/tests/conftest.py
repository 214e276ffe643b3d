import numpy as np
import pytest

from gansharing.phantom import CentreProfile, generate_corpus


def small_profile(centre_id="A", patients=12, **kw):
    base = dict(width=192, height=144, lesion_size_mean_px=14.0, lesion_size_std_px=3.0,
                patient_count=patients, healthy_fraction=0.4)
    base.update(kw)
    return CentreProfile(centre_id, **base)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(small_profile(), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance verdicts, echoed in the terminal summary so they survive output capture
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
