import numpy as np
import pytest

from wobseg.synthgen import SynthParams, generate_slide


@pytest.fixture(scope="session")
def small_slide():
    return generate_slide(SynthParams(width_um=160, height_um=128, gland_count=(6, 8), seed=3), "small")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
