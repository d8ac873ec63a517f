import numpy as np
import pytest

from cmcppg.synth import NoiseSpec, gen_labeled_corpus

MIX = {"NSR": 0.25, "AF": 0.5, "PVC": 0.25}


@pytest.fixture(scope="session")
def small_corpus():
    # 32 patients x 16 segments = 512 records at 40 Hz
    return gen_labeled_corpus(32, 16, MIX, NoiseSpec(0.15, 0.45, 0.4), seed=0)


@pytest.fixture(scope="session")
def short_corpus():
    # short 8 s windows keep model-level tests fast
    return gen_labeled_corpus(12, 6, MIX, NoiseSpec(0.1, 0.3, 0.3), seed=1, window_s=8.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
