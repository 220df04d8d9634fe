import numpy as np
import pytest

from tttse.data import SyntheticVoice, gen_noise, gen_voice
from tttse.dsp import Waveform


@pytest.fixture
def voice() -> Waveform:
    return gen_voice(SyntheticVoice.random(11), 1.0)


@pytest.fixture
def white() -> Waveform:
    return gen_noise("white", 1.0, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS, key=lambda k: (int(k.split("-")[0]), k)):
            ok, detail = RESULTS[key]
            terminalreporter.write_line(f"ACCEPTANCE {key}: {'PASS' if ok else 'FAIL'} {detail}")
