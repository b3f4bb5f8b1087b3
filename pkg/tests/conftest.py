import numpy as np
import pytest
import torch
from hypothesis import settings

torch.set_num_threads(1)
settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def desk_config():
    from omnisonic.config import builtin_config
    return builtin_config("desk")


@pytest.fixture(scope="session")
def desk_setup(desk_config):
    return desk_config.setup()


@pytest.fixture
def rng():
    from omnisonic.numerics import Rng
    return Rng(1234)


def tone(freq, n, rate=16000, amp=0.5):
    from omnisonic.audio import Waveform
    return Waveform(amp * np.sin(2 * np.pi * freq * np.arange(n) / rate), rate)


ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance line; the summary is printed at the end of the run."""

    def record(name: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
