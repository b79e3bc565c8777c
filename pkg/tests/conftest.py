import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from permbasin import runtime
from permbasin.datahub import synth_blobs
from permbasin.netcore import TrainConfig, build_mlp, train

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

runtime.set_threads(1)


@pytest.fixture(scope="session")
def blobs():
    return synth_blobs(400, 6, 3, 3.0, seed=11)


@pytest.fixture(scope="session")
def trained_pair(blobs):
    """Two width-4 nets trained from different seeds on the blobs task."""
    nets = []
    for seed in (1, 2):
        cfg = TrainConfig(lr=0.05, max_epochs=60, seed=seed)
        nets.append(train(build_mlp(1, 4, blobs.in_dim, blobs.num_classes, seed), blobs, cfg))
    return nets


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_criteria: list[str] = []


@pytest.fixture
def criterion(capsys):
    """Record one acceptance criterion: prints a PASS/FAIL line and fails the test on FAIL."""
    def report(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _criteria.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        assert ok, line
    return report


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_criteria, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
