import numpy as np
import pytest

from synrep import design
from synrep.core import ReplicateSet, Variant, WeightedSample


@pytest.fixture(scope="session")
def population():
    return design.generate_population(design.SyntheticPopulationSpec(N=20_000), 11)


@pytest.fixture
def pps_sample(population):
    return design.draw_pps(population, 200, 12)


@pytest.fixture
def small_release():
    rng = np.random.default_rng(3)
    return ReplicateSet.from_groups(Variant.SYNREP_R, rng.normal(size=(2, 2, 3)), 100, ("y",))


def equal_weight_sample(n=50, N=2000, seed=0):
    y = np.random.default_rng(seed).normal(10, 3, n)
    return WeightedSample(np.full(n, N / n), y, N, ("y",))


VERDICTS: list[str] = []


def record_verdict(line: str) -> None:
    print(line)
    VERDICTS.append(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance verdicts")
        for line in VERDICTS:
            terminalreporter.write_line(line)
