import numpy as np
import pytest

from hique.features import SyntheticConfig, generate_synthetic_corpus
from hique.taxonomy import load_taxonomy


@pytest.fixture(scope="session")
def taxonomy():
    return load_taxonomy()


@pytest.fixture
def fresh_taxonomy():
    # extension mutates the taxonomy, so tests that append get their own copy
    return load_taxonomy()


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic_corpus(SyntheticConfig(n_depressed=6, n_normal=10, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
