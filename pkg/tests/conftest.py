import numpy as np
import pytest

from triplab.synthgen import RenderConfig, generate_dataset
from triplab.vocab import Vocabulary, build_validity_mask

SMALL_VOCAB = Vocabulary(("a", "b", "c"), ("null", "v1", "v2"), ("null", "t1", "t2", "t3"))
SMALL_TRIPLETS = [(0, 0, 0), (0, 1, 1), (0, 2, 2), (1, 1, 2), (1, 2, 3), (2, 0, 0), (2, 2, 1)]


@pytest.fixture
def small_vocab():
    return SMALL_VOCAB


@pytest.fixture
def small_mask():
    return build_validity_mask(SMALL_TRIPLETS, SMALL_VOCAB)


@pytest.fixture(scope="session")
def small_data():
    """20 rendered frames over the small vocabulary, 4 videos of 5."""
    mask = build_validity_mask(SMALL_TRIPLETS, SMALL_VOCAB)
    return generate_dataset(RenderConfig(SMALL_VOCAB), mask, 20, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# filled by test_acceptance; one (label, passed, detail) row per criterion
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, detail in sorted(ACCEPTANCE, key=lambda r: int(r[0].split()[1].rstrip("abc:"))):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {label} {detail}")
