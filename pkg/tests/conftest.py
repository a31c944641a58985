import numpy as np
import pytest

from vvca.domain import AuctionSize, ValuationProfile, sample_batch
from vvca.mechanism import VvcaParams


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def two_by_two():
    """Additive 2x2 profile with a hand-checkable VCG outcome."""
    return ValuationProfile.from_item_values([[0.8, 0.2], [0.5, 0.6]])


@pytest.fixture(scope="session")
def fixture_2x2a():
    """Fixed 256-profile 2x2 batch in setting A."""
    return sample_batch("A", AuctionSize(2, 2), 256, 2024)


def random_params(size, rng, scale=1.0):
    return VvcaParams(size, rng.uniform(-scale, scale, size.n_bidders),
                      rng.uniform(-scale, scale, (size.n_bidders, size.n_bundles)))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
