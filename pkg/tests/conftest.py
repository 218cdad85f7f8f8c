import numpy as np
import pytest
from hypothesis import settings

from dal.data import QRPair

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def random_pairs(rng, n, vocab_size, max_len=4):
    """Random non-empty pairs over the non-reserved ids 4..vocab_size-1."""
    out = []
    for _ in range(n):
        q = tuple(int(x) for x in rng.integers(4, vocab_size, size=rng.integers(1, max_len + 1)))
        r = tuple(int(x) for x in rng.integers(4, vocab_size, size=rng.integers(1, max_len + 1)))
        out.append(QRPair(q, r))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.line(line)
