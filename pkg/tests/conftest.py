import numpy as np
import pytest

from deapcache.trace import Trace, label_trace


def make_trace(addresses, pcs=None):
    addresses = list(addresses)
    if pcs is None:
        pcs = [0x400000 + 4 * (i % 7) for i in range(len(addresses))]
    return label_trace(Trace(pcs, addresses))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
