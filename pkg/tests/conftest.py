import numpy as np
import pytest

from rvqmark.core import ClusterMap, WatermarkConfig

KEY = bytes(range(32))
OTHER_KEY = bytes(range(100, 132))


@pytest.fixture
def key():
    return KEY


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def random_map(rng, vocab, k, channel=0):
    """Random surjective map of ``vocab`` tokens onto ``k`` clusters."""
    labels = np.concatenate([np.arange(k), rng.integers(0, k, size=vocab - k)])
    rng.shuffle(labels)
    return ClusterMap(channel, labels)


def config(**kw):
    kw.setdefault("key", KEY)
    return WatermarkConfig(**kw)
