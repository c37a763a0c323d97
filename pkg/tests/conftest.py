import numpy as np
import pytest

from metauap.data import synth_source
from metauap.episodes import EpisodeStream, StreamSource, split_meta_pools
from metauap.victims import VictimArch, train_victim


@pytest.fixture(scope="session")
def tiny_pool():
    """Small multi-class source; >= 3 classes so universal flips exist."""
    return synth_source((1, 8, 8), num_classes=4, n_per_class=24, seed=11)


@pytest.fixture(scope="session")
def tiny_victim(tiny_pool):
    train_set = synth_source((1, 8, 8), num_classes=4, n_per_class=80, seed=12)
    victim = train_victim(VictimArch("mlp_tiny", (1, 8, 8), 4), train_set,
                          epochs=16, seed=13)
    assert victim.train_accuracy >= 0.95
    return victim


@pytest.fixture(scope="session")
def tiny_stream(tiny_pool, tiny_victim):
    train_pool, _ = split_meta_pools(tiny_pool, seed=0)
    return EpisodeStream([StreamSource(train_pool, tiny_victim)], global_seed=21)


@pytest.fixture(scope="session")
def tiny_test_stream(tiny_pool, tiny_victim):
    _, test_pool = split_meta_pools(tiny_pool, seed=0)
    return EpisodeStream([StreamSource(test_pool, tiny_victim)], global_seed=9001)
