import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metauap import episodes as E
from metauap.data import synth_source


def test_splitmix64_reference_values():
    # published SplitMix64 finalizer outputs
    assert E.splitmix64(0) == 0
    assert E.splitmix64(1) == 6238072747940578789
    assert E.splitmix64((1 << 64) - 1) == 13029008266876403067


def test_episode_deterministic(tiny_stream):
    a = E.sample_episode(tiny_stream, 0)
    b = E.sample_episode(tiny_stream, 0)
    assert a.support.images.tobytes() == b.support.images.tobytes()
    assert a.query.images.tobytes() == b.query.images.tobytes()
    assert a.episode_seed == b.episode_seed


def test_support_query_disjoint(tiny_stream):
    for i in range(30):
        ep = E.sample_episode(tiny_stream, i)
        sup = {img.tobytes() for img in ep.support.images}
        qry = {img.tobytes() for img in ep.query.images}
        assert not sup & qry


def test_default_shape_two_way_two_shot(tiny_stream):
    ep = E.sample_episode(tiny_stream, 3)
    assert ep.support.images.shape[0] == 4
    assert ep.query.images.shape[0] == 4
    assert set(ep.support.labels) == set(ep.query.labels)
    assert len(set(ep.support.labels)) == 2


def test_mix_weights_frequency(tiny_pool, tiny_victim):
    stream = E.EpisodeStream(
        [E.StreamSource(tiny_pool, tiny_victim, source_id="a"),
         E.StreamSource(tiny_pool, tiny_victim, source_id="b")],
        mix=[0.5, 0.5], global_seed=5)
    picks = [E.sample_episode(stream, i).source_id for i in range(1000)]
    freq = picks.count("a") / 1000.0
    assert 0.42 <= freq <= 0.58  # binomial 99% interval is tighter than this


def test_insufficient_pool_names_class(tiny_victim):
    pool = synth_source((1, 8, 8), 2, 4, seed=1)
    starved = pool.subset(np.array([0, 1, 2, 4, 5, 6, 7]))  # class 0 has 3 left
    stream = E.EpisodeStream([E.StreamSource(starved, tiny_victim)], global_seed=0)
    with pytest.raises(E.InsufficientPoolError, match="class 0"):
        E.sample_episode(stream, 0)


def test_split_pools_disjoint_partition(tiny_pool):
    train, test = E.split_meta_pools(tiny_pool, seed=4)
    assert len(train) + len(test) == len(tiny_pool)
    tr = {img.tobytes() for img in train.images}
    te = {img.tobytes() for img in test.images}
    assert not tr & te
    full = {img.tobytes() for img in tiny_pool.images}
    assert tr | te == full
    for c in range(tiny_pool.num_classes):
        n = tiny_pool.class_indices(c).size
        assert train.class_indices(c).size == int(n * 0.8)


def test_split_pools_deterministic(tiny_pool):
    a1, b1 = E.split_meta_pools(tiny_pool, seed=4)
    a2, b2 = E.split_meta_pools(tiny_pool, seed=4)
    assert a1.images.tobytes() == a2.images.tobytes()
    assert b1.images.tobytes() == b2.images.tobytes()


def test_split_pools_insufficient():
    pool = synth_source((1, 8, 8), 2, 4, seed=0)
    with pytest.raises(E.InsufficientPoolError):
        E.split_meta_pools(pool, seed=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 63 - 1), st.integers(0, 10_000))
def test_episode_seed_is_pure_function(global_seed, index):
    assert (E.splitmix64(global_seed ^ index)
            == E.splitmix64(global_seed ^ index))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 200))
def test_any_index_disjoint_property(tiny_stream, index):
    ep = E.sample_episode(tiny_stream, index)
    sup = {img.tobytes() for img in ep.support.images}
    qry = {img.tobytes() for img in ep.query.images}
    assert not sup & qry
