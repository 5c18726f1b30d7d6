import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rvqmark import kernels
from rvqmark.core import (ClusterMap, TokenStream, WatermarkConfig, cluster_match, green_size,
                          identity_maps, prf_partition, token_match)
from rvqmark.errors import ConfigurationError, ShapeError

from conftest import KEY, random_map


# -- TokenStream / ClusterMap ------------------------------------------------

def test_token_stream_validates_and_freezes():
    s = TokenStream([[0, 1], [2, 3]], (3, 4))
    assert (s.channels, s.length) == (2, 2)
    with pytest.raises(ValueError):
        s.tokens[0, 0] = 1
    with pytest.raises(ShapeError):
        TokenStream([[0, 4]], (3, 4))
    with pytest.raises(ShapeError):
        TokenStream([[0, 1]], (3,))
    with pytest.raises(ShapeError):
        TokenStream([[-1]], (3,))
    with pytest.raises(ShapeError):
        TokenStream([0, 1], (3,))


def test_empty_stream_allowed():
    s = TokenStream(np.zeros((0, 2), dtype=np.int64), (5, 5))
    assert s.length == 0


def test_cluster_map_invariants():
    m = ClusterMap(0, [0, 0, 1, 2, 1])
    assert (m.vocab_size, m.cluster_count) == (5, 3)
    np.testing.assert_array_equal(m.members(1), [2, 4])
    np.testing.assert_array_equal(m([4, 3]), [1, 2])
    with pytest.raises(ConfigurationError):
        ClusterMap(0, [0, 2, 2])      # id 1 unused
    with pytest.raises(ShapeError):
        m([5])
    ident = ClusterMap.identity(1, 7)
    assert ident.cluster_count == ident.vocab_size == 7


# -- green size and config -----------------------------------------------------

@pytest.mark.parametrize("gamma,k,expect", [(0.5, 4, 2), (0.25, 2048, 512), (0.25, 151, 38),
                                             (0.25, 2, 1), (0.1, 200, 20), (0.5, 3, 2)])
def test_green_size_rounds_half_up(gamma, k, expect):
    assert green_size(gamma, k) == expect


@pytest.mark.parametrize("gamma,k", [(0.1, 4), (0.9, 4), (0.25, 1), (0.0, 10), (1.0, 10)])
def test_green_size_rejects_empty_or_total(gamma, k):
    with pytest.raises(ConfigurationError):
        green_size(gamma, k)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        WatermarkConfig(b"short")
    with pytest.raises(ConfigurationError):
        WatermarkConfig(KEY, gamma=1.2)
    with pytest.raises(ConfigurationError):
        WatermarkConfig(KEY, delta=-1.0)
    with pytest.raises(ConfigurationError):
        WatermarkConfig(KEY, context_h=-1)
    with pytest.raises(ConfigurationError):
        WatermarkConfig.from_hex("zz" * 32)
    cfg = WatermarkConfig.from_hex(KEY.hex(), watermarked_channels=(2, 0, 2))
    assert cfg.watermarked_channels == (0, 2)
    with pytest.raises(ConfigurationError):
        cfg.validate_for((8, 8), identity_maps((8, 8)))          # channel 2 missing
    with pytest.raises(ConfigurationError):
        WatermarkConfig(KEY).validate_for((8,), [ClusterMap(0, [0] * 8)])  # K = 1


# -- prf_partition -----------------------------------------------------------

def test_partition_size_forced_by_round():
    for seed in range(5):
        gs = prf_partition(bytes([seed] * 32), 0, (), 4, 0.5)
        assert len(gs) == 2 and gs.members <= {0, 1, 2, 3}


def test_partition_is_deterministic_and_context_dependent():
    a = prf_partition(KEY, 1, (5, 9), 100, 0.25)
    b = prf_partition(KEY, 1, (5, 9), 100, 0.25)
    assert a == b and len(a) == 25
    assert prf_partition(KEY, 2, (5, 9), 100, 0.25) != a
    assert prf_partition(KEY, 1, (5, 10), 100, 0.25) != a
    assert prf_partition(bytes(32), 1, (5, 9), 100, 0.25) != a


def test_partition_needs_two_clusters():
    with pytest.raises(ConfigurationError):
        prf_partition(KEY, 0, (), 1, 0.25)
    with pytest.raises(ConfigurationError):
        prf_partition(KEY, 0, (), 4, 0.1)


def test_partition_matches_independent_oracle(rng):
    for _ in range(20):
        k = int(rng.integers(2, 300))
        ctx = tuple(int(v) for v in rng.integers(-1, k, size=int(rng.integers(0, 4))))
        chan = kernels.channel_state(KEY, 3)
        state = kernels.fold_int(chan, len(ctx))
        for c in ctx:
            state = kernels.fold_int(state, c + 1)
        g = int(math.floor(0.25 * k + 0.5))
        if not 1 <= g <= k - 1:
            continue
        expect = {j for _, j in sorted((kernels.fold_int(state, j), j) for j in range(k))[:g]}
        assert prf_partition(KEY, 3, ctx, k, 0.25).members == expect


def test_per_cluster_green_frequency_is_gamma(rng):
    """K=2048, 10^4 random contexts: every cluster is green 0.25 +- 0.02 of the time."""
    k, trials = 2048, 10_000
    table = kernels.cluster_table(k)
    chan = kernels.channel_state(KEY, 0)
    counts = np.zeros(k)
    ctxs = rng.integers(0, k, size=(trials, 2))
    for a, b in ctxs:
        state = kernels.fold_int(kernels.fold_int(kernels.fold_int(chan, 2), int(a) + 1), int(b) + 1)
        counts += kernels.green_mask(state, table, 512)
    freq = counts / trials
    assert np.all(np.abs(freq - 0.25) <= 0.02)
    # binomial sd is 0.0043, so 0.02 is > 4.5 sd; the spread should look binomial too
    assert 0.8 < freq.std() / math.sqrt(0.25 * 0.75 / trials) < 1.2


def test_single_element_context_change_alters_set(rng):
    differ = 0
    for _ in range(1000):
        ctx = [int(v) for v in rng.integers(0, 500, size=3)]
        pos = int(rng.integers(0, 3))
        other = list(ctx)
        other[pos] = (other[pos] + int(rng.integers(1, 500))) % 500
        differ += prf_partition(KEY, 0, ctx, 500, 0.25) != prf_partition(KEY, 0, other, 500, 0.25)
    assert differ > 950


# -- match rates ---------------------------------------------------------------

def test_token_match_examples():
    x = TokenStream([[1], [2], [3], [4]], (10,))
    assert token_match(x, x)[1] == 1.0
    assert token_match(x, TokenStream([[0], [0], [0], [0]], (10,)))[1] == 0.0
    per, mean = token_match(x, TokenStream([[1], [2], [0], [0]], (10,)))
    assert mean == 0.5 and per.tolist() == [0.5]
    with pytest.raises(ShapeError):
        token_match(x, TokenStream([[1], [2]], (10,)))


def test_cluster_match_examples(rng):
    x = TokenStream(rng.integers(0, 16, size=(50, 2)), (16, 16))
    y = TokenStream(rng.integers(0, 16, size=(50, 2)), (16, 16))
    np.testing.assert_array_equal(cluster_match(x, y, identity_maps((16, 16))), token_match(x, y)[0])
    one = [ClusterMap(c, np.zeros(16, dtype=int)) for c in range(2)]
    np.testing.assert_array_equal(cluster_match(x, y, one), [1.0, 1.0])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 30), st.integers(1, 40))
def test_cluster_match_dominates_token_match(seed, vocab, n):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, vocab + 1))
    cmap = random_map(rng, vocab, k)
    x = TokenStream(rng.integers(0, vocab, size=(n, 1)), (vocab,))
    y = TokenStream(np.where(rng.random((n, 1)) < 0.5, x.tokens, rng.integers(0, vocab, size=(n, 1))), (vocab,))
    tm = token_match(x, y)[0]
    cm = cluster_match(x, y, [cmap])
    assert np.all((0 <= tm) & (tm <= cm) & (cm <= 1))
