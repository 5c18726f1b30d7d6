"""The numba and numpy kernel paths must agree bit for bit, and the hash must
match an independent SplitMix64 reference."""
import os
import subprocess
import sys

import numpy as np
import pytest

from rvqmark import kernels
from rvqmark._accel import HAS_NUMBA
from rvqmark.core import identity_maps, kernel_plan

from conftest import config, random_map

MASK = (1 << 64) - 1


def ref_splitmix64(seed, count):
    """Reference generator: state += golden; output = finalizer(state)."""
    out, state = [], seed
    for _ in range(count):
        state = (state + 0x9E3779B97F4A7C15) & MASK
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        out.append(z ^ (z >> 31))
    return out


def test_mix64_matches_published_splitmix64_vectors():
    # first outputs of SplitMix64 seeded with 0
    assert ref_splitmix64(0, 3) == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]
    golden = 0x9E3779B97F4A7C15
    for i, expect in enumerate(ref_splitmix64(0, 3), start=1):
        assert kernels.mix64_int(i * golden) == expect


def test_mix64_numpy_equals_python_ints(rng):
    xs = rng.integers(0, 2 ** 63, size=500, dtype=np.int64).astype(np.uint64) * np.uint64(3)
    got = kernels.mix64_np(xs)
    assert [int(v) for v in got] == [kernels.mix64_int(int(x)) for x in xs]


def test_cluster_table_is_mix_of_offset_ids():
    table = kernels.cluster_table(10)
    assert [int(t) for t in table] == [kernels.mix64_int(j + 0x9E3779B97F4A7C15) for j in range(10)]


@pytest.mark.skipif(not HAS_NUMBA, reason="numba disabled")
@pytest.mark.parametrize("k", [2, 3, 7, 64, 255, 256, 1000, 4096])
def test_green_mask_paths_agree(rng, k):
    table = kernels.cluster_table(k)
    for g in sorted({1, max(1, k // 4), k // 2, k - 1} - {0}):
        for state in rng.integers(0, 2 ** 64, size=40, dtype=np.uint64):
            a = kernels.green_mask(int(state), table, g)
            b = kernels.green_mask_np(int(state), table, g)
            assert a.sum() == g
            np.testing.assert_array_equal(a, b)


def test_lowest_mask_tie_break_prefers_small_index():
    scores = np.array([5, 5, 5, 1, 5, 2], dtype=np.uint64)
    np.testing.assert_array_equal(kernels.lowest_mask_np(scores, 4), [1, 1, 0, 1, 0, 1])
    if HAS_NUMBA:
        mask = np.empty(6, dtype=bool)
        kernels._lowest_mask(scores, 4, mask, np.empty(6, dtype=np.int64))
        np.testing.assert_array_equal(mask, [1, 1, 0, 1, 0, 1])
        # same ties, spread over high bytes so the bucket path is used
        shifted = scores << np.uint64(56)
        kernels._lowest_mask(shifted, 4, mask, np.empty(6, dtype=np.int64))
        np.testing.assert_array_equal(mask, [1, 1, 0, 1, 0, 1])


def _plan_case(rng, n_ch, vocab, h, defer, clustered):
    maps = [random_map(rng, vocab, vocab // 4 if clustered else vocab, c) for c in range(n_ch)] \
        if clustered else identity_maps([vocab] * n_ch)
    chans = tuple(range(0, n_ch, 2)) if n_ch > 1 else (0,)
    cfg = config(gamma=0.3, delta=1.5, context_h=h, watermarked_channels=chans,
                 context_channel=n_ch - 1, defer_on_repeated_key=defer)
    return cfg, maps, kernel_plan(cfg, maps)


CASES = [
    (1, 16, 0, False, False), (1, 16, 0, True, False), (3, 20, 1, False, True),
    (3, 20, 2, True, True), (2, 64, 3, True, False), (4, 12, 1, True, True),
]


@pytest.mark.skipif(not HAS_NUMBA, reason="numba disabled")
@pytest.mark.parametrize("n_ch,vocab,h,defer,clustered", CASES)
def test_count_green_paths_agree(rng, n_ch, vocab, h, defer, clustered):
    _, _, plan = _plan_case(rng, n_ch, vocab, h, defer, clustered)
    tokens = rng.integers(0, vocab, size=(150, n_ch))
    args = (tokens, plan.cluster_of, plan.n_clusters, plan.n_green, plan.marked, plan.base_states,
            plan.table, plan.context_channel, plan.h, plan.defer)
    g1, e1 = kernels.count_green_nb(*args)
    g2, e2 = kernels.count_green_np(*args)
    np.testing.assert_array_equal(g1, g2)
    np.testing.assert_array_equal(e1, e2)


@pytest.mark.skipif(not HAS_NUMBA, reason="numba disabled")
@pytest.mark.parametrize("n_ch,vocab,h,defer,clustered", CASES)
def test_generate_paths_agree(rng, n_ch, vocab, h, defer, clustered):
    _, _, plan = _plan_case(rng, n_ch, vocab, h, defer, clustered)
    n = 120
    noisy = rng.standard_normal((n_ch, n, vocab))
    vocab_arr = np.full(n_ch, vocab, dtype=np.int64)
    args = (noisy, vocab_arr, plan.cluster_of, plan.n_clusters, plan.n_green, plan.marked,
            plan.base_states, plan.table, plan.context_channel, plan.h, 1.5, plan.defer)
    out_nb = kernels.generate_nb(*args)
    out_np = kernels.generate_np(*args)
    for a, b in zip(out_nb, out_np):
        np.testing.assert_array_equal(a, b)


def test_per_step_hash_matches_documented_construction(key):
    """score(j) = fold(context_state, j) with the sentinel -1 encoded as 0."""
    h, vocab = 2, 32
    cfg = config(gamma=0.25, context_h=h)
    plan = kernel_plan(cfg, identity_maps([vocab]))
    tokens = np.array([[3], [9], [4], [4]])
    green, _ = kernels.count_green_kernel(tokens, plan.cluster_of, plan.n_clusters, plan.n_green,
                                          plan.marked, plan.base_states, plan.table, 0, h, False)
    chan = kernels.channel_state(key, 0)
    for i in range(4):
        ctx = [int(tokens[j, 0]) if j >= 0 else -1 for j in range(i - h, i)]
        state = kernels.fold_int(chan, h)
        for cid in ctx:
            state = kernels.fold_int(state, cid + 1)
        scores = sorted((kernels.fold_int(state, j), j) for j in range(vocab))
        members = {j for _, j in scores[:8]}
        assert green[i, 0] == (int(tokens[i, 0]) in members)


def test_numpy_fallback_selected_by_env_flag(tmp_path):
    code = (
        "import numpy as np\n"
        "from rvqmark._accel import HAS_NUMBA\n"
        "from rvqmark import kernels\n"
        "from rvqmark.core import WatermarkConfig, identity_maps\n"
        "from rvqmark.simgen import SyntheticModel, generate\n"
        "from rvqmark.detect import detect\n"
        "cfg = WatermarkConfig(bytes(range(32)), 0.25, 2.0, 1, (0, 1))\n"
        "m = SyntheticModel((40, 30), 1.0, 5)\n"
        "tr = generate(m, cfg, identity_maps((40, 30)), 60, 9)\n"
        "r = detect(tr.stream, cfg)\n"
        "print(HAS_NUMBA, kernels.generate_kernel.__name__, repr(r.z_total), tr.stream.tokens.sum())\n"
    )
    outs = {}
    for flag in ("1", "0"):
        env = dict(os.environ, RVQMARK_DISABLE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        outs[flag] = res.stdout.split()
    assert outs["1"][:2] == ["False", "generate_np"]
    if HAS_NUMBA:
        assert outs["0"][:2] == ["True", "generate_nb"]
    assert outs["1"][2:] == outs["0"][2:]
