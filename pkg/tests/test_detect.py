import io
import math
from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rvqmark.core import ClusterMap, TokenStream, identity_maps, prf_partition
from rvqmark.detect import (count_green, detect, neg_log10_p, p_value, p_value_exact, read_reports_csv,
                            tpr_at_fpr, write_reports_csv, z_channel, z_total)
from rvqmark.errors import ConfigurationError, ShapeError, UndefinedEstimateError
from rvqmark.experiments import null_calibration
from rvqmark.simgen import SyntheticModel, generate

from conftest import KEY, OTHER_KEY, config

mpmath.mp.dps = 60


def mp_sf(z):
    return mpmath.erfc(mpmath.mpf(z) / mpmath.sqrt(2)) / 2


# -- statistics ----------------------------------------------------------------

def test_z_channel_examples():
    assert z_channel(25, 100, 0.25) == 0.0
    assert z_channel(40, 100, 0.25) == pytest.approx(15 / math.sqrt(18.75), abs=1e-12)
    assert z_channel(40, 100, 0.25) == pytest.approx(3.4641016151377544, abs=1e-12)
    assert z_channel(100, 100, 0.25) == pytest.approx(10 * math.sqrt(3), abs=1e-12)
    with pytest.raises(UndefinedEstimateError):
        z_channel(0, 0, 0.25)


def test_z_total_examples():
    assert z_total([(40, 100, 0.25)]) == z_channel(40, 100, 0.25)
    assert z_total([(50, 200, 0.25)] * 4) == 0.0
    got = z_total([(60, 200, 0.25), (55, 200, 0.25), (50, 200, 0.25), (45, 200, 0.25)])
    assert got == pytest.approx(10 / math.sqrt(150), abs=1e-12)
    assert round(got, 5) == 0.81650
    with pytest.raises(UndefinedEstimateError):
        z_total([(0, 0, 0.25)])
    with pytest.raises(ValueError):
        z_total([(1, 4, 0.25), (1, 4, 0.5)])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 400), st.data(), st.sampled_from([0.1, 0.25, 0.5, 0.7]))
def test_z_matches_binomial_moments_from_first_principles(n, data, gamma):
    g = data.draw(st.integers(0, n))
    p = Fraction(gamma)
    pmf = [Fraction(math.comb(n, k)) * p ** k * (1 - p) ** (n - k) for k in range(n + 1)]
    mean = sum(k * w for k, w in enumerate(pmf))
    var = sum((k - mean) ** 2 * w for k, w in enumerate(pmf))
    ref = float((g - mean)) / math.sqrt(float(var))
    assert z_channel(g, n, gamma) == pytest.approx(ref, abs=1e-12, rel=1e-13)


def test_p_value_reference_points():
    assert p_value(0.0) == 0.5
    assert p_value(6.0) == pytest.approx(float(mp_sf(6)), rel=1e-13)
    assert round(p_value(6.0) * 1e10, 4) == 9.8659
    with pytest.raises(ValueError):
        p_value(float("inf"))


def test_one_percent_threshold_is_neglog_two():
    # bisection against the high-precision survival function
    lo, hi = mpmath.mpf(2), mpmath.mpf(3)
    for _ in range(200):
        mid = (lo + hi) / 2
        lo, hi = (mid, hi) if mp_sf(mid) > mpmath.mpf("0.01") else (lo, mid)
    z = float(lo)
    assert round(z, 4) == 2.3263
    assert neg_log10_p(z) == pytest.approx(2.0, abs=1e-12)
    assert p_value(z) == pytest.approx(0.01, rel=1e-12)


@pytest.mark.parametrize("z", [-5.0, -1.0, 0.5, 3.0, 8.0, 12.0, 20.0, 30.0, 37.0])
def test_neg_log10_p_is_exact_log_of_p(z):
    ref = -mpmath.log10(mp_sf(z))
    assert neg_log10_p(z) == pytest.approx(float(ref), rel=1e-12, abs=1e-14)
    assert neg_log10_p(z) == pytest.approx(-math.log10(p_value(z)), rel=1e-12, abs=1e-14)


@pytest.mark.parametrize("z", [38.0, 40.0, 60.0, 200.0])
def test_extreme_z_never_returns_zero(z):
    assert p_value(z) > 0.0
    assert neg_log10_p(z) == pytest.approx(float(-mpmath.log10(mp_sf(z))), rel=1e-10)


def test_exact_binomial_tail():
    ref = sum(mpmath.binomial(30, k) * mpmath.mpf(0.25) ** k * mpmath.mpf(0.75) ** (30 - k) for k in range(14, 31))
    assert p_value_exact(14, 30, 0.25) == pytest.approx(float(ref), rel=1e-10)


# -- tpr ---------------------------------------------------------------------------

def test_tpr_examples():
    assert tpr_at_fpr([1e-9] * 5, 1e-6) == 1.0
    assert tpr_at_fpr([0.5] * 5, 0.01) == 0.0
    assert tpr_at_fpr([1e-5, 1e-3, 0.2, 0.6], 1e-2) == 0.5
    assert tpr_at_fpr([0.3, 0.9], 1.0) == 1.0
    with pytest.raises(ValueError):
        tpr_at_fpr([], 0.01)
    with pytest.raises(ValueError):
        tpr_at_fpr([0.1], 0.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=50),
       st.lists(st.floats(1e-9, 1.0), min_size=2, max_size=6))
def test_tpr_non_decreasing_in_fpr(ps, fprs):
    fprs = sorted(fprs)
    tprs = [tpr_at_fpr(ps, f) for f in fprs]
    assert all(a <= b for a, b in zip(tprs, tprs[1:]))


# -- counting ----------------------------------------------------------------------

def test_hand_built_all_green_stream():
    cmap = ClusterMap(0, np.arange(40) // 4)           # 10 clusters
    green = sorted(prf_partition(KEY, 0, (), 10, 0.3).members)
    tokens = [[4 * c + 1] for c in (green * 2)[:4]]
    g, n = count_green(TokenStream(tokens, (40,)), config(gamma=0.3, context_h=0), [cmap])
    assert (g.tolist(), n.tolist()) == ([4], [4])


def test_noiseless_round_trip_count_equals_trace_flags():
    cfg = config(gamma=0.25, delta=2.0, context_h=0, watermarked_channels=(0, 1))
    tr = generate(SyntheticModel((64, 64), 1.0, 3), cfg, None, 300, 1)
    g, n = count_green(tr.stream, cfg)
    np.testing.assert_array_equal(g, tr.green_flags.sum(axis=0))
    np.testing.assert_array_equal(n, [300, 300])
    rep = detect(tr.stream, cfg)
    assert rep.neg_log10_p > 20


def test_deferral_excludes_steps_symmetrically():
    cfg = config(gamma=0.5, delta=2.0, context_h=1, defer_on_repeated_key=True)
    tr = generate(SyntheticModel((8,), 1.0, 3), cfg, None, 100, 2)
    g, n = count_green(tr.stream, cfg)
    live = ~tr.deferred_flags[:, 0]
    assert n[0] == live.sum() <= 9
    assert g[0] == (tr.green_flags[:, 0] & live).sum()


def test_null_counts_near_gamma():
    cfg = config(gamma=0.25, delta=0.0, context_h=1)
    total_g = total_n = 0
    for t in range(30):
        tr = generate(SyntheticModel((128,), 1.0, t), cfg, None, 200, 50 + t)
        g, n = count_green(tr.stream, cfg)
        total_g, total_n = total_g + g[0], total_n + n[0]
    assert abs(total_g / total_n - 0.25) <= 3 * math.sqrt(0.25 * 0.75 / total_n)


def test_wrong_key_detection_is_calibrated():
    wm = config(gamma=0.25, delta=2.0, context_h=1, watermarked_channels=(0, 1, 2, 3))
    det = config(key=OTHER_KEY, gamma=0.25, delta=2.0, context_h=1, watermarked_channels=(0, 1, 2, 3))
    cal = null_calibration(5000, 200, (64,) * 4, wm, seed=11, detect_config=det)
    assert abs(cal.mean) <= 0.06
    assert 0.93 <= cal.std <= 1.07


def test_vocabulary_and_channel_mismatches():
    y = TokenStream(np.zeros((5, 2), dtype=int), (8, 8))
    with pytest.raises(ShapeError):
        count_green(y, config(), identity_maps((8, 9)))
    with pytest.raises(ConfigurationError):
        count_green(y, config(watermarked_channels=(3,)))


# -- reports -------------------------------------------------------------------------

def test_report_fields_and_csv(tmp_path):
    cfg = config(gamma=0.25, delta=2.0, context_h=1, watermarked_channels=(1,))
    tr = generate(SyntheticModel((32, 32, 32), 1.0, 1), cfg, None, 50, 1)
    rep = detect(tr.stream, cfg, stream_id="s0")
    assert rep.p_value == p_value(rep.z_total)
    assert rep.neg_log10_p == pytest.approx(-math.log10(rep.p_value), rel=1e-12)
    assert "channel 1" in rep.summary()
    buf = io.StringIO()
    write_reports_csv(buf, [rep, rep])
    lines = buf.getvalue().splitlines()
    assert lines[0] == "stream_id,z_total,p,neglog10p,G0,G1,G2,N0,N1,N2"
    fields = lines[1].split(",")
    assert fields[4] == "0" and fields[6] == "0" and fields[8] == "50"
    assert float(fields[1]) == rep.z_total
    path = tmp_path / "r.csv"
    path.write_text(buf.getvalue())
    ids, z, p, nl = read_reports_csv(path)
    assert ids == ["s0", "s0"] and z[0] == rep.z_total and p[0] == rep.p_value and nl[0] == rep.neg_log10_p


def test_reports_compare_by_value():
    cfg = config(gamma=0.25)
    y = TokenStream(np.arange(20).reshape(-1, 1) % 8, (8,))
    assert detect(y, cfg) == detect(y, cfg)
    assert detect(y, cfg) != detect(y, config(gamma=0.5))
