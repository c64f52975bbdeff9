import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from prs4d import metrics
from prs4d.constellation import Constellation4D, get_format, make_pm8qam
from prs4d.metrics import (
    CurvePoint,
    GmiEstimate,
    awgn_gmi_sweep,
    ber_count,
    gmi_from_llrs,
    llr_exact,
    llr_maxlog,
    ngmi,
    required_snr_at,
)


def llr_direct(c, y, sigma2):
    """Plain double loop over points and bits; no log-sum-exp."""
    m = c.bits_per_symbol
    out = np.empty((len(y), m))
    for n, yn in enumerate(y):
        w = [math.exp(-float(np.sum((yn - p) ** 2)) / (2 * sigma2)) for p in c.points]
        for i in range(m):
            num = sum(wj for wj, b in zip(w, c.bits[:, i]) if b == 0)
            den = sum(wj for wj, b in zip(w, c.bits[:, i]) if b == 1)
            out[n, i] = math.log(num) - math.log(den)
    return out


def antipodal():
    return Constellation4D(np.array([[1.0, 0, 0, 0], [-1.0, 0, 0, 0]]), [0, 1])


class TestLlr:
    def test_matches_direct_summation(self, formats):
        rng = np.random.default_rng(1)
        for name, c in formats.items():
            idx = rng.integers(0, 64, 334)
            y = c.points[idx] + rng.normal(0, np.sqrt(0.5), (334, 4))
            assert np.max(np.abs(llr_exact(c, y, 0.5) - llr_direct(c, y, 0.5))) < 1e-12

    def test_sign_convention(self, formats):
        c = formats["pm8qam"]
        llr = llr_exact(c, c.points, 1e-3)
        assert np.all(np.where(c.bits == 0, llr > 10, llr < -10))

    def test_equidistant_zero(self):
        assert llr_exact(antipodal(), np.zeros((1, 4)), 0.3)[0, 0] == 0.0
        assert llr_maxlog(antipodal(), np.zeros((1, 4)), 0.3)[0, 0] == 0.0

    @pytest.mark.parametrize("sigma2", [0.0, -1.0])
    def test_rejects_bad_variance(self, sigma2):
        with pytest.raises(ValueError):
            llr_exact(antipodal(), np.zeros((1, 4)), sigma2)
        with pytest.raises(ValueError):
            llr_maxlog(antipodal(), np.zeros((1, 4)), sigma2)

    def test_finite_far_from_constellation(self, formats):
        y = np.array([[1e3, -1e3, 5e2, 0.0]])
        assert np.all(np.isfinite(llr_exact(formats["4d-64prs"], y, 1e-4)))

    def test_maxlog_at_point_small_noise(self, rng):
        # generic point set: one dominant term on each side of every bit
        c = Constellation4D(rng.standard_normal((64, 4)), np.arange(64))
        sigma2 = 1e-7
        assert np.max(np.abs(llr_maxlog(c, c.points, sigma2) - llr_exact(c, c.points, sigma2))) < 1e-9

    def test_maxlog_gap_symmetric_format(self, formats):
        # equidistant competitors: the gap is ln(count), bounded by ln(32)
        c = formats["2a8psk"]
        gap = np.abs(llr_maxlog(c, c.points, 1e-4) - llr_exact(c, c.points, 1e-4))
        assert np.max(gap) <= np.log(32) + 1e-9

    def test_maxlog_sign_agreement(self, formats):
        c = formats["pm8qam"]
        idx, y, sigma2 = metrics.awgn_batch(c, 12.0, 20000, 5)
        a = np.sign(llr_maxlog(c, y, sigma2))
        b = np.sign(llr_exact(c, y, sigma2))
        assert np.mean(a == b) >= 0.99


class TestGmi:
    def test_zero_llrs(self, rng):
        bits = rng.integers(0, 2, (1000, 6))
        assert gmi_from_llrs(bits, np.zeros((1000, 6))).value == 0.0

    def test_perfect_llrs(self, rng):
        bits = rng.integers(0, 2, (1000, 6))
        llr = np.where(bits == 0, np.inf, -np.inf)
        g = gmi_from_llrs(bits, llr).value
        assert 0 <= 6 - g < 1e-12

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            gmi_from_llrs(np.zeros((10, 6)), np.zeros((9, 6)))

    def test_high_snr_saturates(self, formats):
        for c in formats.values():
            idx, y, sigma2 = metrics.awgn_batch(c, 30.0, 20000, 2)
            g = gmi_from_llrs(c.bits[idx], llr_exact(c, y, sigma2))
            assert abs(g.value - 6) < 0.01

    def test_standard_error_of_summand(self, rng):
        bits = rng.integers(0, 2, (500, 2))
        llr = rng.normal(2, 2, (500, 2)) * (1 - 2 * bits)
        loss = np.sum(np.log2(1 + np.exp(-(1 - 2 * bits) * llr)), axis=1)
        g = gmi_from_llrs(bits, llr)
        assert g.value == pytest.approx(2 - loss.mean(), abs=1e-12)
        assert g.std_error == pytest.approx(loss.std(ddof=1) / np.sqrt(500), rel=1e-12)

    @pytest.mark.parametrize("gmi, expected", [(5.1, 0.85), (0.0, 0.0), (6.0, 1.0)])
    def test_ngmi(self, gmi, expected):
        assert ngmi(gmi, 6) == pytest.approx(expected, abs=1e-15)
        assert ngmi(GmiEstimate(gmi, 0.0, 1), 6) == pytest.approx(expected, abs=1e-15)

    def test_ngmi_threshold_exact(self):
        assert ngmi(5.1, 6) == 5.1 / 6


class TestSweep:
    def test_saturation(self, formats):
        for c in formats.values():
            assert abs(awgn_gmi_sweep(c, [30.0], 20000, 0)[0].gmi.value - 6) < 0.02

    def test_monotone_and_bounded(self, formats):
        grid = np.arange(4.0, 16.01, 1.0)
        for c in formats.values():
            curve = awgn_gmi_sweep(c, grid, 20000, 4)
            for a, b in zip(curve, curve[1:]):
                assert b.gmi.value >= a.gmi.value - 2 * np.hypot(a.gmi.std_error, b.gmi.std_error)
            for p in curve:
                assert 0 <= p.gmi.value <= 6 + 3 * p.gmi.std_error

    def test_workers_do_not_change_result(self, formats):
        c = formats["4d-64prs"]
        a = awgn_gmi_sweep(c, [8.0, 10.0], 50000, 9, workers=1, chunk_symbols=4096)
        b = awgn_gmi_sweep(c, [8.0, 10.0], 50000, 9, workers=4, chunk_symbols=4096)
        assert a == b

    def test_exact_beats_maxlog(self, formats):
        c = formats["pm8qam"]
        grid = [6.0, 9.0, 12.0]
        ex = awgn_gmi_sweep(c, grid, 50000, 1)
        ml = awgn_gmi_sweep(c, grid, 50000, 1, maxlog=True)
        for a, b in zip(ex, ml):
            assert a.gmi.value >= b.gmi.value - 2 * np.hypot(a.gmi.std_error, b.gmi.std_error)

    def test_empty_grid(self, formats):
        with pytest.raises(ValueError):
            awgn_gmi_sweep(formats["pm8qam"], [], 1000, 0)

    def test_pm8qam_regression(self):
        # Frozen output of this sweep (grid 8..10 dB step 0.25, 2**18 symbols, seed 7).
        curve = awgn_gmi_sweep(make_pm8qam(), np.arange(8.0, 10.01, 0.25), 1 << 18, 7)
        assert required_snr_at(curve, 5.1) == pytest.approx(8.937768667701006, abs=1e-9)

    def test_fused_llrs_match_exact(self, formats):
        c = formats["2a8psk"]
        idx, y, sigma2 = metrics.awgn_batch(c, 9.0, 2000, 3)
        fused, nearest = metrics._llr_fused(c, y, sigma2)
        assert np.max(np.abs(fused - llr_exact(c, y, sigma2))) < 1e-9


class TestThresholds:
    def test_interpolation(self):
        assert required_snr_at([(10.0, 5.0), (11.0, 5.2)], 5.1) == pytest.approx(10.5)

    def test_on_grid_point(self):
        assert required_snr_at([(9.0, 4.8), (10.0, 5.1), (11.0, 5.4)], 5.1) == 10.0

    def test_not_bracketed(self):
        with pytest.raises(ValueError):
            required_snr_at([(10.0, 5.0), (11.0, 5.2)], 5.5)

    def test_curve_points_accepted(self):
        curve = [CurvePoint(10.0, GmiEstimate(5.0, 0, 1), 0.1), CurvePoint(11.0, GmiEstimate(5.2, 0, 1), 0.01)]
        assert required_snr_at(curve, 5.1) == pytest.approx(10.5)
        assert metrics.snr_at_ber(curve, 10**-1.5) == pytest.approx(10.5)

    @given(st.floats(0.0, 1.0), st.floats(1.0, 20.0), st.floats(0.1, 3.0))
    def test_crossing_inside_bracket(self, frac, s0, width):
        g0, g1 = 4.0, 6.0
        thr = g0 + frac * (g1 - g0)
        s = required_snr_at([(s0, g0), (s0 + width, g1)], thr)
        assert s0 - 1e-9 <= s <= s0 + width + 1e-9


class TestBer:
    def test_identical(self, rng):
        b = rng.integers(0, 2, 1000)
        assert ber_count(b, b) == (0, 1000, 0.0)

    def test_complement(self, rng):
        b = rng.integers(0, 2, 1000)
        assert ber_count(b, 1 - b)[2] == 1.0

    def test_injected(self, rng):
        b = rng.integers(0, 2, 10**6)
        r = b.copy()
        pos = rng.choice(10**6, 100, replace=False)
        r[pos] ^= 1
        assert ber_count(b, r) == (100, 10**6, 1e-4)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            ber_count([0, 1], [0])


@given(st.floats(-20, 40))
def test_snr_variance_roundtrip(snr):
    assert metrics.snr_db_from_variance(metrics.noise_variance(snr)) == pytest.approx(snr, abs=1e-9)


def test_curve_csv(tmp_path, formats):
    curve = awgn_gmi_sweep(formats["pm8qam"], [8.0, 9.0], 5000, 0)
    p = tmp_path / "c.csv"
    metrics.write_curve_csv(curve, 6, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "# schema=gmi_curve/1"
    assert lines[1] == "snr_db,gmi,gmi_stderr,ngmi,ber"
    assert len(lines) == 4
