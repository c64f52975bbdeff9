import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import constants

from prs4d import channel as ch
from prs4d import rxdsp
from prs4d.channel import AmplifierModel, FiberParams, LoopConfig, Waveform
from prs4d.metrics import noise_variance


def random_symbols(c, n, seed):
    return c.points[np.random.default_rng(seed).integers(0, c.size, n)]


def evm_rms(a, b):
    return np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1)) / np.mean(np.sum(b**2, axis=1)))


def rel_rms(a: Waveform, b: Waveform):
    num = np.sum(np.abs(a.x - b.x) ** 2 + np.abs(a.y - b.y) ** 2)
    return np.sqrt(num / np.sum(np.abs(b.x) ** 2 + np.abs(b.y) ** 2))


class TestAwgn:
    def test_huge_snr(self, formats):
        s = random_symbols(formats["pm8qam"], 1000, 0)
        assert np.max(np.abs(ch.awgn_symbols(s, 200.0, 1) - s)) < 1e-9

    def test_variance(self):
        s = np.zeros((10**6, 4))
        v = np.var(ch.awgn_symbols(s, 10.0, 2))
        assert v == pytest.approx(0.025, rel=0.01)
        assert noise_variance(10.0) == pytest.approx(0.025)

    def test_seeded(self, formats):
        s = random_symbols(formats["pm8qam"], 100, 0)
        assert np.array_equal(ch.awgn_symbols(s, 5.0, 9), ch.awgn_symbols(s, 5.0, 9))


class TestPulse:
    def test_impulse_response(self):
        sym = np.zeros((64, 4))
        sym[32, 0] = 1.0
        wf = ch.rrc_shape(sym, 0.25, 2, 16)
        taps = ch.rrc_taps(0.25, 2, 16)
        # shaped output is sqrt(sps) * taps centered on the impulse
        out = wf.x.real[64 - 16: 64 + 17] / np.sqrt(2)
        assert np.allclose(out, taps, atol=1e-12)

    def test_unit_energy_taps(self):
        assert np.sum(ch.rrc_taps(0.01, 2, ch.LONG_RRC_SPAN) ** 2) == pytest.approx(1.0, abs=1e-12)

    def test_even_tap_count(self):
        with pytest.raises(ValueError):
            ch.rrc_taps(0.1, 3, 5)

    @pytest.mark.parametrize("sps", [0, 1])
    def test_invalid_sps(self, sps):
        with pytest.raises(ValueError):
            ch.rrc_shape(np.zeros((8, 4)), 0.01, sps)

    def test_stopband(self):
        taps = ch.rrc_taps(0.01, 2, ch.LONG_RRC_SPAN)
        n = 1 << 16
        h = np.abs(np.fft.fft(taps, n))
        f = np.abs(np.fft.fftfreq(n, 1 / 2))  # in units of the symbol rate
        assert 20 * np.log10(h[f > 0.505].max() / h.max()) < -40

    def test_nyquist_cascade(self):
        taps = ch.rrc_taps(0.01, 2, ch.LONG_RRC_SPAN)
        rc = np.convolve(taps, taps)
        mid = len(rc) // 2
        isi = np.delete(rc[mid % 2::2], mid // 2)
        assert 20 * np.log10(np.max(np.abs(isi)) / rc[mid]) < -40

    @pytest.mark.parametrize("span", [None, ch.LONG_RRC_SPAN])
    def test_back_to_back(self, formats, span):
        s = random_symbols(formats["4d-64prs"], 1 << 14, 1)
        wf = ch.rrc_shape(s, 0.01, 2, span)
        assert wf.power == pytest.approx(np.mean(np.sum(s**2, axis=1)), rel=1e-2)
        rx = ch.matched_filter(wf, 0.01, 2, span)
        assert evm_rms(rx, s) < 5e-3

    def test_resample_roundtrip(self, formats):
        wf = ch.rrc_shape(random_symbols(formats["pm8qam"], 4096, 2))
        back = ch.resample(ch.resample(wf, 2, 6), 6, 2)
        assert rel_rms(back, wf) < 1e-9

    def test_wdm_center_channel(self, formats):
        s = random_symbols(formats["pm8qam"], 1 << 13, 3)
        wf = ch.wdm_multiplex(s, 3, 6)
        rx = ch.resample(wf, 6, 2)
        assert evm_rms(ch.matched_filter(rx, 0.01, 2), s) < 1e-6


def cw(power_w, n=256, fs=1e11):
    a = np.sqrt(power_w / 2)
    return Waveform(np.full(n, a, dtype=complex), np.full(n, a * 1j, dtype=complex), fs)


class TestPropagation:
    def test_linear_unitary_roundtrip(self, formats):
        wf = ch.rrc_shape(random_symbols(formats["pm8qam"], 4096, 0))
        fiber = FiberParams(alpha_db_per_km=0.0, gamma_per_w_km=0.0)
        out = ch.ssfm_propagate(wf, fiber)
        assert abs(out.power / wf.power - 1) < 1e-9
        back = rxdsp.cd_compensate(out, fiber.dispersion_ps_nm_km * fiber.length_km)
        assert max(np.max(np.abs(back.x - wf.x)), np.max(np.abs(back.y - wf.y))) < 1e-9

    def test_attenuation(self, formats):
        wf = ch.rrc_shape(random_symbols(formats["pm8qam"], 1024, 0))
        out = ch.ssfm_propagate(wf, FiberParams(gamma_per_w_km=0.0))
        assert 10 * np.log10(out.power / wf.power) == pytest.approx(-15.0, abs=1e-9)

    @given(st.floats(1e-4, 0.1), st.floats(1.0, 100.0))
    def test_cw_phase(self, power, length):
        fiber = FiberParams(length_km=length, alpha_db_per_km=0.0, dispersion_ps_nm_km=0.0)
        wf = cw(power)
        out = ch.ssfm_propagate(wf, fiber)
        phi = fiber.gamma_per_w_km * 8 / 9 * power * length
        assert np.max(np.abs(np.abs(out.x) - np.abs(wf.x))) < 1e-9
        assert np.max(np.abs(out.x - wf.x * np.exp(1j * phi))) < 1e-9 * max(1.0, phi)
        assert np.max(np.abs(out.y - wf.y * np.exp(1j * phi))) < 1e-9 * max(1.0, phi)

    @given(st.integers(0, 2**31), st.floats(-5.0, 10.0))
    def test_lossless_energy_conserved(self, seed, p_dbm):
        rng = np.random.default_rng(seed)
        n = 512
        wf = Waveform(rng.standard_normal(n) + 1j * rng.standard_normal(n), rng.standard_normal(n) + 1j * rng.standard_normal(n), 8.4e10)
        wf = wf.scaled(np.sqrt(ch.dbm_to_w(p_dbm) / wf.power))
        out = ch.ssfm_propagate(wf, FiberParams(length_km=10.0, alpha_db_per_km=0.0), step_km=1.0)
        assert abs(out.power / wf.power - 1) < 1e-9

    @pytest.mark.parametrize("p_dbm", [0.0, 3.0, 6.0])
    def test_step_halving(self, formats, p_dbm):
        wf = ch.rrc_shape(random_symbols(formats["pm8qam"], 1 << 12, 4)).scaled(np.sqrt(ch.dbm_to_w(p_dbm)))
        fiber = FiberParams()
        a = ch.ssfm_propagate(wf, fiber)
        b = ch.ssfm_propagate(wf, fiber, max_nl_phase=2.5e-3, max_step_km=0.5)
        assert rel_rms(a, b) < 1e-4

    def test_fixed_step_halving(self, formats):
        wf = ch.rrc_shape(random_symbols(formats["pm8qam"], 1 << 12, 4)).scaled(np.sqrt(ch.dbm_to_w(3.0)))
        a = ch.ssfm_propagate(wf, FiberParams(), step_km=0.1)
        b = ch.ssfm_propagate(wf, FiberParams(), step_km=0.05)
        assert rel_rms(a, b) < 1e-4

    @pytest.mark.parametrize("step", [100.0, 0.0, -1.0])
    def test_bad_step(self, step):
        with pytest.raises(ValueError):
            ch.ssfm_propagate(cw(1e-3), FiberParams(), step_km=step)

    def test_fiber_validation(self):
        with pytest.raises(ValueError):
            FiberParams(length_km=0.0)
        with pytest.raises(ValueError):
            FiberParams(alpha_db_per_km=-0.1)

    def test_beta2(self):
        # 17 ps/nm/km at 1550 nm
        assert FiberParams().beta2_s2_per_km * 1e24 == pytest.approx(-21.68, abs=0.01)

    def test_polarization_rotation_unitary(self, formats):
        wf = ch.rrc_shape(random_symbols(formats["pm8qam"], 1024, 0))
        out = ch.random_polarization_rotation(wf, np.random.default_rng(1))
        inst_in = np.abs(wf.x) ** 2 + np.abs(wf.y) ** 2
        inst_out = np.abs(out.x) ** 2 + np.abs(out.y) ** 2
        assert np.allclose(inst_in, inst_out, rtol=1e-12)


class TestAmplifier:
    def test_psd(self):
        amp = AmplifierModel(15.0, 5.0)
        n = 10**6
        zero = Waveform(np.zeros(n, complex), np.zeros(n, complex), 1e11)
        out = ch.amplify(zero, amp, 0)
        nu = constants.c / 1550e-9
        formula = (10**1.5 * 10**0.5 - 1) * constants.h * nu / 2
        for pol in (out.x, out.y):
            assert np.mean(np.abs(pol) ** 2) / 1e11 == pytest.approx(formula, rel=0.02)
        assert amp.ase_psd_per_pol == pytest.approx(formula, rel=1e-12)

    def test_white(self):
        n = 1 << 18
        zero = Waveform(np.zeros(n, complex), np.zeros(n, complex), 1e11)
        out = ch.amplify(zero, AmplifierModel(15.0), 1)
        spec = np.abs(np.fft.fft(out.x)) ** 2
        halves = [spec[: n // 2].mean(), spec[n // 2:].mean()]
        assert halves[0] == pytest.approx(halves[1], rel=0.02)

    def test_gain(self, formats):
        wf = ch.rrc_shape(random_symbols(formats["pm8qam"], 1 << 17, 0)).scaled(np.sqrt(1e-3))
        amp = AmplifierModel(15.0)
        out = ch.amplify(wf, amp, 2)
        ase = 2 * amp.ase_psd_per_pol * wf.sample_rate
        assert (out.power - ase) / wf.power == pytest.approx(10**1.5, rel=1e-3)

    def test_low_nf_warns(self):
        with pytest.warns(UserWarning, match="quantum limit"):
            ch.amplify(cw(1e-3), AmplifierModel(10.0, 2.0), 0)

    def test_nominal_nf_silent(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            ch.amplify(cw(1e-3), AmplifierModel(10.0, 5.0), 0)

    def test_zero_length(self):
        empty = Waveform(np.zeros(0, complex), np.zeros(0, complex), 1e9)
        assert len(ch.amplify(empty, AmplifierModel(10.0), 0)) == 0

    def test_negative_gain(self):
        with pytest.raises(ValueError):
            AmplifierModel(-1.0)


def measured_snr_db(wf, symbols, dispersion):
    rx = ch.matched_filter(rxdsp.cd_compensate(wf, dispersion))
    a = np.sum(rx * symbols) / np.sum(symbols**2)
    return 10 * np.log10(np.sum((a * symbols) ** 2) / np.sum((rx - a * symbols) ** 2))


class TestLoop:
    def test_one_circulation_is_composition(self, formats):
        wf = ch.rrc_shape(random_symbols(formats["pm8qam"], 2048, 0))
        fiber = FiberParams(length_km=20.0)
        amp = AmplifierModel.edfa(fiber)
        loop = LoopConfig(1, 1, 2.0)
        _, got = next(ch.run_loop(wf, fiber, amp, loop, 5))
        cur = wf.scaled(np.sqrt(loop.launch_power_w / wf.power))
        cur = ch.amplify(ch.ssfm_propagate(cur, fiber), amp, ch._seed(5, 0, 0, 0))
        cur = cur.scaled(np.sqrt(loop.launch_power_w / cur.power))
        assert np.array_equal(got.x, cur.x) and np.array_equal(got.y, cur.y)

    def test_linear_snr_matches_budget(self, formats):
        s = random_symbols(formats["pm8qam"], 1 << 14, 0)
        wf = ch.rrc_shape(s)
        fiber = FiberParams(gamma_per_w_km=0.0)
        amp = AmplifierModel.edfa(fiber)
        loop = LoopConfig(5, 8, -8.0)
        expected = ch.loop_snr_db(fiber, amp, loop, ch.SYMBOL_RATE, wf.sample_rate)
        for k, out in ch.run_loop(wf, fiber, amp, loop, 1):
            got = measured_snr_db(out, s, fiber.dispersion_ps_nm_km * fiber.length_km * 5 * k)
            assert got == pytest.approx(expected[k - 1], abs=0.2)

    def test_resume_matches_uninterrupted(self, formats, tmp_path):
        wf = ch.rrc_shape(random_symbols(formats["pm8qam"], 1024, 0))
        fiber = FiberParams(length_km=10.0)
        amp = AmplifierModel.edfa(fiber)
        loop = LoopConfig(2, 3, 1.0, polarization_scrambling=True)
        full = list(ch.run_loop(wf, fiber, amp, loop, 7))
        path = tmp_path / "c1.bin"
        ch.save_waveform(full[0][1], path)
        saved = ch.load_waveform(path)
        assert np.allclose(saved.x, full[0][1].x, atol=1e-6)
        resumed = list(ch.run_loop(full[0][1], fiber, amp, loop, 7, start_circulation=1))
        assert [k for k, _ in resumed] == [2, 3]
        for (_, a), (_, b) in zip(full[1:], resumed):
            assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)

    def test_seeded(self, formats):
        wf = ch.rrc_shape(random_symbols(formats["pm8qam"], 512, 0))
        fiber = FiberParams(length_km=10.0)
        loop = LoopConfig(1, 2, 0.0)
        a = [w.x for _, w in ch.run_loop(wf, fiber, AmplifierModel.edfa(fiber), loop, 3)]
        b = [w.x for _, w in ch.run_loop(wf, fiber, AmplifierModel.edfa(fiber), loop, 3)]
        assert all(np.array_equal(u, v) for u, v in zip(a, b))

    def test_budget_decreasing(self):
        fiber = FiberParams()
        snr = ch.loop_snr_db(fiber, AmplifierModel.edfa(fiber), LoopConfig(5, 20, 0.0), ch.SYMBOL_RATE, 2 * ch.SYMBOL_RATE)
        assert np.all(np.diff(snr) < 0)
        # ten-fold distance costs about 10 dB; flattening also rescales the
        # out-of-band noise, which takes a little more
        assert snr[0] - snr[9] == pytest.approx(10.0, abs=0.2)

    def test_loop_validation(self):
        with pytest.raises(ValueError):
            LoopConfig(0, 1)


class TestCheckpoint:
    def test_corrupt(self, tmp_path):
        p = tmp_path / "w.bin"
        p.write_bytes(b"XXXX" + bytes(20))
        with pytest.raises(ValueError):
            ch.load_waveform(p)

    def test_truncated(self, tmp_path):
        wf = cw(1e-3, n=16)
        p = tmp_path / "w.bin"
        ch.save_waveform(wf, p)
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(ValueError, match="length"):
            ch.load_waveform(p)

    def test_waveform_validation(self):
        with pytest.raises(ValueError):
            Waveform(np.zeros(3), np.zeros(4), 1.0)
        with pytest.raises(ValueError):
            Waveform(np.zeros(3), np.zeros(3), 0.0)
