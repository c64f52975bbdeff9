import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from prs4d import metrics
from prs4d import optimizer as O
from prs4d.constellation import Constellation4D, ConstellationError, distinct_sops, energy_variance, make_2a8psk_6b, make_pm8qam
from prs4d.metrics import awgn_gmi_sweep


def cfg(**kw):
    base = dict(target_snr_db=8.65, max_iters=5, n_mc_symbols=2000, seed=1)
    base.update(kw)
    return O.OptimizerConfig(**base)


def gray_pm_qpsk():
    # Gray QPSK per polarization: bit 0 -> sign of I, bit 1 -> sign of Q
    pts, labels = [], []
    for lab in range(16):
        b = [(lab >> (3 - i)) & 1 for i in range(4)]
        s = [1 - 2 * v for v in b]
        pts.append(s)
        labels.append(lab)
    return Constellation4D(np.array(pts, dtype=float), labels, "gray-pm-qpsk")


class TestConfig:
    @pytest.mark.parametrize(
        "kw",
        [
            dict(step_size=0.0),
            dict(max_iters=-1),
            dict(constraint="box"),
            dict(gradient="adjoint"),
            dict(init_jitter=-0.1),
            dict(n_mc_symbols=1),
        ],
    )
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            cfg(**kw)


class TestGradient:
    @pytest.mark.parametrize("name", ["pm8qam", "2a8psk", "4d-64prs"])
    def test_finite_difference_agrees(self, formats, name):
        c = formats[name]
        idx, z, sigma2 = O._batch(c, 9.0, 300, 4, 0)
        bits = c.bits.astype(float)
        _, _, g = O.gmi_gradient(c.points, bits, sigma2, idx, z)
        fd = O.finite_difference_gradient(c.points, bits, sigma2, idx, z)
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-3

    def test_gradient_value_matches_batch_gmi(self, formats):
        c = formats["pm8qam"]
        idx, z, sigma2 = O._batch(c, 9.0, 500, 4, 0)
        bits = c.bits.astype(float)
        assert O.gmi_gradient(c.points, bits, sigma2, idx, z)[0] == pytest.approx(O.batch_gmi(c.points, bits, sigma2, idx, z)[0], abs=1e-12)


class TestProjection:
    def test_norm_two_point(self):
        pts = np.array([[2.0, 0, 0, 0], [0, 0.5, 0, 0]])
        assert np.allclose(np.linalg.norm(O.project_constant_modulus(pts), axis=1), 1.0)

    def test_constant_modulus_unchanged(self):
        c = make_2a8psk_6b()
        assert np.max(np.abs(O.project_constant_modulus(c).points - c.points)) < 1e-15

    def test_zero_point(self):
        with pytest.raises(ConstellationError):
            O.project_constant_modulus(np.zeros((2, 4)))

    @given(st.integers(0, 2**31))
    def test_projection_idempotent(self, seed):
        pts = np.random.default_rng(seed).standard_normal((8, 4))
        once = O.project_constant_modulus(pts)
        assert np.allclose(O.project_constant_modulus(once), once, atol=1e-15)
        assert np.var(np.sum(once**2, axis=1)) < 1e-20


class TestOptimize:
    def test_zero_iterations_returns_input(self):
        c = make_2a8psk_6b()
        res = O.optimize_gmi(c, cfg(max_iters=0, init_jitter=0.05))
        assert res.constellation == c
        assert len(res.trace) == 1

    def test_trace_length(self):
        res = O.optimize_gmi(make_2a8psk_6b(), cfg(max_iters=7))
        assert [t.iter for t in res.trace] == list(range(8))

    def test_antipodal_stationary(self):
        c = Constellation4D(np.array([[1.0, 0, 0, 0], [-1.0, 0, 0, 0]]), [0, 1])
        res = O.optimize_gmi(c, cfg(max_iters=20, target_snr_db=0.0, n_mc_symbols=5000))
        assert np.max(np.abs(res.constellation.points - c.points)) < 0.05
        assert abs(res.trace[-1].gmi - res.trace[0].gmi) < 3 * res.trace[0].gmi_stderr

    @pytest.mark.parametrize("constraint", O.CONSTRAINTS)
    @pytest.mark.parametrize("iters", [1, 4])
    def test_constraint_after_each_iteration(self, constraint, iters):
        c0 = make_2a8psk_6b()
        out = O.optimize_gmi(c0, cfg(max_iters=iters, constraint=constraint, init_jitter=0.02)).constellation
        if constraint != "unconstrained":
            assert energy_variance(out) < 1e-20
        assert abs(np.mean(np.sum(out.points**2, axis=1)) - 1) < 1e-12
        if constraint == "prs-structured":
            assert distinct_sops(out, 1e-6) == 16
        if constraint == "constant-modulus":
            assert distinct_sops(out, 1e-6) <= 64

    def test_monotone_trace(self):
        res = O.optimize_gmi(make_2a8psk_6b(), cfg(max_iters=30, constraint="prs-structured", init_jitter=0.02))
        for a, b in zip(res.trace, res.trace[1:]):
            assert b.gmi >= a.gmi - 2 * a.gmi_stderr

    def test_deterministic(self):
        a = O.optimize_gmi(make_2a8psk_6b(), cfg(max_iters=5, init_jitter=0.02))
        b = O.optimize_gmi(make_2a8psk_6b(), cfg(max_iters=5, init_jitter=0.02))
        assert np.array_equal(a.constellation.points, b.constellation.points)
        assert a.trace == b.trace

    def test_improves_2a8psk(self):
        c0 = make_2a8psk_6b()
        res = O.optimize_gmi(c0, cfg(max_iters=150, n_mc_symbols=4000, constraint="constant-modulus"))
        # paired comparison on common noise
        diffs = []
        for c in (c0, res.constellation):
            idx, y, sigma2 = metrics.awgn_batch(c, 8.65, 200000, 11)
            diffs.append(metrics.gmi_summands(c.bits[idx], metrics.llr_exact(c, y, sigma2)))
        d = diffs[0] - diffs[1]
        assert d.mean() > 2 * d.std(ddof=1) / np.sqrt(d.size)

    def test_finite_difference_path(self):
        c = Constellation4D(np.random.default_rng(0).standard_normal((4, 4)), np.arange(4))
        res = O.optimize_gmi(c, cfg(max_iters=2, gradient="finite-difference", constraint="unconstrained", n_mc_symbols=200))
        assert len(res.trace) == 3

    def test_non_finite_gradient(self, monkeypatch):
        def bad(points, bits, sigma2, idx, z):
            return 0.0, 0.0, np.full_like(points, np.nan)

        monkeypatch.setattr(O, "gmi_gradient", bad)
        with pytest.raises(O.OptimizerError, match="iteration 1"):
            O.optimize_gmi(make_2a8psk_6b(), cfg(max_iters=3))


class TestLabeling:
    def test_gray_toy_no_swaps(self):
        c = gray_pm_qpsk()
        out = O.labeling_search(c, cfg(target_snr_db=6.0, n_mc_symbols=5000), max_swaps=100)
        assert np.array_equal(out.labels, c.labels)

    def test_gray_toy_exhaustive(self):
        # every single swap lowers the batch GMI
        c = gray_pm_qpsk()
        config = cfg(target_snr_db=6.0, n_mc_symbols=5000)
        idx, z, sigma2 = O._batch(c, 6.0, 5000, config.seed, O._EVAL_STREAM + 1)
        base = O.batch_gmi(c.points, c.bits.astype(float), sigma2, idx, z)[0]
        for i in range(16):
            for j in range(i + 1, 16):
                lab = c.labels.copy()
                lab[i], lab[j] = lab[j], lab[i]
                assert O.batch_gmi(c.points, c.with_labels(lab).bits.astype(float), sigma2, idx, z)[0] < base

    def test_random_labels_improve(self):
        c = make_pm8qam()
        shuffled = c.with_labels(np.random.default_rng(3).permutation(64))
        config = cfg(target_snr_db=10.0, n_mc_symbols=3000)
        out = O.labeling_search(shuffled, config, max_swaps=200)
        before = awgn_gmi_sweep(shuffled, [10.0], 100000, 2)[0].gmi.value
        after = awgn_gmi_sweep(out, [10.0], 100000, 2)[0].gmi.value
        assert after > before
        assert sorted(out.labels) == list(range(64))

    def test_single_swap_budget(self):
        c = make_pm8qam()
        shuffled = c.with_labels(np.random.default_rng(3).permutation(64))
        out = O.labeling_search(shuffled, cfg(target_snr_db=10.0, n_mc_symbols=1000), max_swaps=1)
        assert np.count_nonzero(out.labels != shuffled.labels) in (0, 2)


def test_shape_format_trace_and_output(tmp_path):
    res = O.shape_format(make_2a8psk_6b(), cfg(max_iters=3, constraint="prs-structured", init_jitter=0.02))
    assert len(res.trace) == 4
    assert distinct_sops(res.constellation, 1e-6) == 16
    p = tmp_path / "t.csv"
    O.write_trace_csv(res.trace, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "# schema=optimizer_trace/1" and len(lines) == 6
