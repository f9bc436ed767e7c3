import math

import numpy as np
import pytest

from mxblock.analysis import (
    aqn_total_noise,
    cross_term_vs_blocksize,
    cumulative_scale_bias,
    deadzone_truncate,
    effective_rank,
    effective_temperature_fit,
    effective_temperature_predict,
    gamma_stats,
    gemm_error_propagation,
)
from mxblock.corrections import AqnSchedule, MbsConfig
from mxblock.decompose import decompose_tensor
from mxblock.formats import ceil_scale_array
from mxblock.quantize import BlockQuantConfig, block_view, qdq_views
from mxblock.tensorstore import SynthSpec, synth


class TestGammaStats:
    def test_power_of_two_maxima_degenerate(self):
        # block maxima of 6 * 2^k make s_star an exact power of two, so
        # the ceiling is free: delta 0, gamma 1
        rng = np.random.default_rng(80)
        x = rng.uniform(-0.5, 0.5, size=(1200, 32))
        x[:, 0] = 6.0 * 2.0 ** (np.arange(1200) % 3 - 1)
        st = gamma_stats(x)
        assert st.mean_gamma == 1.0
        assert st.rms_delta == 0.0
        assert st.rmse_gamma_minus_1 == 0.0
        assert st.n_blocks == 1200 and st.skipped_blocks == 0

    def test_lognormal_maxima_match_uniform_delta_theory(self):
        x = synth(SynthSpec("lognormal_max_blocks", (20_000, 32), seed=81)
                  ).arrays()["lognormal_max_blocks_0000"]
        st = gamma_stats(x)
        assert 1.42 <= st.mean_gamma <= 1.46        # 1/ln 2 = 1.4427
        assert 0.55 <= st.rms_delta <= 0.59         # 1/sqrt(3) = 0.5774
        assert 0.50 <= st.rmse_gamma_minus_1 <= 0.55
        assert abs(st.mean_delta - 0.5) < 0.02

    def test_delta_range_and_dual_route(self):
        rng = np.random.default_rng(82)
        x = rng.standard_normal((2000, 32))
        st = gamma_stats(x)
        assert (st.delta >= 0.0).all() and (st.delta < 1.0).all()
        view = block_view(x, BlockQuantConfig())
        s_dec, _, _ = ceil_scale_array(view.s_star, 0)
        np.testing.assert_allclose(np.exp2(st.delta), s_dec / view.s_star,
                                   rtol=1e-12)

    def test_histogram_covers_unit_interval(self):
        rng = np.random.default_rng(83)
        st = gamma_stats(rng.standard_normal((1500, 32)))
        assert st.histogram.sum() == st.n_blocks
        assert st.bin_edges[0] == 0.0 and st.bin_edges[-1] == 1.0

    def test_zero_blocks_skipped(self):
        rng = np.random.default_rng(84)
        x = rng.standard_normal((1100, 32))
        x[7] = 0.0
        x[400] = 0.0
        st = gamma_stats(x)
        assert st.n_blocks == 1098 and st.skipped_blocks == 2

    def test_input_forms_agree(self):
        rng = np.random.default_rng(85)
        a = rng.standard_normal((600, 32))
        b = rng.laplace(size=(600, 32))
        from_map = gamma_stats({"z": b, "a": a})
        from_seq = gamma_stats([a, b])
        assert from_map.n_blocks == from_seq.n_blocks == 1200
        assert np.array_equal(np.sort(from_map.delta), np.sort(from_seq.delta))

    def test_min_blocks(self):
        with pytest.raises(ValueError, match="live blocks"):
            gamma_stats(np.ones((4, 32)))
        st = gamma_stats(np.ones((4, 32)), min_blocks=4)
        assert st.n_blocks == 4

    def test_summary_dict(self):
        rng = np.random.default_rng(86)
        d = gamma_stats(rng.standard_normal((1100, 32))).summary_dict()
        assert {"mean_gamma", "rms_delta", "rmse_gamma_minus_1",
                "n_blocks", "histogram"} <= set(d)


class TestCumulativeScaleBias:
    def test_single_layer_matches_uniform_std(self):
        res = cumulative_scale_bias(1, trials=200_000, seed=0)
        want = math.sqrt(1.0 / 12.0)
        se = want / math.sqrt(2 * (200_000 - 1))
        assert abs(res["std_sum"] - want) < 3 * se

    def test_deep_stack_theory(self):
        res = cumulative_scale_bias(48, trials=100_000, seed=1)
        assert res["theory_std"] == 2.0
        assert 1.95 <= res["std_sum"] <= 2.05
        assert abs(res["mean_sum"] - 24.0) < 0.05

    def test_block_mean_narrows_by_sqrt_k(self):
        res = cumulative_scale_bias(48, trials=50_000, seed=2,
                                    delta_mode="block_mean",
                                    blocks_per_layer=16)
        assert abs(res["std_sum"] - 0.5) < 0.02

    def test_callable_sampler(self):
        res = cumulative_scale_bias(10, delta_sampler=lambda g, s: np.zeros(s),
                                    trials=1000, seed=3)
        assert res["std_sum"] == 0.0 and res["mean_sum"] == 0.0

    def test_bands_recompute(self):
        res = cumulative_scale_bias(36, trials=20_000, seed=4)
        s = res["std_sum"]
        assert res["band_pow2"] == (2.0 ** -s, 2.0 ** s)
        assert res["band_exp"] == (math.exp(-s), math.exp(s))
        # at 36 layers the natural-log reading spans roughly 0.18x to 5.6x
        lo, hi = res["band_exp"]
        assert 0.15 < lo < 0.20 and 5.0 < hi < 6.2

    def test_determinism(self):
        a = cumulative_scale_bias(8, trials=5000, seed=9)
        b = cumulative_scale_bias(8, trials=5000, seed=9)
        c = cumulative_scale_bias(8, trials=5000, seed=10)
        assert a["std_sum"] == b["std_sum"]
        assert a["std_sum"] != c["std_sum"]

    def test_validation(self):
        with pytest.raises(ValueError):
            cumulative_scale_bias(0)
        with pytest.raises(ValueError):
            cumulative_scale_bias(4, trials=999)
        with pytest.raises(ValueError, match="delta_mode"):
            cumulative_scale_bias(4, delta_mode="median")
        with pytest.raises(ValueError, match="delta_sampler"):
            cumulative_scale_bias(4, delta_sampler="gauss")
        with pytest.raises(ValueError):
            cumulative_scale_bias(4, blocks_per_layer=0)


class TestEffectiveTemperature:
    def test_predict_algebra(self):
        assert effective_temperature_predict(0.0, 1.0) == 1.0
        assert effective_temperature_predict(1.0, 2.0) == pytest.approx(
            math.sqrt(2.0), rel=1e-15)
        assert effective_temperature_predict(4.0, 1.0) == 3.0

    def test_predict_validation(self):
        with pytest.raises(ValueError, match="degenerate policy"):
            effective_temperature_predict(1.0, 0.0)
        with pytest.raises(ValueError):
            effective_temperature_predict(-1.0, 1.0)

    def test_fit_sigma_zero(self):
        rng = np.random.default_rng(90)
        fit = effective_temperature_fit(rng.standard_normal(20), 0.0,
                                        draws=10_000)
        assert abs(fit.t_hat - 1.0) <= 1e-6
        assert fit.entropy_noised == fit.entropy_clean

    def test_fit_matches_quadrature_oracle(self):
        # independent route: each pairwise preference averaged over its
        # exact N(0, 2 sigma^2) shift by Gauss-Hermite quadrature, then
        # the same KL objective minimized on a dense log grid
        ell = np.array([0.0, 1.0, -0.8])
        sigma = 0.8
        i_idx, j_idx = np.triu_indices(3, k=1)
        dl = ell[i_idx] - ell[j_idx]
        nodes, weights = np.polynomial.hermite.hermgauss(101)
        shift = math.sqrt(2.0) * math.sqrt(2.0) * sigma * nodes
        p_bar = np.array([
            (weights / math.sqrt(math.pi)
             / (1.0 + np.exp(-(d + shift)))).sum() for d in dl])

        def kl(t):
            q = 1.0 / (1.0 + np.exp(-dl / t))
            return float((p_bar * np.log(p_bar / q)
                          + (1 - p_bar) * np.log((1 - p_bar) / (1 - q))).sum())

        grid = np.exp(np.linspace(math.log(0.5), math.log(10.0), 20_001))
        t_oracle = float(grid[np.argmin([kl(t) for t in grid])])

        fit = effective_temperature_fit(ell, sigma, draws=200_000, seed=1)
        assert fit.t_hat == pytest.approx(t_oracle, rel=0.02)
        assert fit.t_hat > 1.0

    def test_fit_monotone_in_sigma(self):
        rng = np.random.default_rng(91)
        ell = rng.standard_normal(30)
        lo = effective_temperature_fit(ell, 0.4, draws=50_000, seed=0)
        hi = effective_temperature_fit(ell, 0.9, draws=50_000, seed=0)
        assert 1.0 < lo.t_hat < hi.t_hat

    def test_fit_reports(self):
        rng = np.random.default_rng(92)
        ell = rng.standard_normal(25)
        fit = effective_temperature_fit(ell, 0.7, draws=20_000, seed=3)
        i_idx, j_idx = np.triu_indices(25, k=1)
        dl = ell[i_idx] - ell[j_idx]
        assert fit.n_pairs == dl.size
        assert fit.var_delta_ell == pytest.approx(float(dl.var()), rel=1e-12)
        assert fit.t_predicted == effective_temperature_predict(
            0.7 ** 2, fit.var_delta_ell)
        assert fit.entropy_noised > fit.entropy_clean
        assert fit.kl_min >= 0.0

    def test_fit_seed_stability(self):
        rng = np.random.default_rng(93)
        ell = rng.standard_normal(40)
        a = effective_temperature_fit(ell, 0.8, draws=100_000, seed=0)
        b = effective_temperature_fit(ell, 0.8, draws=100_000, seed=7)
        assert a.t_hat == pytest.approx(b.t_hat, rel=0.01)

    def test_fit_validation(self):
        with pytest.raises(ValueError, match="2 logits"):
            effective_temperature_fit([1.0], 0.5)
        with pytest.raises(ValueError, match="draws"):
            effective_temperature_fit([1.0, 2.0], 0.5, draws=5000)
        with pytest.raises(ValueError):
            effective_temperature_fit([1.0, 2.0], -0.5)
        with pytest.raises(ValueError, match="non-finite"):
            effective_temperature_fit([1.0, np.inf], 0.5)


class TestAqnTotalNoise:
    def test_quadrature(self):
        assert aqn_total_noise(3.0, [4.0], 0) == 5.0
        assert aqn_total_noise(0.0, [0.25], 0) == 0.25
        assert aqn_total_noise(0.1, [0.0], 0) == 0.1

    def test_schedule_object_and_monotone(self):
        sched = AqnSchedule(sigma_start=0.02, sigma_end=0.002, num_stages=6)
        totals = [aqn_total_noise(0.005, sched, k) for k in range(6)]
        assert totals == sorted(totals, reverse=True)
        assert totals[0] == math.hypot(0.005, 0.02)

    def test_validation(self):
        with pytest.raises(ValueError):
            aqn_total_noise(-1.0, [0.1], 0)
        with pytest.raises(ValueError, match="stage out of range"):
            aqn_total_noise(0.0, [0.1, 0.2], 2)
        with pytest.raises(ValueError, match="stage out of range"):
            aqn_total_noise(0.0, [0.1], -1)
        with pytest.raises(ValueError, match="1-D"):
            aqn_total_noise(0.0, [[0.1]], 0)
        with pytest.raises(ValueError, match="1-D"):
            aqn_total_noise(0.0, [-0.1], 0)


class TestGemmPropagation:
    def test_isotropic_matches_decomposition_bitwise(self):
        rng = np.random.default_rng(94)
        w = rng.standard_normal((96, 128))
        prop = gemm_error_propagation(w, samples=100, seed=0)
        d = decompose_tensor(w, BlockQuantConfig())
        assert prop.var_total == d.n2_total
        assert prop.var_scale == d.n2_scale
        assert prop.var_dz == d.n2_dz
        assert prop.var_grid == d.n2_grid
        assert prop.cross_scale_grid == d.ip_scale_grid
        assert prop.cross_scale_dz == 0.0 and prop.cross_dz_grid == 0.0
        assert prop.identity_residual <= 1e-12
        assert prop.cov_mode == "isotropic"

    def test_isotropic_variance_scales(self):
        rng = np.random.default_rng(95)
        w = rng.standard_normal((32, 64))
        a = gemm_error_propagation(w, cov=1.0, samples=10)
        b = gemm_error_propagation(w, cov=2.0, samples=10)
        assert b.var_total == 2.0 * a.var_total

    def test_mc_agrees_with_analytic(self):
        rng = np.random.default_rng(96)
        w = rng.standard_normal((128, 128))
        prop = gemm_error_propagation(w, samples=10_000, seed=1)
        assert abs(prop.mc_estimate - prop.var_total) / prop.var_total < 0.02

    def test_diagonal_mode(self):
        rng = np.random.default_rng(97)
        w = rng.standard_normal((48, 64))
        d = rng.uniform(0.5, 2.0, size=64)
        prop = gemm_error_propagation(w, cov=d, samples=100)
        e_t = decompose_tensor(w, BlockQuantConfig()).e_total
        want = float((d * (e_t ** 2).sum(axis=0)).sum())
        assert prop.var_total == pytest.approx(want, rel=1e-12)
        assert prop.cov_mode == "diagonal"

    def test_sample_set_mode(self):
        rng = np.random.default_rng(98)
        w = rng.standard_normal((32, 40))
        xs = rng.standard_normal((500, 40)) * np.linspace(0.5, 2.0, 40)
        prop = gemm_error_propagation(w, cov=xs, samples=2000, seed=2)
        sigma = xs.T @ xs / xs.shape[0]
        e_t = decompose_tensor(w, BlockQuantConfig()).e_total
        want = float(np.trace(e_t.T @ e_t @ sigma))
        assert prop.var_total == pytest.approx(want, rel=1e-9)
        assert prop.cov_mode == "samples"
        # resampling rows reproduces the analytic trace
        assert prop.mc_estimate == pytest.approx(want, rel=0.1)

    def test_mbs_variant(self):
        rng = np.random.default_rng(99)
        w = rng.standard_normal((64, 64))
        plain = gemm_error_propagation(w, samples=10)
        withm = gemm_error_propagation(w, samples=10,
                                       mbs=MbsConfig(macro_block_size=32))
        assert withm.identity_residual <= 1e-9
        assert withm.var_scale < plain.var_scale
        assert abs(withm.dropped_cross_fraction) < 0.1

    def test_validation(self):
        w = np.ones((4, 32))
        with pytest.raises(ValueError, match="2-D"):
            gemm_error_propagation(np.ones(8))
        with pytest.raises(ValueError):
            gemm_error_propagation(w, cov=0.0)
        with pytest.raises(ValueError, match="length mismatch"):
            gemm_error_propagation(w, cov=np.ones(5))
        with pytest.raises(ValueError, match="positive"):
            gemm_error_propagation(w, cov=np.zeros(32))
        with pytest.raises(ValueError, match="width mismatch"):
            gemm_error_propagation(w, cov=np.ones((10, 5)))
        with pytest.raises(ValueError):
            gemm_error_propagation(w, samples=0)


class TestEffectiveRankAndTruncate:
    def test_identity_rank(self):
        assert effective_rank(np.eye(16)) == pytest.approx(16.0, abs=1e-9)

    def test_rank_one(self):
        u = np.arange(1.0, 9.0)
        assert effective_rank(np.outer(u, u)) == pytest.approx(1.0, abs=1e-9)

    def test_scale_invariance(self):
        rng = np.random.default_rng(100)
        m = rng.standard_normal((24, 24))
        assert effective_rank(3.0 * m) == pytest.approx(effective_rank(m),
                                                        rel=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError, match="zero matrix"):
            effective_rank(np.zeros((4, 4)))
        with pytest.raises(ValueError, match="2-D"):
            effective_rank(np.ones(4))

    def test_truncate_zeroes_exactly_the_deadzone(self):
        rng = np.random.default_rng(101)
        x = rng.standard_normal((16, 64))
        cfg = BlockQuantConfig()
        t = deadzone_truncate(x, cfg)
        view = block_view(x, cfg)
        _, _, dead, _ = qdq_views(view, cfg)
        dead_full = view.restore(dead.astype(np.float64)) > 0.5
        assert (t[dead_full] == 0.0).all()
        assert np.array_equal(t[~dead_full], x[~dead_full])
        assert dead_full.any()

    def test_truncate_zero_tensor(self):
        x = np.zeros((2, 32))
        assert np.array_equal(deadzone_truncate(x), x)


class TestCrossTermVsBlocksize:
    def test_idealized_rms_decays_but_cos_does_not(self):
        rows = cross_term_vs_blocksize(b_list=(8, 32, 128, 512),
                                       blocks_per_b=4000, seed=7)
        assert [r["block_size"] for r in rows] == [8, 32, 128, 512]
        rms = [r["idealized_cross_rms"] for r in rows]
        for a, b in zip(rms, rms[1:]):
            assert a / b > 1.5  # roughly 2x per 4x block size
        for r in rows:
            assert -0.75 < r["cos_scale_grid"] < -0.5
            assert r["n_blocks_live"] == 4000
            assert r["cross_share"] < 0.0

    def test_validation(self):
        with pytest.raises(ValueError, match="unknown distribution"):
            cross_term_vs_blocksize(distribution="cauchy")
        with pytest.raises(ValueError):
            cross_term_vs_blocksize(b_list=(1, 8))
