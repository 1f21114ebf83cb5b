import numpy as np
import pytest

from abundest.model import DomainError, mean_components
from abundest.simulate import (DILUTION_BASE, SimScenario,
                               contaminant_signal_ratio, depth_log_mean,
                               make_beta_star, make_specimens,
                               single_specimen_dilution_series, simulate)


class TestMakeBetaStar:
    def test_small_panel_values(self):
        assert np.array_equal(make_beta_star(5),
                              [3.0, -1.0, 1.0, -3.0, 0.0])

    def test_reference_entry_zero(self):
        for J in (5, 20):
            assert make_beta_star(J)[-1] == 0.0

    def test_scale_zero_gives_null(self):
        assert np.all(make_beta_star(20, scale=0.0) == 0.0)

    def test_unsupported_panel_size(self):
        with pytest.raises(DomainError):
            make_beta_star(7)


class TestMakeSpecimens:
    def test_rows_sum_to_one(self):
        for J in (5, 20):
            assert np.allclose(make_specimens(J).sum(axis=1), 1.0)

    def test_known_rows_are_16fold_series(self):
        P = make_specimens(5)
        assert np.allclose(P[0] / P[0, 0], [1.0, 2.0, 4.0, 8.0, 16.0])
        assert np.array_equal(P[1], P[0][::-1])

    def test_zero_pattern(self):
        P5 = make_specimens(5)
        assert np.array_equal(P5[2, :2], [0.0, 0.0])
        assert np.all(P5[2, 2:] > 0)
        assert np.array_equal(P5[3], P5[2][::-1])
        P20 = make_specimens(20)
        assert np.count_nonzero(P20[2] == 0.0) == 8

    def test_100fold_range_on_support(self):
        P = make_specimens(20)
        supp = P[2][P[2] > 0]
        assert supp[-1] / supp[0] == pytest.approx(100.0)


class TestDepthLogMean:
    def test_cap_and_slope(self):
        assert depth_log_mean(0) == 12.0
        assert depth_log_mean(1) == 12.0
        assert depth_log_mean(2) == 10.5
        assert depth_log_mean(3) == 9.0


class TestSimulate:
    def test_shapes(self):
        scn = SimScenario(J=5, series_per_specimen=2, seed=0)
        W, designs, truth = simulate(scn)
        assert W.W.shape == (4 * 2 * 4, 5)
        assert designs.Z.shape == (32, 4)
        assert designs.Z_tilde.shape == (32, 1)
        assert truth.p.shape == (4, 5)

    def test_dilution_design_entries(self):
        scn = SimScenario(J=5, dilutions=(0, 2), seed=0)
        _, designs, _ = simulate(scn)
        assert np.array_equal(designs.Z_tilde[:, 0],
                              np.tile([1.0, 81.0], 4))

    def test_seed_determinism(self):
        a, _, ta = simulate(SimScenario(J=5, seed=42))
        b, _, tb = simulate(SimScenario(J=5, seed=42))
        assert np.array_equal(a.W, b.W)
        assert np.array_equal(ta.gamma, tb.gamma)

    def test_poisson_counts_match_mean(self):
        # average over replicates at fixed truth: W/mu should center on 1
        scn = SimScenario(J=5, seed=7)
        rng = np.random.default_rng(7)
        _, designs, truth = simulate(scn, rng=np.random.default_rng(7))
        signal, spurious = mean_components(truth, designs)
        # re-derive mu from the drawn truth and check moments by MC
        mu = np.exp(truth.gamma)[:, None] * (signal + spurious)
        rng = np.random.default_rng(1)
        R = 400
        draws = rng.poisson(np.broadcast_to(mu, (R,) + mu.shape))
        rel = draws.mean(axis=0) / mu
        assert np.all(np.abs(rel - 1.0) < 6.0 / np.sqrt(R * np.minimum(mu, 1e9)) + 1e-3)

    def test_negbin_variance_inflation(self):
        # Var = mu + mu^2/size: check on a moderate-mean cell by MC
        rng = np.random.default_rng(3)
        mu, size = 50.0, 13.0
        x = rng.negative_binomial(size, size / (size + mu), size=200_000)
        v_true = mu + mu * mu / size
        assert x.mean() == pytest.approx(mu, rel=0.02)
        assert x.var() == pytest.approx(v_true, rel=0.05)

    def test_negbin_scenario_overdisperses(self):
        # pooled variance of counts around the model mean exceeds Poisson
        rngs = [np.random.default_rng(s) for s in range(40)]
        scn = SimScenario(J=5, dist="negbin", nb_size=13.0)
        chi = []
        for rng in rngs:
            W, designs, truth = simulate(scn, rng=rng)
            signal, spurious = mean_components(truth, designs)
            mu = np.exp(truth.gamma)[:, None] * (signal + spurious)
            chi.append(np.mean((W.W - mu) ** 2 / mu))
        assert np.mean(chi) > 2.0

    def test_invalid_scenarios(self):
        with pytest.raises(DomainError):
            SimScenario(dist="gamma")
        with pytest.raises(DomainError):
            SimScenario(series_per_specimen=0)
        with pytest.raises(DomainError):
            SimScenario(nb_size=0.0)


class TestSingleSpecimenSeries:
    def test_truth_support(self):
        W, spec, truth = single_specimen_dilution_series(seed=0)
        assert np.count_nonzero(truth.p[0]) == 8
        assert np.all(truth.p[0, 8:] == 0.0)
        assert np.all(truth.p_tilde[0, :8] == 0.0)
        assert W.W.shape == (12, 30)

    def test_mask_pins(self):
        _, spec, _ = single_specimen_dilution_series(seed=0)
        assert np.all(~spec.mask.beta_estimable)
        assert spec.mask.p_tilde_zero[0, 0]


class TestContaminantSignalRatio:
    def test_ninefold_growth_exact(self):
        # with constant specimen content the spurious share grows by the
        # dilution base at each step, by construction of the design
        scn = SimScenario(J=5, beta_scale=0.0, seed=5)
        _, designs, truth = simulate(scn, rng=np.random.default_rng(5))
        r = contaminant_signal_ratio(truth, designs)
        d = np.log(designs.Z_tilde[:, 0]) / np.log(DILUTION_BASE)
        for k in range(4):
            idx = np.where(designs.Z[:, k] == 1.0)[0]
            base = r[idx][d[idx] == 0][0]
            assert np.allclose(r[idx], base * DILUTION_BASE ** d[idx],
                               rtol=1e-12)
