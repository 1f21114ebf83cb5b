import numpy as np
import pytest

from abundest.inference import (BootstrapConfig, TestSpec, _replicate_fit,
                                bootstrap_params, coordinate_names,
                                default_m_rule, dirichlet_weights,
                                flatten_params, lrt, marginal_ci, null_project)
from abundest.model import (CountMatrix, DesignSet, DomainError, ModelSpec,
                            ParamSet, make_mask, mu_ring)
from abundest.simulate import SimScenario, analysis_spec, simulate
from abundest.solver import fit


def _small_fit(seed=0, beta_scale=0.0):
    scn = SimScenario(J=5, beta_scale=beta_scale, seed=seed)
    W, designs, truth = simulate(scn)
    spec = analysis_spec(scn, designs)
    return W, spec, truth, fit(spec, W)


class TestDirichletWeights:
    def test_sums_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            xi = dirichlet_weights(16, 4, rng)
            assert xi.sum() == pytest.approx(1.0, abs=1e-12)
            assert np.all(xi > 0)

    def test_moments_match_dirichlet(self):
        # E xi_i = 1/n, Var xi_i = (1 - 1/n) / (n (m + 1))
        n, m, R = 10, 3, 10_000
        rng = np.random.default_rng(1)
        draws = np.array([dirichlet_weights(n, m, rng) for _ in range(R)])
        mean_se = draws.std() / np.sqrt(R)
        assert abs(draws.mean() - 1.0 / n) <= 3 * mean_se
        var_true = (1 - 1.0 / n) / (n * (m + 1))
        emp_var = draws.var(axis=0).mean()
        # MC error of a variance estimate: var of squared deviations
        dev2 = (draws - 1.0 / n) ** 2
        var_se = dev2.std() / np.sqrt(R * n)
        assert abs(emp_var - var_true) <= 3 * var_se

    def test_input_validation(self):
        rng = np.random.default_rng(2)
        with pytest.raises(DomainError):
            dirichlet_weights(1, 1, rng)
        with pytest.raises(DomainError):
            dirichlet_weights(5, 0, rng)

    def test_default_m_rule(self):
        assert default_m_rule(16) == 4
        assert default_m_rule(17) == 5


class TestBootstrapParams:
    def test_uniform_weights_reproduce_fit(self):
        # forcing the degenerate xi = 1/n leaves the criterion unchanged
        W, spec, _, base = _small_fit()
        xi = np.full(W.n, 1.0 / W.n)
        res = _replicate_fit(spec, W, base, xi, None)
        assert np.allclose(flatten_params(res.params),
                           flatten_params(base.params), atol=1e-7)

    def test_fixed_coordinates_have_zero_draws(self):
        W, spec, _, base = _small_fit()
        cfg = BootstrapConfig(B=10, seed=3)
        draws = bootstrap_params(spec, W, base, cfg)
        names = draws.names
        # known specimen rows and the reference beta column are fixed
        for idx, name in enumerate(names):
            if name.startswith(("p[0,", "p[1,")) or name == "beta[0,4]":
                assert np.all(draws.draws[:, idx] == 0.0)

    def test_reproducible(self):
        W, spec, _, base = _small_fit()
        cfg = BootstrapConfig(B=5, seed=9)
        d1 = bootstrap_params(spec, W, base, cfg)
        d2 = bootstrap_params(spec, W, base, cfg)
        assert np.array_equal(d1.draws, d2.draws)

    def test_unconverged_base_rejected(self):
        W, spec, _, base = _small_fit()
        bad = type(base)(params=base.params, objective=base.objective,
                         mu_hat=base.mu_hat, weights=None, converged=False,
                         diagnostics={})
        with pytest.raises(DomainError):
            bootstrap_params(spec, W, bad, BootstrapConfig(B=2, seed=0))


class TestMarginalCi:
    def _draws(self, arr, theta, n=16, m=4, simplex=None):
        from abundest.inference import BootstrapDraws
        arr = np.asarray(arr, dtype=float)
        L = arr.shape[1]
        return BootstrapDraws(
            draws=arr, theta_hat=np.asarray(theta, dtype=float),
            names=[f"c{i}" for i in range(L)],
            simplex=np.zeros(L, dtype=bool) if simplex is None else simplex,
            n=n, m=m, n_failed=0)

    def test_zero_draws_degenerate_interval(self):
        d = self._draws(np.zeros((20, 2)), [0.3, 0.7])
        ci = marginal_ci(d, 0.05)
        assert np.allclose(ci.lower, ci.estimate)
        assert np.allclose(ci.upper, ci.estimate)

    def test_matches_sort_quantile_oracle(self):
        rng = np.random.default_rng(4)
        arr = rng.normal(size=(101, 3))
        theta = np.array([1.0, -2.0, 0.5])
        n = 25
        ci = marginal_ci(self._draws(arr, theta, n=n), 0.10)
        for q in range(3):
            ordered = np.sort(arr[:, q])
            lo = np.quantile(ordered, 0.05)
            hi = np.quantile(ordered, 0.95)
            assert ci.lower[q] == pytest.approx(theta[q] - hi / np.sqrt(n))
            assert ci.upper[q] == pytest.approx(theta[q] - lo / np.sqrt(n))

    def test_offset_equivariance(self):
        # shifting one coordinate of the estimate by c shifts its interval
        # by exactly c when the draws are unchanged
        rng = np.random.default_rng(5)
        arr = rng.normal(size=(50, 2))
        base = marginal_ci(self._draws(arr, [0.0, 0.0]), 0.05)
        shifted = marginal_ci(self._draws(arr, [0.0, 1.7]), 0.05)
        assert shifted.lower[1] == pytest.approx(base.lower[1] + 1.7)
        assert shifted.upper[1] == pytest.approx(base.upper[1] + 1.7)

    def test_simplex_clipping_retains_unclipped(self):
        arr = np.array([[-3.0], [3.0]] * 10)
        simplex = np.array([True])
        ci = marginal_ci(self._draws(arr, [0.05], n=4, simplex=simplex), 0.05)
        assert ci.lower[0] == 0.0
        assert ci.lower_unclipped[0] < 0.0


class TestNullProject:
    def test_identity_when_fits_equal(self):
        W, spec, _, base = _small_fit()
        W0 = null_project(W, base, base, spec.designs)
        assert np.allclose(W0.W, W.W, atol=1e-9)

    def test_row_sums_preserved(self):
        W, spec, _, base = _small_fit(seed=1)
        test = TestSpec(constraints=(("beta", 0, 0, 0.0),))
        null_spec = ModelSpec(designs=spec.designs,
                              mask=test.null_mask(spec.mask))
        nfit = fit(null_spec, W)
        W0 = null_project(W, base, nfit, spec.designs)
        assert np.allclose(W0.row_totals, W.row_totals, rtol=1e-9)

    def test_matches_cell_formula(self):
        W, spec, _, base = _small_fit(seed=2)
        test = TestSpec(constraints=(("beta", 0, 1, 0.0),))
        null_spec = ModelSpec(designs=spec.designs,
                              mask=test.null_mask(spec.mask))
        nfit = fit(null_spec, W)
        W0 = null_project(W, base, nfit, spec.designs)
        mu = mu_ring(base.params, spec.designs)
        mu0 = mu_ring(nfit.params, spec.designs)
        for i in range(W.n):
            raw = np.array([W.W[i, j] * (mu0[i, j] / mu[i, j])
                            if mu[i, j] > 0 else 0.0 for j in range(W.J)])
            raw *= W.W[i].sum() / raw.sum()
            assert np.allclose(W0.W[i], raw, atol=1e-12)

    def test_undefined_when_mean_zero_under_reads(self):
        W = CountMatrix(np.array([[2.0, 3.0]]))
        designs = DesignSet(Z=np.ones((1, 1)), X=np.ones((1, 1)),
                            Z_tilde=np.zeros((1, 1)))
        params = ParamSet(beta=np.zeros((1, 2)), p=np.array([[1.0, 0.0]]),
                          p_tilde=np.full((1, 2), 0.5),
                          gamma_tilde=np.array([-300.0]), gamma=np.zeros(1))
        from abundest.solver import FitResult
        fr = FitResult(params=params, objective=0.0, mu_hat=np.ones((1, 2)),
                       weights=None, converged=True, diagnostics={})
        with pytest.raises(DomainError, match="projection undefined"):
            null_project(W, fr, fr, designs)


class TestTestSpec:
    def test_beta_constraint_fixes_entry(self):
        _, spec, _, _ = _small_fit()
        t = TestSpec(constraints=(("beta", 0, 2, 1.5),))
        nm = t.null_mask(spec.mask)
        assert not nm.beta_estimable[0, 2]
        assert nm.beta_fixed[0, 2] == 1.5

    def test_simplex_constraint_only_zero(self):
        _, spec, _, _ = _small_fit()
        with pytest.raises(NotImplementedError):
            TestSpec(constraints=(("p", 2, 0, 0.3),)).null_mask(spec.mask)

    def test_constraining_fixed_coordinate_rejected(self):
        _, spec, _, _ = _small_fit()
        with pytest.raises(DomainError):
            # column 4 is the reference taxon, already fixed
            TestSpec(constraints=(("beta", 0, 4, 0.0),)).null_mask(spec.mask)
        with pytest.raises(DomainError):
            # specimen 0 is known
            TestSpec(constraints=(("p", 0, 1, 0.0),)).null_mask(spec.mask)


class TestLrt:
    def test_no_constraints_never_rejects(self):
        W, spec, _, _ = _small_fit(seed=3)
        out = lrt(spec, W, TestSpec(constraints=()),
                  BootstrapConfig(B=20, seed=1))
        assert out.statistic == 0.0
        assert not out.reject
        assert 0.0 <= out.p_value <= 1.0

    def test_rejects_strong_detection_effects(self):
        # protocol-varying detection: a strong alternative must reject
        W, spec, truth, _ = _small_fit(seed=4, beta_scale=1.0)
        cons = tuple(("beta", 0, j, 0.0) for j in range(4))
        out = lrt(spec, W, TestSpec(constraints=cons),
                  BootstrapConfig(B=60, seed=2))
        assert out.reject
        assert out.p_value < 0.05

    def test_statistic_nonnegative_and_reproducible(self):
        W, spec, _, _ = _small_fit(seed=5)
        cons = (("beta", 0, 0, 0.0),)
        cfg = BootstrapConfig(B=25, seed=7)
        out1 = lrt(spec, W, TestSpec(constraints=cons), cfg)
        out2 = lrt(spec, W, TestSpec(constraints=cons), cfg)
        assert out1.statistic >= 0.0
        assert out1.statistic == out2.statistic
        assert out1.p_value == out2.p_value


class TestCoordinateNames:
    def test_layout_and_flatten_agree(self):
        _, _, truth, _ = _small_fit()
        names, simplex = coordinate_names(truth)
        flat = flatten_params(truth)
        assert len(names) == flat.size == simplex.size
        i = names.index("p[2,0]")
        assert flat[i] == truth.p[2, 0]
        assert simplex[i]
        i = names.index("gamma_tilde[0]")
        assert flat[i] == truth.gamma_tilde[0]
        assert not simplex[i]
