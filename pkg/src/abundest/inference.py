"""Boundary-valid inference: subsampled Dirichlet-weight bootstrap
confidence intervals and likelihood-ratio tests on null-projected data.

The standard n-out-of-n bootstrap is invalid when abundances sit on the
simplex boundary; replicates here reweight samples by Dirichlet((m/n) 1)
weights with m of order sqrt(n), and test statistics are calibrated on
data projected onto the fitted null mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import (CountMatrix, DomainError, ModelSpec, ParamMask, ParamSet,
                    ShapeError, mu_ring)
from .solver import FitResult, SolverError, SolverOptions, fit

_XI_FLOOR = 1e-290


class BootstrapError(RuntimeError):
    """Bootstrap aborted (too many failed replicates, or none succeeded)."""


def default_m_rule(n):
    """Subsample size m = ceil(sqrt(n))."""
    return int(math.ceil(math.sqrt(n)))


@dataclass(frozen=True)
class BootstrapConfig:
    B: int = 1000
    m_rule: object = None          # callable n -> m; default ceil(sqrt(n))
    seed: int | None = None
    alpha: float = 0.05
    max_failure_fraction: float = 0.10

    def m(self, n):
        rule = self.m_rule or default_m_rule
        m = int(rule(n))
        if not 1 <= m <= n:
            raise DomainError(f"m rule produced m={m} outside [1, n={n}]")
        return m

    def __post_init__(self):
        if self.B < 1:
            raise DomainError("B must be >= 1")
        if not 0 < self.alpha < 1:
            raise DomainError("alpha must lie in (0, 1)")


def coordinate_names(params: ParamSet):
    """Flat coordinate labels and a simplex-membership flag per coordinate.

    Order: beta row-major, p row-major, p_tilde row-major, gamma_tilde,
    alpha_tilde. The profiled gamma intensities are excluded.
    """
    names, simplex = [], []
    for q in range(params.beta.shape[0]):
        for j in range(params.J):
            names.append(f"beta[{q},{j}]")
            simplex.append(False)
    for k in range(params.K):
        for j in range(params.J):
            names.append(f"p[{k},{j}]")
            simplex.append(True)
    for k in range(params.K_tilde):
        for j in range(params.J):
            names.append(f"p_tilde[{k},{j}]")
            simplex.append(True)
    for k in range(params.K_tilde):
        names.append(f"gamma_tilde[{k}]")
        simplex.append(False)
    for g in range(params.alpha_tilde.size):
        names.append(f"alpha_tilde[{g}]")
        simplex.append(False)
    return names, np.array(simplex, dtype=bool)


def flatten_params(params: ParamSet):
    """Flat vector matching :func:`coordinate_names`."""
    return np.concatenate([
        params.beta.ravel(), params.p.ravel(), params.p_tilde.ravel(),
        params.gamma_tilde, params.alpha_tilde,
    ])


def dirichlet_weights(n, m, rng):
    """Dirichlet((m/n) 1_n) weights: normalized Gamma(m/n, 1) variates."""
    if n < 2:
        raise DomainError("need at least two samples")
    if m < 1:
        raise DomainError("m must be >= 1")
    g = np.maximum(rng.gamma(m / n, 1.0, size=n), _XI_FLOOR)
    return g / g.sum()


@dataclass(frozen=True)
class BootstrapDraws:
    """Scaled replicate deviations sqrt(m) (theta_hat^xi - theta_hat)."""

    draws: np.ndarray              # (B_ok, L)
    theta_hat: np.ndarray          # (L,)
    names: list
    simplex: np.ndarray            # (L,) bool
    n: int
    m: int
    n_failed: int


def _replicate_fit(spec, W, base_fit, xi, opts):
    n = W.n
    base_v = base_fit.weights.v if base_fit.weights is not None \
        else np.ones_like(W.W)
    v_eff = base_v * (n * xi)[:, None]
    return fit(spec, W, opts=opts, init=base_fit.params,
               skip_barrier=True, cell_weights=v_eff)


def bootstrap_params(spec: ModelSpec, W: CountMatrix, fit_full: FitResult,
                     cfg: BootstrapConfig, opts: SolverOptions | None = None):
    """Replicate fits under Dirichlet sample weights, warm-started at the fit.

    Each replicate maximizes the criterion with sample i's contribution
    multiplied by n xi_i (composing with any cell weights of the base
    fit); failures are excluded and counted, aborting past the allowed
    failure fraction.
    """
    if not fit_full.converged:
        raise DomainError("base fit did not converge")
    n = W.n
    m = cfg.m(n)
    theta_hat = flatten_params(fit_full.params)
    names, simplex = coordinate_names(fit_full.params)
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.B)
    draws, n_failed = [], 0
    for b in range(cfg.B):
        xi = dirichlet_weights(n, m, np.random.default_rng(streams[b]))
        try:
            res = _replicate_fit(spec, W, fit_full, xi, opts)
        except (SolverError, DomainError):
            n_failed += 1
            continue
        draws.append(np.sqrt(m) * (flatten_params(res.params) - theta_hat))
    if not draws:
        raise BootstrapError("no bootstrap replicate converged")
    if n_failed > cfg.max_failure_fraction * cfg.B:
        raise BootstrapError(
            f"{n_failed}/{cfg.B} bootstrap replicates failed")
    return BootstrapDraws(draws=np.array(draws), theta_hat=theta_hat,
                          names=names, simplex=simplex, n=n, m=m,
                          n_failed=n_failed)


@dataclass(frozen=True)
class IntervalTable:
    names: list
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    lower_unclipped: np.ndarray
    upper_unclipped: np.ndarray
    alpha: float


def marginal_ci(draws: BootstrapDraws, alpha=0.05):
    """Per-coordinate bootstrap intervals from scaled deviation quantiles.

    The interval for coordinate q is
    (theta_q - L_{1-a/2} / sqrt(n), theta_q - L_{a/2} / sqrt(n)) with L
    the empirical quantiles of sqrt(m) (theta^xi - theta). Simplex
    coordinates are clipped to [0, 1] for reporting; unclipped bounds
    are retained.
    """
    if draws.draws.shape[0] < 1:
        raise DomainError("need at least one successful replicate")
    rootn = np.sqrt(draws.n)
    lo_q = np.quantile(draws.draws, alpha / 2.0, axis=0)
    hi_q = np.quantile(draws.draws, 1.0 - alpha / 2.0, axis=0)
    lower = draws.theta_hat - hi_q / rootn
    upper = draws.theta_hat - lo_q / rootn
    lower_c = np.where(draws.simplex, np.clip(lower, 0.0, 1.0), lower)
    upper_c = np.where(draws.simplex, np.clip(upper, 0.0, 1.0), upper)
    return IntervalTable(names=draws.names, estimate=draws.theta_hat,
                         lower=lower_c, upper=upper_c,
                         lower_unclipped=lower, upper_unclipped=upper,
                         alpha=alpha)


def null_project(W: CountMatrix, fit_full: FitResult, fit_null: FitResult,
                 designs):
    """Project counts onto the fitted null: W0 = W * (mu0 / mu), rows rescaled.

    Cell means are taken up to the per-sample intensity factor; after
    the cell-wise rescaling every row is renormalized so its sum matches
    the observed row sum. Zero full-model means with positive counts
    make the projection undefined.
    """
    mu = mu_ring(fit_full.params, designs)
    mu0 = mu_ring(fit_null.params, designs)
    bad = (mu <= 0) & (W.W > 0)
    if np.any(bad):
        raise DomainError(
            "projection undefined: fitted mean is zero where counts are "
            f"positive at cells {np.argwhere(bad)[:5].tolist()}")
    ratio = np.divide(mu0, mu, out=np.zeros_like(mu), where=mu > 0)
    W0 = W.W * ratio
    row = W0.sum(axis=1)
    if np.any(row <= 0):
        raise DomainError("null projection produced an empty sample")
    W0 *= (W.row_totals / row)[:, None]
    return CountMatrix(W0)


@dataclass(frozen=True)
class TestSpec:
    """Null hypothesis: a set of coordinate constraints.

    Constraints are tuples: ("beta", q, j, value),
    ("p", k, j, 0.0), ("p_tilde", k, j, 0.0),
    ("gamma_tilde", k, value), ("alpha_tilde", g, value). Simplex
    coordinates may only be constrained to zero.
    """

    constraints: tuple

    __test__ = False  # not a pytest test class despite the name

    def null_mask(self, mask: ParamMask) -> ParamMask:
        beta_est = np.array(mask.beta_estimable)
        beta_fix = np.array(mask.beta_fixed)
        p_zero = np.array(mask.p_zero)
        pt_zero = np.array(mask.p_tilde_zero)
        gt_est = np.array(mask.gamma_tilde_estimable)
        gt_fix = np.array(mask.gamma_tilde_fixed)
        at_est = np.array(mask.alpha_tilde_estimable)
        at_fix = np.array(mask.alpha_tilde_fixed)
        for con in self.constraints:
            kind = con[0]
            if kind == "beta":
                _, q, j, val = con
                if not mask.beta_estimable[q, j]:
                    raise DomainError(f"beta[{q},{j}] is not estimable")
                beta_est[q, j] = False
                beta_fix[q, j] = val
            elif kind in ("p", "p_tilde"):
                _, k, j, val = con
                if val != 0.0:
                    raise NotImplementedError(
                        "simplex coordinates can only be constrained to 0")
                known = mask.p_known if kind == "p" else mask.p_tilde_known
                if known[k]:
                    raise DomainError(f"{kind} row {k} is not estimable")
                (p_zero if kind == "p" else pt_zero)[k, j] = True
            elif kind == "gamma_tilde":
                _, k, val = con
                if not mask.gamma_tilde_estimable[k]:
                    raise DomainError(f"gamma_tilde[{k}] is not estimable")
                gt_est[k] = False
                gt_fix[k] = val
            elif kind == "alpha_tilde":
                _, g, val = con
                if not mask.alpha_tilde_estimable[g]:
                    raise DomainError(f"alpha_tilde[{g}] is not estimable")
                at_est[g] = False
                at_fix[g] = val
            else:
                raise DomainError(f"unknown constraint kind {kind!r}")
        return ParamMask(
            beta_estimable=beta_est, beta_fixed=beta_fix,
            p_known=mask.p_known, p_fixed_rows=mask.p_fixed_rows,
            p_zero=p_zero, p_tilde_known=mask.p_tilde_known,
            p_tilde_fixed_rows=mask.p_tilde_fixed_rows, p_tilde_zero=pt_zero,
            gamma_tilde_estimable=gt_est, gamma_tilde_fixed=gt_fix,
            alpha_tilde_estimable=at_est, alpha_tilde_fixed=at_fix)


@dataclass(frozen=True)
class LrtResult:
    statistic: float
    p_value: float
    null_quantile: float
    reject: bool
    alpha: float
    B: int
    m: int
    n_failed: int
    fit_full: FitResult
    fit_null: FitResult


def _project_null_params(params: ParamSet, mask: ParamMask) -> ParamSet:
    """Feasible warm start under a null mask: apply pins and renormalize."""
    p = np.array(params.p)
    for k in np.flatnonzero(~mask.p_known):
        p[k, mask.p_zero[k]] = 0.0
        s = p[k].sum()
        p[k] = p[k] / s if s > 0 else (~mask.p_zero[k]) / (~mask.p_zero[k]).sum()
    pt = np.array(params.p_tilde)
    for k in np.flatnonzero(~mask.p_tilde_known):
        pt[k, mask.p_tilde_zero[k]] = 0.0
        s = pt[k].sum()
        pt[k] = pt[k] / s if s > 0 \
            else (~mask.p_tilde_zero[k]) / (~mask.p_tilde_zero[k]).sum()
    beta = np.where(mask.beta_estimable, params.beta, mask.beta_fixed)
    gt = np.where(mask.gamma_tilde_estimable, params.gamma_tilde,
                  mask.gamma_tilde_fixed)
    at = np.where(mask.alpha_tilde_estimable, params.alpha_tilde,
                  mask.alpha_tilde_fixed) if params.alpha_tilde.size \
        else params.alpha_tilde
    return ParamSet(beta=beta, p=p, p_tilde=pt, gamma_tilde=gt,
                    gamma=params.gamma, alpha_tilde=at)


def lrt(spec: ModelSpec, W: CountMatrix, test: TestSpec, cfg: BootstrapConfig,
        estimator="unweighted", opts: SolverOptions | None = None,
        reestimate_weights=False):
    """Likelihood-ratio test with a bootstrap null distribution.

    The statistic is T_n = 2n (sup M_n - sup M_n over the null); its
    null distribution is approximated by refitting full and null models
    on the null-projected data under Dirichlet sample weights and
    recording m times the weighted statistic. Cell weights of the
    reweighted estimator are computed once on the original data and held
    fixed across replicates unless ``reestimate_weights`` is set.
    """
    fit_full = fit(spec, W, estimator=estimator, opts=opts)
    null_spec = ModelSpec(designs=spec.designs,
                          mask=test.null_mask(spec.mask))
    base_v = fit_full.weights
    fit_null = fit(null_spec, W,
                   estimator="unweighted" if base_v is not None else estimator,
                   opts=opts, cell_weights=base_v)
    n = W.n
    t_n = 2.0 * n * (fit_full.objective - fit_null.objective)
    if t_n < -1e-6:
        raise SolverError(
            f"negative likelihood-ratio statistic {t_n:.3e}: "
            "null optimization beat the full model")
    t_n = max(t_n, 0.0)

    W0 = null_project(W, fit_full, fit_null, spec.designs)
    if reestimate_weights and estimator == "reweighted":
        base0_full = fit(spec, W0, estimator="reweighted", opts=opts)
        v0 = base0_full.weights
    else:
        v0 = base_v
        start_full = fit_full.params
        base0_full = fit(spec, W0, opts=opts, init=start_full,
                         skip_barrier=True, cell_weights=v0)
    start_null = _project_null_params(base0_full.params, null_spec.mask)
    base0_null = fit(null_spec, W0, opts=opts, init=start_null,
                     skip_barrier=True, cell_weights=v0)

    m = cfg.m(n)
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.B)
    base_cells = v0.v if v0 is not None else np.ones_like(W0.W)
    stats, n_failed = [], 0
    for b in range(cfg.B):
        xi = dirichlet_weights(n, m, np.random.default_rng(streams[b]))
        v_eff = base_cells * (n * xi)[:, None]
        try:
            rf = fit(spec, W0, opts=opts, init=base0_full.params,
                     skip_barrier=True, cell_weights=v_eff)
            rn = fit(null_spec, W0, opts=opts, init=base0_null.params,
                     skip_barrier=True, cell_weights=v_eff)
        except (SolverError, DomainError):
            n_failed += 1
            continue
        stats.append(max(2.0 * m * (rf.objective - rn.objective), 0.0))
    if not stats:
        raise BootstrapError("no bootstrap replicate converged")
    if n_failed > cfg.max_failure_fraction * cfg.B:
        raise BootstrapError(f"{n_failed}/{cfg.B} bootstrap replicates failed")
    stats = np.array(stats)
    p_value = float(np.mean(stats >= t_n))
    q = float(np.quantile(stats, 1.0 - cfg.alpha))
    return LrtResult(statistic=float(t_n), p_value=p_value, null_quantile=q,
                     reject=bool(t_n >= q), alpha=cfg.alpha, B=cfg.B, m=m,
                     n_failed=n_failed, fit_full=fit_full, fit_null=fit_null)
