"""Poisson profile log-likelihood with sample intensities profiled out.

For each sample the log intensity gamma_i has closed-form maximizer
log[(v_i . W_i) / (v_i . mu_i)]; substituting it gives the profiled
objective used throughout estimation. Conventions: 0 log 0 = 0, and a
mean of zero for an observed positive count yields the boundary
sentinel -inf rather than an exception.
"""

from __future__ import annotations

import numpy as np

from .model import CountMatrix, DesignSet, DomainError, ParamSet, ShapeError, mu_ring

INFEASIBLE = -np.inf


class InfeasibleMeanError(DomainError):
    """The model assigns zero weighted mean to a sample with observed reads."""


def profile_gamma(W_row, mu_row, v_row=None):
    """Closed-form maximizer of a sample's weighted Poisson likelihood in gamma.

    Returns log[(v . W) / (v . mu)].
    """
    W_row = np.asarray(W_row, dtype=float)
    mu_row = np.asarray(mu_row, dtype=float)
    if W_row.shape != mu_row.shape:
        raise ShapeError("W_row and mu_row must have equal length")
    if v_row is None:
        v_row = np.ones_like(W_row)
    else:
        v_row = np.asarray(v_row, dtype=float)
        if np.any(v_row <= 0):
            raise DomainError("weights must be strictly positive")
    vw = float(v_row @ W_row)
    vm = float(v_row @ mu_row)
    if vm <= 0:
        if vw > 0:
            raise InfeasibleMeanError(
                "model assigns zero weighted mean to a sample with observed reads")
        raise DomainError("weighted mean and weighted counts are both zero")
    return float(np.log(vw) - np.log(vm))


def profile_objective(W, mu, v=None):
    """Profiled (weighted) Poisson objective M_n and the profiled gammas.

    Parameters
    ----------
    W, mu : (n, J) arrays
        Counts and means up to the factor exp(gamma).
    v : (n, J) positive array, optional
        Per-cell likelihood weights; unit weights when omitted.

    Returns
    -------
    value : float
        (1/n) sum_ij v_ij (W_ij log[c_i mu_ij] - c_i mu_ij) with
        c_i = (v_i.W_i)/(v_i.mu_i), or -inf when some observed count has
        zero mean (boundary-infeasible).
    gamma_hat : (n,) array or None
        log c_i per sample; None when the value is -inf.
    """
    W = np.asarray(W, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if W.shape != mu.shape:
        raise ShapeError("W and mu must have equal shape")
    n = W.shape[0]
    if v is None:
        v = np.ones_like(W)
    vW = np.einsum("ij,ij->i", v, W)
    vM = np.einsum("ij,ij->i", v, mu)
    if np.any((vM <= 0) & (vW > 0)):
        return INFEASIBLE, None
    pos = W > 0
    if np.any(pos & (mu <= 0)):
        return INFEASIBLE, None
    gamma_hat = np.log(vW) - np.log(vM)
    c = vW / vM
    terms = np.where(
        pos,
        v * (W * (np.log(np.where(pos, mu, 1.0)) + gamma_hat[:, None]) - c[:, None] * mu),
        -v * c[:, None] * mu,
    )
    # accumulate in extended precision; cell counts can reach 1e5
    value = float(np.sum(terms.ravel(), dtype=np.longdouble)) / n
    return value, gamma_hat


class Objective:
    """Profile log-likelihood of a dataset, unweighted or cell-weighted.

    Caches the most recent value and profiled gammas.
    """

    def __init__(self, W: CountMatrix, designs: DesignSet, weights=None):
        self.W = W
        self.designs = designs
        if weights is not None:
            v = np.asarray(getattr(weights, "v", weights), dtype=float)
            if v.shape != W.W.shape:
                raise ShapeError("weights must match the count matrix shape")
            if np.any(v <= 0):
                raise DomainError("weights must be strictly positive")
            self.v = v
        else:
            self.v = None
        self.last_value = None
        self.profile_gammas = None

    def value(self, params: ParamSet):
        mu = mu_ring(params, self.designs)
        val, gam = profile_objective(self.W.W, mu, self.v)
        self.last_value = val
        self.profile_gammas = gam
        return val


def profile_loglik(params: ParamSet, W: CountMatrix, designs: DesignSet,
                   weights=None):
    """Evaluate the profiled objective M_n at the given parameters."""
    return Objective(W, designs, weights).value(params)
