"""Synthetic dilution-series generators for calibration experiments.

Builds datasets of four specimens (two of known composition, two
unknown) measured along 9-fold dilution series with a contaminant
source whose share of reads grows ninefold per dilution step, counts
drawn Poisson or negative binomial around the model mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import (CountMatrix, DesignSet, DomainError, ModelSpec, ParamSet,
                    make_mask, mean_components)

DILUTION_BASE = 9.0
DEFAULT_GAMMA_TILDE = -3.7
DEFAULT_NB_SIZE = 13.0
DEPTH_LOG_SD = np.sqrt(0.05)

# detection-effect pattern; last entry is the reference taxon (always 0)
_BETA_STAR = {
    5: np.array([3.0, -1.0, 1.0, -3.0, 0.0]),
    20: np.array([3.0, -1.0, 1.0, -3.0] * 4 + [3.0, -1.0, -3.0, 0.0]),
}


def make_beta_star(J, scale=1.0):
    """Reference detection-effect vector, scaled; last entry is 0."""
    if J not in _BETA_STAR:
        raise DomainError(f"no detection-effect pattern for J={J}")
    return scale * _BETA_STAR[J]


def make_specimens(J):
    """Four specimen profiles: two known power series, two with zeros.

    Rows 0 and 1 are geometric series spanning a 16-fold range (taxon J
    sixteen times more abundant than taxon 1) and its reverse. Row 2
    (specimen A) zeroes the leading taxa (2 at J=5, 8 at J=20) and puts an
    increasing geometric series spanning a 100-fold range on the rest;
    row 3 is its reverse. All rows normalized to the simplex.
    """
    if J not in (5, 20):
        raise DomainError(f"no specimen construction for J={J}")
    known1 = 2.0 ** (4.0 * np.arange(J) / (J - 1))
    known1 /= known1.sum()
    known2 = known1[::-1].copy()
    z = 2 if J == 5 else 8
    F = J - z
    a = np.zeros(J)
    a[z:] = 100.0 ** (np.arange(F) / (F - 1))
    a /= a.sum()
    b = a[::-1].copy()
    return np.vstack([known1, known2, a, b])


@dataclass(frozen=True)
class SimScenario:
    """One cell of the simulation design.

    Four specimens (rows of :func:`make_specimens`) each measured along
    one or more dilution series with exponents ``dilutions`` (9 ** d
    fold). Read depth is lognormal with log-mean min(13.5 - 1.5 d, 12)
    and log-variance 0.05; the contaminant profile is uniform with log
    intensity ``gamma_tilde`` and design entry 9 ** d.
    """

    J: int = 5
    beta_scale: float = 1.0
    series_per_specimen: int = 1
    dist: str = "poisson"
    nb_size: float = DEFAULT_NB_SIZE
    dilutions: tuple = (0, 1, 2, 3)
    gamma_tilde: float = DEFAULT_GAMMA_TILDE
    seed: int | None = None

    def __post_init__(self):
        if self.dist not in ("poisson", "negbin"):
            raise DomainError(f"unknown count distribution {self.dist!r}")
        if self.series_per_specimen < 1:
            raise DomainError("series_per_specimen must be >= 1")
        if self.nb_size <= 0:
            raise DomainError("nb_size must be positive")


def depth_log_mean(d):
    """Log-scale mean of the read-depth distribution at dilution exponent d."""
    return np.minimum(13.5 - 1.5 * np.asarray(d, dtype=float), 12.0)


def _draw_counts(rng, mu, dist, size):
    if dist == "poisson":
        return rng.poisson(mu)
    # negative binomial with mean mu and Var = mu + mu^2 / size
    p = size / (size + mu)
    return rng.negative_binomial(size, p)


def simulate(scn: SimScenario, rng=None):
    """Draw one dataset; returns (counts, designs, true parameters)."""
    if rng is None:
        rng = np.random.default_rng(scn.seed)
    J = scn.J
    specimens = make_specimens(J)
    K = specimens.shape[0]
    d_vec = np.tile(np.asarray(scn.dilutions, dtype=float),
                    K * scn.series_per_specimen)
    spec_idx = np.repeat(np.arange(K),
                         scn.series_per_specimen * len(scn.dilutions))
    n = d_vec.size
    Z = np.zeros((n, K))
    Z[np.arange(n), spec_idx] = 1.0
    X = np.ones((n, 1))
    Z_tilde = (DILUTION_BASE ** d_vec)[:, None]
    designs = DesignSet(Z=Z, X=X, Z_tilde=Z_tilde)
    beta = make_beta_star(J, scn.beta_scale)[None, :]
    p_tilde = np.full((1, J), 1.0 / J)
    gamma = rng.normal(depth_log_mean(d_vec), DEPTH_LOG_SD)
    truth = ParamSet(beta=beta, p=specimens, p_tilde=p_tilde,
                     gamma_tilde=np.array([scn.gamma_tilde]), gamma=gamma)
    signal, spurious = mean_components(truth, designs)
    mu = np.exp(gamma)[:, None] * (signal + spurious)
    W = _draw_counts(rng, mu, scn.dist, scn.nb_size)
    return CountMatrix(W), designs, truth


def analysis_spec(scn: SimScenario, designs: DesignSet) -> ModelSpec:
    """Estimation model for a simulated dataset.

    The two geometric-series specimens are treated as known, specimens A
    and B as unknown; the last taxon is the detection reference; the
    contaminant profile and intensity are estimated.
    """
    specimens = make_specimens(scn.J)
    mask = make_mask(scn.J, K=4, K_tilde=1, p_cov=1,
                     known_p={0: specimens[0], 1: specimens[1]},
                     reference_taxon=scn.J - 1)
    return ModelSpec(designs=designs, mask=mask)


def single_specimen_dilution_series(J=30, n_target=8, dilutions=(0, 1, 2, 3),
                                    series=3, gamma_tilde=-2.5, seed=None):
    """Dilution series of one specimen with few target taxa, many absent.

    The specimen holds a geometric series on its first ``n_target`` taxa
    and exact zeros elsewhere; the contaminant profile is uniform over
    the off-target taxa. Returns (counts, model spec, true parameters).
    The analysis model estimates the full specimen profile with the
    first target taxon pinned to zero in the contaminant profile for
    identifiability, and no detection effects.
    """
    rng = np.random.default_rng(seed)
    p = np.zeros(J)
    p[:n_target] = 2.0 ** (4.0 * np.arange(n_target) / (n_target - 1))
    p /= p.sum()
    p_tilde = np.zeros(J)
    p_tilde[n_target:] = 1.0 / (J - n_target)
    d_vec = np.tile(np.asarray(dilutions, dtype=float), series)
    n = d_vec.size
    designs = DesignSet(Z=np.ones((n, 1)), X=np.ones((n, 1)),
                        Z_tilde=(DILUTION_BASE ** d_vec)[:, None])
    gamma = rng.normal(depth_log_mean(d_vec), DEPTH_LOG_SD)
    truth = ParamSet(beta=np.zeros((1, J)), p=p[None, :],
                     p_tilde=p_tilde[None, :],
                     gamma_tilde=np.array([gamma_tilde]), gamma=gamma)
    signal, spurious = mean_components(truth, designs)
    mu = np.exp(gamma)[:, None] * (signal + spurious)
    W = CountMatrix(rng.poisson(mu))
    mask = make_mask(J, K=1, K_tilde=1, p_cov=1,
                     fixed_beta={(0, j): 0.0 for j in range(J)},
                     zero_p_tilde=[(0, 0)])
    return W, ModelSpec(designs=designs, mask=mask), truth


def contaminant_signal_ratio(params: ParamSet, designs: DesignSet):
    """Per-sample ratio of spurious to signal mean totals."""
    signal, spurious = mean_components(params, designs)
    return spurious.sum(axis=1) / signal.sum(axis=1)
