"""Mean-variance reweighting via centered isotonic regression.

Squared residuals from an unweighted fit are regressed monotonically on
fitted means; the resulting variance estimates define per-cell weights
(mu+1)/(sigma2+1), normalized to sum to n*J.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import DomainError, ShapeError

SIGMA2_FLOOR = 1e-12


@dataclass(frozen=True)
class WeightTable:
    """Per-cell likelihood weights, strictly positive, summing to n*J."""

    v: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float)
        if v.ndim != 2:
            raise ShapeError("weight table must be 2-dimensional")
        if np.any(v <= 0):
            raise DomainError("weights must be strictly positive")
        total = v.size
        if abs(v.sum() - total) > 1e-6 * total:
            raise DomainError("weights must sum to n*J")
        v = np.ascontiguousarray(v)
        v.flags.writeable = False
        object.__setattr__(self, "v", v)

    @classmethod
    def unit(cls, n, J):
        return cls(np.ones((n, J)))


def _pava(y, w):
    """Pool-adjacent-violators: nondecreasing weighted LS fit to y."""
    n = len(y)
    level_y = list(map(float, y))
    level_w = list(map(float, w))
    counts = [1] * n
    i = 0
    while i < len(level_y) - 1:
        if level_y[i] <= level_y[i + 1] + 0.0:
            i += 1
            continue
        wsum = level_w[i] + level_w[i + 1]
        level_y[i] = (level_w[i] * level_y[i] + level_w[i + 1] * level_y[i + 1]) / wsum
        level_w[i] = wsum
        counts[i] += counts[i + 1]
        del level_y[i + 1], level_w[i + 1], counts[i + 1]
        while i > 0 and level_y[i - 1] > level_y[i]:
            wsum = level_w[i - 1] + level_w[i]
            level_y[i - 1] = (level_w[i - 1] * level_y[i - 1] + level_w[i] * level_y[i]) / wsum
            level_w[i - 1] = wsum
            counts[i - 1] += counts[i]
            del level_y[i], level_w[i], counts[i]
            i -= 1
    return level_y, level_w, counts


def pava_isotonic(x, y, centered=False, weights=None):
    """Nondecreasing least-squares fit of y on sorted x.

    Tied x values are pooled (weighted mean) before fitting. With
    ``centered=True``, each pooled block is anchored at its
    weight-averaged x and the fit is linearly interpolated between
    anchors, then evaluated back at the input x (constant beyond the
    outermost anchors).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size == 0:
        raise ShapeError("empty input")
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError("x and y must be equal-length vectors")
    if np.any(np.diff(x) < 0):
        raise DomainError("x must be nondecreasing")
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float)
    # pool exact ties in x
    ux, inverse = np.unique(x, return_inverse=True)
    wt = np.bincount(inverse, weights=w)
    yt = np.bincount(inverse, weights=w * y) / wt
    level_y, level_w, counts = _pava(yt, wt)
    fit_unique = np.repeat(level_y, counts)
    if not centered:
        return fit_unique[inverse]
    # anchor each block at its weighted-mean x, interpolate between anchors
    anchors_x = []
    anchors_y = []
    start = 0
    for val, cnt in zip(level_y, counts):
        block = slice(start, start + cnt)
        anchors_x.append(np.average(ux[block], weights=wt[block]))
        anchors_y.append(val)
        start += cnt
    fit_unique = np.interp(ux, anchors_x, anchors_y)
    return fit_unique[inverse]


def estimate_weights(W, mu_hat):
    """Likelihood weights from the fitted mean-variance relationship.

    Regresses squared residuals (W - mu_hat)^2 on mu_hat across all
    n*J cells by centered isotonic regression, then sets
    v_ij proportional to (mu_hat+1)/(sigma2_hat+1) and renormalizes.
    """
    W = np.asarray(getattr(W, "W", W), dtype=float)
    mu_hat = np.asarray(mu_hat, dtype=float)
    if W.shape != mu_hat.shape:
        raise ShapeError("W and mu_hat must have equal shape")
    resid2 = (W - mu_hat) ** 2
    if not np.all(np.isfinite(resid2)):
        raise DomainError("non-finite residuals")
    mu_flat = mu_hat.ravel()
    order = np.argsort(mu_flat, kind="stable")
    fit_sorted = pava_isotonic(mu_flat[order], resid2.ravel()[order], centered=True)
    sigma2 = np.empty_like(mu_flat)
    sigma2[order] = fit_sorted
    sigma2 = np.maximum(sigma2, SIGMA2_FLOOR).reshape(W.shape)
    v = (mu_hat + 1.0) / (sigma2 + 1.0)
    v *= v.size / v.sum()
    return WeightTable(v)
