"""Data model for count tables, experiment designs and parameters.

Evaluates the mean model

    mu = D_gamma (Z p) o exp(X beta) + D_gamma Z~' [p~ o exp(gamma~ 1^T)]

where Z~' is the spurious-read design with rows optionally scaled by
per-group log-scales alpha~, together with its analytic derivatives.
All types are immutable after construction; evaluation functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SIMPLEX_TOL = 1e-8


class ShapeError(ValueError):
    """Dimension mismatch between data, designs and parameters."""


class DomainError(ValueError):
    """Values outside the domain required by the model."""


def _freeze(a):
    a = np.ascontiguousarray(np.asarray(a, dtype=float))
    a.flags.writeable = False
    return a


def _check_simplex_rows(mat, name, tol=SIMPLEX_TOL):
    if np.any(mat < -tol) or np.any(mat > 1 + tol):
        raise DomainError(f"{name} entries must lie in [0, 1]")
    sums = mat.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > max(tol, 1e-6)):
        raise DomainError(f"rows of {name} must sum to 1 (got sums {sums})")


@dataclass(frozen=True)
class CountMatrix:
    """Observed n x J table of nonnegative read counts or abundances."""

    W: np.ndarray

    def __post_init__(self):
        W = np.asarray(self.W, dtype=float)
        if W.ndim != 2:
            raise ShapeError("count matrix must be 2-dimensional")
        if not np.all(np.isfinite(W)):
            raise DomainError("count matrix contains non-finite entries")
        if np.any(W < 0):
            raise DomainError("count matrix contains negative entries")
        if np.any(W.sum(axis=1) <= 0):
            bad = np.where(W.sum(axis=1) <= 0)[0]
            raise DomainError(
                f"samples {bad.tolist()} have zero total reads; "
                "drop these rows before fitting"
            )
        object.__setattr__(self, "W", _freeze(W))

    @property
    def n(self):
        return self.W.shape[0]

    @property
    def J(self):
        return self.W.shape[1]

    @property
    def row_totals(self):
        return self.W.sum(axis=1)


@dataclass(frozen=True)
class DesignSet:
    """Sample, detection and spurious-read design matrices.

    Parameters
    ----------
    Z : (n, K) array
        Sample design; each row lies in the closed simplex.
    X : (n, p_cov) array
        Detection design.
    Z_tilde : (n, K_tilde) array
        Spurious read design, entries >= 0.
    spurious_groups : (n,) int array, optional
        Group index g >= 0 per sample, or -1 for no group. Rows of
        Z_tilde in group g are scaled by exp(alpha_tilde[g]).
    """

    Z: np.ndarray
    X: np.ndarray
    Z_tilde: np.ndarray
    spurious_groups: np.ndarray | None = None

    def __post_init__(self):
        Z = np.asarray(self.Z, dtype=float)
        X = np.asarray(self.X, dtype=float)
        Zt = np.asarray(self.Z_tilde, dtype=float)
        if Z.ndim != 2 or X.ndim != 2 or Zt.ndim != 2:
            raise ShapeError("design matrices must be 2-dimensional")
        n = Z.shape[0]
        if X.shape[0] != n or Zt.shape[0] != n:
            raise ShapeError("design matrices must share the sample dimension")
        _check_simplex_rows(Z, "Z")
        if np.any(Zt < 0):
            raise DomainError("Z_tilde entries must be nonnegative")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Zt))):
            raise DomainError("design matrices contain non-finite entries")
        object.__setattr__(self, "Z", _freeze(Z))
        object.__setattr__(self, "X", _freeze(X))
        object.__setattr__(self, "Z_tilde", _freeze(Zt))
        if self.spurious_groups is not None:
            g = np.asarray(self.spurious_groups, dtype=int)
            if g.shape != (n,):
                raise ShapeError("spurious_groups must have length n")
            if np.any(g < -1):
                raise DomainError("group indices must be >= -1")
            g = np.ascontiguousarray(g)
            g.flags.writeable = False
            object.__setattr__(self, "spurious_groups", g)

    @property
    def n(self):
        return self.Z.shape[0]

    @property
    def K(self):
        return self.Z.shape[1]

    @property
    def K_tilde(self):
        return self.Z_tilde.shape[1]

    @property
    def p_cov(self):
        return self.X.shape[1]

    @property
    def n_groups(self):
        if self.spurious_groups is None:
            return 0
        return int(self.spurious_groups.max(initial=-1)) + 1


@dataclass(frozen=True)
class ParamSet:
    """Full parameter tuple (beta, p, p_tilde, gamma_tilde, gamma, alpha_tilde)."""

    beta: np.ndarray          # (p_cov, J) log detection effects
    p: np.ndarray             # (K, J) specimen relative abundances
    p_tilde: np.ndarray       # (K_tilde, J) contaminant profiles
    gamma_tilde: np.ndarray   # (K_tilde,) log contaminant intensities
    gamma: np.ndarray         # (n,) log sample intensities
    alpha_tilde: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        for name in ("beta", "p", "p_tilde", "gamma_tilde", "gamma", "alpha_tilde"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise DomainError(f"non-finite values in {name}")
            object.__setattr__(self, name, _freeze(arr))
        if self.beta.ndim != 2 or self.p.ndim != 2 or self.p_tilde.ndim != 2:
            raise ShapeError("beta, p and p_tilde must be 2-dimensional")
        J = self.p.shape[1]
        if self.beta.shape[1] != J or self.p_tilde.shape[1] != J:
            raise ShapeError("beta, p and p_tilde must share the taxon dimension")
        if self.gamma_tilde.shape != (self.p_tilde.shape[0],):
            raise ShapeError("gamma_tilde must have one entry per contaminant source")
        _check_simplex_rows(self.p, "p")
        if self.p_tilde.shape[0]:
            _check_simplex_rows(self.p_tilde, "p_tilde")

    @property
    def J(self):
        return self.p.shape[1]

    @property
    def K(self):
        return self.p.shape[0]

    @property
    def K_tilde(self):
        return self.p_tilde.shape[0]

    def replace(self, **kw):
        fields = dict(
            beta=self.beta, p=self.p, p_tilde=self.p_tilde,
            gamma_tilde=self.gamma_tilde, gamma=self.gamma,
            alpha_tilde=self.alpha_tilde,
        )
        fields.update(kw)
        return ParamSet(**fields)


@dataclass(frozen=True)
class ParamMask:
    """Known/estimable classification of every model parameter.

    Rows of ``p`` and ``p_tilde`` are known (fixed at supplied values) or
    unknown; individual entries of unknown rows may additionally be pinned
    to zero (``p_zero`` / ``p_tilde_zero``), in which case the remaining
    free entries carry the full simplex constraint. ``gamma`` is always
    profiled out and never appears here.
    """

    beta_estimable: np.ndarray       # (p_cov, J) bool
    beta_fixed: np.ndarray           # (p_cov, J) values where not estimable
    p_known: np.ndarray              # (K,) bool
    p_fixed_rows: np.ndarray         # (K, J) values for known rows
    p_zero: np.ndarray               # (K, J) bool, pinned zeros in unknown rows
    p_tilde_known: np.ndarray        # (K_tilde,) bool
    p_tilde_fixed_rows: np.ndarray   # (K_tilde, J)
    p_tilde_zero: np.ndarray         # (K_tilde, J) bool
    gamma_tilde_estimable: np.ndarray  # (K_tilde,) bool
    gamma_tilde_fixed: np.ndarray      # (K_tilde,)
    alpha_tilde_estimable: np.ndarray  # (G,) bool
    alpha_tilde_fixed: np.ndarray      # (G,)

    def __post_init__(self):
        for name in ("beta_estimable", "p_known", "p_zero", "p_tilde_known",
                     "p_tilde_zero", "gamma_tilde_estimable", "alpha_tilde_estimable"):
            arr = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=bool))
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        for name in ("beta_fixed", "p_fixed_rows", "p_tilde_fixed_rows",
                     "gamma_tilde_fixed", "alpha_tilde_fixed"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))
        for k in range(self.p_known.size):
            if self.p_known[k]:
                _check_simplex_rows(self.p_fixed_rows[k:k + 1], f"p_fixed_rows[{k}]")
            elif not np.any(~self.p_zero[k]):
                raise DomainError(f"unknown p row {k} has no free entries")
        for k in range(self.p_tilde_known.size):
            if self.p_tilde_known[k]:
                _check_simplex_rows(
                    self.p_tilde_fixed_rows[k:k + 1], f"p_tilde_fixed_rows[{k}]")
            elif not np.any(~self.p_tilde_zero[k]):
                raise DomainError(f"unknown p_tilde row {k} has no free entries")

    @property
    def n_estimable(self):
        total = int(self.beta_estimable.sum())
        total += int(self.gamma_tilde_estimable.sum())
        total += int(self.alpha_tilde_estimable.sum())
        for k in range(self.p_known.size):
            if not self.p_known[k]:
                total += int(np.sum(~self.p_zero[k]))
        for k in range(self.p_tilde_known.size):
            if not self.p_tilde_known[k]:
                total += int(np.sum(~self.p_tilde_zero[k]))
        return total


def make_mask(J, K, K_tilde, p_cov, n_groups=0, *, known_p=None, zero_p=None,
              known_p_tilde=None, zero_p_tilde=None, fixed_beta=None,
              reference_taxon=None, fixed_gamma_tilde=None,
              fixed_alpha_tilde=None):
    """Convenience constructor for :class:`ParamMask`.

    Parameters
    ----------
    known_p : dict[int, array], optional
        Known specimen rows, index -> simplex row.
    zero_p : iterable of (k, j), optional
        Entries of unknown p rows pinned to exactly zero.
    fixed_beta : dict[(q, j), float], optional
        Individual beta entries held fixed.
    reference_taxon : int, optional
        Column of beta fixed to zero for identifiability.
    fixed_gamma_tilde, fixed_alpha_tilde : dict[int, float], optional
    """
    beta_est = np.ones((p_cov, J), dtype=bool)
    beta_fix = np.zeros((p_cov, J))
    if reference_taxon is not None:
        beta_est[:, reference_taxon] = False
    for (q, j), val in (fixed_beta or {}).items():
        beta_est[q, j] = False
        beta_fix[q, j] = val
    p_known = np.zeros(K, dtype=bool)
    p_fixed = np.zeros((K, J))
    for k, row in (known_p or {}).items():
        p_known[k] = True
        p_fixed[k] = np.asarray(row, dtype=float)
    p_zero = np.zeros((K, J), dtype=bool)
    for (k, j) in (zero_p or ()):
        p_zero[k, j] = True
    pt_known = np.zeros(K_tilde, dtype=bool)
    pt_fixed = np.zeros((K_tilde, J))
    for k, row in (known_p_tilde or {}).items():
        pt_known[k] = True
        pt_fixed[k] = np.asarray(row, dtype=float)
    pt_zero = np.zeros((K_tilde, J), dtype=bool)
    for (k, j) in (zero_p_tilde or ()):
        pt_zero[k, j] = True
    gt_est = np.ones(K_tilde, dtype=bool)
    gt_fix = np.zeros(K_tilde)
    for k, val in (fixed_gamma_tilde or {}).items():
        gt_est[k] = False
        gt_fix[k] = val
    at_est = np.ones(n_groups, dtype=bool)
    at_fix = np.zeros(n_groups)
    for g, val in (fixed_alpha_tilde or {}).items():
        at_est[g] = False
        at_fix[g] = val
    return ParamMask(
        beta_estimable=beta_est, beta_fixed=beta_fix,
        p_known=p_known, p_fixed_rows=p_fixed, p_zero=p_zero,
        p_tilde_known=pt_known, p_tilde_fixed_rows=pt_fixed,
        p_tilde_zero=pt_zero,
        gamma_tilde_estimable=gt_est, gamma_tilde_fixed=gt_fix,
        alpha_tilde_estimable=at_est, alpha_tilde_fixed=at_fix,
    )


@dataclass(frozen=True)
class ModelSpec:
    """A design set plus a parameter mask; validated against the data."""

    designs: DesignSet
    mask: ParamMask

    def __post_init__(self):
        d, m = self.designs, self.mask
        if m.p_known.shape != (d.K,):
            raise ShapeError("mask p rows do not match the sample design")
        if m.p_tilde_known.shape != (d.K_tilde,):
            raise ShapeError("mask p_tilde rows do not match the spurious design")
        if m.beta_estimable.shape[0] != d.p_cov:
            raise ShapeError("mask beta rows do not match the detection design")
        if m.alpha_tilde_estimable.shape != (d.n_groups,):
            raise ShapeError("mask alpha_tilde does not match spurious groups")

    @property
    def J(self):
        return self.mask.beta_estimable.shape[1]

    def validate(self, W: CountMatrix):
        if W.n != self.designs.n:
            raise ShapeError(
                f"count matrix has {W.n} samples, designs have {self.designs.n}")
        if W.J != self.J:
            raise ShapeError(
                f"count matrix has {W.J} taxa, mask expects {self.J}")


def effective_z_tilde(params: ParamSet, designs: DesignSet):
    """Spurious design with group rows scaled by exp(alpha_tilde)."""
    Zt = designs.Z_tilde
    g = designs.spurious_groups
    if g is None or params.alpha_tilde.size == 0:
        return Zt
    scale = np.ones(designs.n)
    active = g >= 0
    scale[active] = np.exp(params.alpha_tilde[g[active]])
    return Zt * scale[:, None]


def mean_components(params: ParamSet, designs: DesignSet):
    """Signal and spurious terms of the mean model, without exp(gamma)."""
    if designs.Z.shape[1] != params.K or designs.X.shape[1] != params.beta.shape[0]:
        raise ShapeError("parameter shapes do not match designs")
    if designs.Z_tilde.shape[1] != params.K_tilde:
        raise ShapeError("p_tilde does not match spurious design")
    signal = (designs.Z @ params.p) * np.exp(designs.X @ params.beta)
    Zt = effective_z_tilde(params, designs)
    spurious = Zt @ (params.p_tilde * np.exp(params.gamma_tilde)[:, None])
    return signal, spurious


def mu_ring(params: ParamSet, designs: DesignSet):
    """Mean model up to the factor exp(gamma)."""
    signal, spurious = mean_components(params, designs)
    return signal + spurious


def mean_model(params: ParamSet, designs: DesignSet):
    """Evaluate the full mean model mu (n x J, nonnegative)."""
    if params.gamma.shape != (designs.n,):
        raise ShapeError("gamma must have one entry per sample")
    mu = np.exp(params.gamma)[:, None] * mu_ring(params, designs)
    if not np.all(np.isfinite(mu)):
        raise DomainError("mean model evaluated to non-finite values")
    return mu


class CoordLayout:
    """Flat indexing of estimable coordinates.

    Scalar coordinates (free beta entries, then gamma_tilde, then
    alpha_tilde) come first, followed by one block per unknown row of p
    and p_tilde. In ``rho`` mode a row block holds log-ratio coordinates
    relative to the row's last free entry (length n_free - 1); in ``p``
    mode it holds the free entries directly (length n_free).
    """

    def __init__(self, mask: ParamMask, mode="rho"):
        if mode not in ("rho", "p"):
            raise ValueError("mode must be 'rho' or 'p'")
        self.mode = mode
        self.mask = mask
        self.beta_coords = [tuple(ij) for ij in np.argwhere(mask.beta_estimable)]
        self.gt_coords = list(np.flatnonzero(mask.gamma_tilde_estimable))
        self.at_coords = list(np.flatnonzero(mask.alpha_tilde_estimable))
        self.n_scalar = len(self.beta_coords) + len(self.gt_coords) + len(self.at_coords)
        self.rows = []  # (kind, k, free_idx, offset, width)
        off = self.n_scalar
        for kind, known, zero in (("p", mask.p_known, mask.p_zero),
                                  ("pt", mask.p_tilde_known, mask.p_tilde_zero)):
            for k in range(known.size):
                if known[k]:
                    continue
                free = np.flatnonzero(~zero[k])
                width = free.size - 1 if mode == "rho" else free.size
                self.rows.append((kind, k, free, off, width))
                off += width
        self.size = off

    def row_block(self, kind, k):
        for r in self.rows:
            if r[0] == kind and r[1] == k:
                return r
        raise KeyError((kind, k))


def _softmax_row(rho):
    # softmax of (rho, 0): last free entry is the within-row reference
    z = np.concatenate([rho, [0.0]])
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def params_from_flat(x, mask: ParamMask, layout: CoordLayout, base: ParamSet):
    """Rebuild a full parameter tuple from flat estimable coordinates."""
    beta = np.array(base.beta)
    beta[~mask.beta_estimable] = mask.beta_fixed[~mask.beta_estimable]
    gt = np.array(base.gamma_tilde)
    gt[~mask.gamma_tilde_estimable] = mask.gamma_tilde_fixed[~mask.gamma_tilde_estimable]
    at = np.array(base.alpha_tilde)
    if at.size:
        at[~mask.alpha_tilde_estimable] = mask.alpha_tilde_fixed[~mask.alpha_tilde_estimable]
    pos = 0
    for (q, j) in layout.beta_coords:
        beta[q, j] = x[pos]
        pos += 1
    for k in layout.gt_coords:
        gt[k] = x[pos]
        pos += 1
    for g in layout.at_coords:
        at[g] = x[pos]
        pos += 1
    p = np.array(base.p)
    p[mask.p_known] = mask.p_fixed_rows[mask.p_known]
    pt = np.array(base.p_tilde)
    pt[mask.p_tilde_known] = mask.p_tilde_fixed_rows[mask.p_tilde_known]
    for kind, k, free, off, width in layout.rows:
        target = p if kind == "p" else pt
        target[k] = 0.0
        block = x[off:off + width]
        if layout.mode == "rho":
            target[k, free] = _softmax_row(block)
        else:
            target[k, free] = block
    return ParamSet(beta=beta, p=p, p_tilde=pt, gamma_tilde=gt,
                    gamma=base.gamma, alpha_tilde=at)


def flat_from_params(params: ParamSet, mask: ParamMask, layout: CoordLayout,
                     rho_clip=1e-10):
    """Extract flat estimable coordinates from a parameter tuple."""
    x = np.zeros(layout.size)
    pos = 0
    for (q, j) in layout.beta_coords:
        x[pos] = params.beta[q, j]
        pos += 1
    for k in layout.gt_coords:
        x[pos] = params.gamma_tilde[k]
        pos += 1
    for g in layout.at_coords:
        x[pos] = params.alpha_tilde[g]
        pos += 1
    for kind, k, free, off, width in layout.rows:
        row = (params.p if kind == "p" else params.p_tilde)[k, free]
        if layout.mode == "rho":
            safe = np.maximum(row, rho_clip)
            x[off:off + width] = np.log(safe[:-1]) - np.log(safe[-1])
        else:
            x[off:off + width] = row
    return x


def dmu_ring(params: ParamSet, designs: DesignSet, layout: CoordLayout):
    """Per-cell partials of mu_ring w.r.t. the flat estimable coordinates.

    Returns an (n, J, L) tensor. In ``rho`` mode the row blocks are
    differentiated through the log-ratio reparametrization.
    """
    n, J = designs.n, params.J
    L = layout.size
    D = np.zeros((n, J, L))
    signal, spurious = mean_components(params, designs)
    E = np.exp(designs.X @ params.beta)
    Zt_eff = effective_z_tilde(params, designs)
    egt = np.exp(params.gamma_tilde)
    pos = 0
    for (q, j) in layout.beta_coords:
        D[:, j, pos] = designs.X[:, q] * signal[:, j]
        pos += 1
    for k in layout.gt_coords:
        D[:, :, pos] = np.outer(Zt_eff[:, k], params.p_tilde[k] * egt[k])
        pos += 1
    g = designs.spurious_groups
    for grp in layout.at_coords:
        rows = np.flatnonzero(g == grp)
        D[rows, :, pos] = spurious[rows]
        pos += 1
    for kind, k, free, off, width in layout.rows:
        if kind == "p":
            A = designs.Z[:, k:k + 1] * E[:, free]          # (n, F)
            row = params.p[k, free]
        else:
            A = np.repeat(Zt_eff[:, k:k + 1] * egt[k], free.size, axis=1)
            row = params.p_tilde[k, free]
        if layout.mode == "rho":
            # dp_j / drho_u = p_j (delta_ju - p_u), u over free entries
            # excluding the last (reference) one
            dp = row[:, None] * (np.eye(free.size)[:, :-1] - row[None, :-1])
            D[:, free, off:off + width] = A[:, :, None] * dp[None, :, :]
        else:
            for idx, j in enumerate(free):
                D[:, j, off + idx] = A[:, idx]
    return D


def mean_gradient(params: ParamSet, designs: DesignSet, mask: ParamMask):
    """Partials of the mean model w.r.t. estimable coordinates.

    Simplex rows are differentiated in their log-ratio coordinates.
    Returns an (n, J, L) tensor; gamma is held fixed (it is profiled out
    of the objective, not estimated directly).
    """
    layout = CoordLayout(mask, mode="rho")
    if layout.size == 0:
        raise DomainError("mask marks no estimable parameters")
    D = dmu_ring(params, designs, layout)
    return np.exp(params.gamma)[:, None, None] * D


def rmse(p_hat, p_true):
    """Root mean squared error between two simplex vectors."""
    p_hat = np.asarray(p_hat, dtype=float)
    p_true = np.asarray(p_true, dtype=float)
    if p_hat.shape != p_true.shape or p_hat.ndim != 1:
        raise ShapeError("rmse requires two vectors of equal length")
    _check_simplex_rows(p_hat[None, :], "p_hat", tol=1e-6)
    _check_simplex_rows(p_true[None, :], "p_true", tol=1e-6)
    return float(np.sqrt(np.mean((p_hat - p_true) ** 2)))
