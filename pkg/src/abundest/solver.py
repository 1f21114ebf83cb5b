"""Two-stage constrained maximization of the profiled Poisson objective.

Stage 1 runs a logarithmic barrier over log-ratio coordinates, solving
each penalized subproblem by Fisher scoring. Stage 2 cycles a
constrained Newton step (augmented Lagrangian solved by nonnegative
least squares) over unknown simplex rows, which permits exact zeros,
plus Fisher scoring over the remaining scalar parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
import scipy.optimize

from .likelihood import profile_objective
from .model import (CoordLayout, CountMatrix, DesignSet, DomainError,
                    ModelSpec, ParamMask, ParamSet, ShapeError, dmu_ring,
                    effective_z_tilde, flat_from_params, mu_ring,
                    params_from_flat)
from .reweight import WeightTable, estimate_weights

MU_FLOOR = 1e-10


class SolverError(RuntimeError):
    """Optimization failed (divergence, infeasibility, iteration cap)."""


@dataclass(frozen=True)
class SolverOptions:
    t0: float = 1.0
    barrier_factor: float = 10.0
    t_cutoff: float = 1e12
    subproblem_tol: float = 1e-10
    subproblem_max_iter: int = 100
    tol: float = 1e-8
    max_sweeps: int = 100
    eps_sum: float = 1e-10
    backtrack_factor: float = 0.5
    max_backtracks: int = 50
    kkt_tol: float = 1e-12
    al_max_rounds: int = 100
    max_step: float = 10.0   # trust-region cap on scalar/log-ratio steps


@dataclass(frozen=True)
class FitResult:
    params: ParamSet
    objective: float                  # profiled (weighted) log-likelihood
    mu_hat: np.ndarray
    weights: WeightTable | None
    converged: bool
    diagnostics: dict
    seed: int | None = None
    options: SolverOptions = field(default_factory=SolverOptions)


@dataclass
class BarrierState:
    """Trace of one barrier run: penalty schedule and objective path."""
    t: float
    a: float
    t_cutoff: float
    rounds: int = 0
    objective_trace: list = field(default_factory=list)


@dataclass
class LagrangianState:
    """State of the multiplier loop for one simplex row update."""
    p_k: np.ndarray
    lagrange_nu: float = 0.0
    penalty_mu: float = 1.0
    sum_tolerance: float = 1e-10
    p_update: np.ndarray | None = None
    step: np.ndarray | None = None
    converged: bool = False
    rounds: int = 0


@dataclass
class QuadModel:
    """Quadratic model of the objective restricted to one simplex row."""
    p0: np.ndarray
    f0: float
    g: np.ndarray
    H: np.ndarray

    def value(self, p):
        d = p - self.p0
        return self.f0 + self.g @ d + 0.5 * d @ self.H @ d


def nnls(A, b):
    """Nonnegative least squares: argmin_{x>=0} ||Ax - b||^2 (KKT-correct)."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise DomainError("nnls requires finite inputs")
    try:
        x, _ = scipy.optimize.nnls(A, b)
    except RuntimeError as exc:
        raise SolverError(f"nnls failed: {exc}") from exc
    return x


def fisher_step(grad, fim):
    """Solve (FIM + lambda I) s = grad, escalating lambda only on failure.

    lambda starts at zero; when the system is not solvable or the
    direction is not a descent direction for the gradient, it escalates
    from the gradient magnitude in powers of ten.
    """
    grad = np.asarray(grad, dtype=float)
    fim = np.asarray(fim, dtype=float)
    if not np.all(np.isfinite(grad)):
        raise SolverError("non-finite gradient")
    gnorm = float(np.linalg.norm(grad))
    if gnorm == 0.0:
        return np.zeros_like(grad)
    lam = 0.0
    for _ in range(40):
        try:
            cf = scipy.linalg.cho_factor(fim + lam * np.eye(fim.shape[0]),
                                         lower=False, check_finite=False)
            s = scipy.linalg.cho_solve(cf, grad, check_finite=False)
            if np.all(np.isfinite(s)) and s @ grad > 0:
                return s
        except (scipy.linalg.LinAlgError, ValueError):
            pass
        lam = max(gnorm, 1e-12) if lam == 0.0 else lam * 10.0
    raise SolverError("singular Fisher system after regularization")


def line_search(p_k, s_k, f, factor=0.5, max_halvings=50):
    """Backtracking along s_k: accept the first step that decreases f.

    Returns (p_new, stalled); stalled is True when no decrease was found,
    in which case p_new is p_k unchanged.
    """
    p_k = np.asarray(p_k, dtype=float)
    s_k = np.asarray(s_k, dtype=float)
    f0 = f(p_k)
    eps = 1.0
    for _ in range(max_halvings):
        cand = np.maximum(p_k + eps * s_k, 0.0)
        if f(cand) < f0:
            return cand, False
        eps *= factor
    return p_k, True


class Problem:
    """Dataset plus mask: evaluates the objective, gradient and FIM."""

    def __init__(self, W: CountMatrix, designs: DesignSet, mask: ParamMask,
                 cell_weights=None):
        self.W = W
        self.designs = designs
        self.mask = mask
        if cell_weights is None:
            self.v = np.ones_like(W.W)
        else:
            v = np.asarray(getattr(cell_weights, "v", cell_weights), dtype=float)
            if v.shape != W.W.shape:
                raise ShapeError("cell weights must match the count matrix")
            if np.any(v <= 0):
                raise DomainError("cell weights must be strictly positive")
            self.v = v
        self.vW_rows = np.einsum("ij,ij->i", self.v, W.W)

    def objective(self, params):
        """Negative profiled log-likelihood f_n (np.inf when infeasible)."""
        m, gam = profile_objective(self.W.W, mu_ring(params, self.designs), self.v)
        if not np.isfinite(m):
            return np.inf, None
        return -m, gam

    def grad_fim(self, params, layout, scale=None):
        """Gradient of M_n and the profiled Fisher information.

        The FIM is the Schur complement removing the profiled per-sample
        intensities. ``scale`` overrides exp(gamma_hat) (used by tests
        evaluating the information at known intensities).
        """
        W, v = self.W.W, self.v
        n = W.shape[0]
        mu = mu_ring(params, self.designs)
        if scale is None:
            vM = np.einsum("ij,ij->i", v, mu)
            c = self.vW_rows / vM
        else:
            c = np.asarray(scale, dtype=float)
        D = dmu_ring(params, self.designs, layout)
        L = layout.size
        mu_safe = np.maximum(mu, MU_FLOOR)
        pos = W > 0
        r = np.where(pos, v * (W / mu_safe - c[:, None]), -v * c[:, None])
        grad_m = np.einsum("ij,ijl->l", r, D) / n
        q = v * c[:, None] / mu_safe
        Dq = D * q[:, :, None]
        flatD = D.reshape(-1, L)
        i_xx = Dq.reshape(-1, L).T @ flatD / n
        a = np.einsum("ij,ijl->il", v * c[:, None], D) / n
        if scale is None:
            d = self.vW_rows / n
        else:
            d = c * np.einsum("ij,ij->i", v, mu) / n
        fim = i_xx - a.T @ (a / d[:, None])
        return grad_m, fim


def _scalars_only_layout(mask):
    layout = CoordLayout(mask, mode="p")
    layout.rows = []
    layout.size = layout.n_scalar
    return layout


# ---------------------------------------------------------------------------
# stage 1: barrier over log-ratio coordinates


def _barrier_penalty(x, layout):
    """Value, gradient and Hessian of the interior log penalty in rho."""
    val = 0.0
    grad = np.zeros_like(x)
    hess = np.zeros((x.size, x.size))
    for kind, k, free, off, width in layout.rows:
        if width == 0:
            continue
        rho = x[off:off + width]
        F = free.size
        m = max(0.0, rho.max())
        lse = m + np.log(np.exp(-m) + np.sum(np.exp(rho - m)))
        val += -rho.sum() + F * lse
        e = np.exp(rho - lse)          # p over leading free entries
        grad[off:off + width] = -1.0 + F * e
        hess[off:off + width, off:off + width] = F * (np.diag(e) - np.outer(e, e))
    return val, grad, hess


def _solve_subproblem(problem, x, layout, base, t, opts):
    """Fisher scoring on f_n + (1/t) * barrier penalty."""
    mask = problem.mask

    def penalized(xv):
        params = params_from_flat(xv, mask, layout, base)
        f, _ = problem.objective(params)
        pen, _, _ = _barrier_penalty(xv, layout)
        return f + pen / t

    fp = penalized(x)
    if not np.isfinite(fp):
        raise SolverError("non-finite objective at barrier subproblem start")
    for _ in range(opts.subproblem_max_iter):
        params = params_from_flat(x, mask, layout, base)
        grad_m, fim = problem.grad_fim(params, layout)
        _, pgrad, phess = _barrier_penalty(x, layout)
        g = -grad_m + pgrad / t
        H = fim + phess / t
        s = fisher_step(g, H)
        if not np.any(s):
            break
        snorm = np.linalg.norm(s)
        eps = min(1.0, opts.max_step / snorm) if snorm > 0 else 1.0
        improved = False
        for _ in range(opts.max_backtracks):
            cand = x - eps * s
            fc = penalized(cand)
            if fc < fp:
                x, fp_new = cand, fc
                improved = True
                break
            eps *= opts.backtrack_factor
        if not improved:
            break
        if abs(fp - fp_new) <= opts.subproblem_tol * max(1.0, abs(fp)):
            fp = fp_new
            break
        fp = fp_new
    return x, fp


def _barrier_stage(problem, init_params, opts):
    mask = problem.mask
    layout = CoordLayout(mask, mode="rho")
    state = BarrierState(t=opts.t0, a=opts.barrier_factor, t_cutoff=opts.t_cutoff)
    x = flat_from_params(init_params, mask, layout)
    base = init_params
    while state.t <= state.t_cutoff:
        x, _ = _solve_subproblem(problem, x, layout, base, state.t, opts)
        params = params_from_flat(x, mask, layout, base)
        f, _ = problem.objective(params)
        state.objective_trace.append(f)
        state.rounds += 1
        state.t *= state.a
    return params_from_flat(x, mask, layout, base), state


def barrier_solve(spec: ModelSpec, W: CountMatrix, weights=None,
                  init: ParamSet | None = None, opts: SolverOptions | None = None):
    """Interior solution of the barrier sequence (stage 1 only)."""
    opts = opts or SolverOptions()
    spec.validate(W)
    problem = Problem(W, spec.designs, spec.mask, weights)
    init = init if init is not None else init_params(spec, W)
    params, _ = _barrier_stage(problem, init, opts)
    return _with_profile_gamma(problem, params)


# ---------------------------------------------------------------------------
# stage 2: constrained Newton over simplex rows


class RowProblem:
    """f_n restricted to the free entries of one unknown simplex row."""

    def __init__(self, problem: Problem, params: ParamSet, kind, k, free):
        self.problem = problem
        self.kind, self.k, self.free = kind, k, free
        d = problem.designs
        if kind == "p":
            E = np.exp(d.X @ params.beta)
            self.A = d.Z[:, k:k + 1] * E[:, free]
        else:
            zt = effective_z_tilde(params, d)
            self.A = np.repeat(
                zt[:, k:k + 1] * np.exp(params.gamma_tilde[k]), free.size, axis=1)
        row = (params.p if kind == "p" else params.p_tilde)[k, free]
        mu = mu_ring(params, d)
        self.mu_minus = mu.copy()
        self.mu_minus[:, free] -= self.A * row
        np.maximum(self.mu_minus, 0.0, out=self.mu_minus)
        self.row0 = row

    def mu_of(self, row):
        mu = self.mu_minus.copy()
        mu[:, self.free] += self.A * row
        return mu

    def value(self, row):
        m, _ = profile_objective(self.problem.W.W, self.mu_of(row), self.problem.v)
        return np.inf if not np.isfinite(m) else -m

    def grad_fim(self, row):
        W, v = self.problem.W.W, self.problem.v
        n = W.shape[0]
        mu = self.mu_of(row)
        vM = np.einsum("ij,ij->i", v, mu)
        c = self.problem.vW_rows / vM
        mu_safe = np.maximum(mu, MU_FLOOR)
        pos = W > 0
        rr = np.where(pos, v * (W / mu_safe - c[:, None]), -v * c[:, None])
        Asub = self.A
        fidx = self.free
        grad = -(rr[:, fidx] * Asub).sum(axis=0) / n
        q = (v * c[:, None] / mu_safe)[:, fidx]
        diag = (q * Asub ** 2).sum(axis=0) / n
        a = (v[:, fidx] * c[:, None] * Asub) / n
        d = self.problem.vW_rows / n
        fim = np.diag(diag) - a.T @ (a / d[:, None])
        return grad, fim


def quad_approx(row_problem: RowProblem, p_k):
    """Quadratic model with Fisher curvature regularized by |grad| * I."""
    p_k = np.asarray(p_k, dtype=float)
    f0 = row_problem.value(p_k)
    if not np.isfinite(f0):
        raise SolverError("objective infeasible at quadratic expansion point")
    g, fim = row_problem.grad_fim(p_k)
    if not np.all(np.isfinite(g)):
        raise DomainError("non-finite gradient in row subproblem")
    H = fim + np.linalg.norm(g) * np.eye(g.size)
    return QuadModel(p0=p_k, f0=f0, g=g, H=H)


def _minimize_al(quad: QuadModel, nu, mu_pen):
    """Nonneg minimizer of Q + nu (sum p - 1) + mu (sum p - 1)^2 via nnls."""
    J = quad.g.size
    ones = np.ones(J)
    H2 = quad.H + 2.0 * mu_pen * np.outer(ones, ones)
    cvec = quad.g - quad.H @ quad.p0 + (nu - 2.0 * mu_pen) * ones
    ridge = 1e-12 * max(1.0, np.trace(H2) / J)
    for _ in range(8):
        try:
            R = scipy.linalg.cholesky(H2 + ridge * np.eye(J), lower=False)
            break
        except scipy.linalg.LinAlgError:
            ridge *= 100.0
    else:
        raise SolverError("row quadratic model is not positive definite")
    b = scipy.linalg.solve_triangular(R, -cvec, trans="T")
    return nnls(R, b)


def aug_lagrangian_update(state: LagrangianState, quad: QuadModel,
                          max_rounds=100):
    """Run the multiplier loop to feasibility; returns the updated state.

    Minimizes the augmented Lagrangian over the nonnegative orthant by
    nonnegative least squares, updating nu <- nu + 2 mu (sum p - 1) and
    inflating mu tenfold when the constraint violation fails to shrink
    by a factor of 4.
    """
    nu, mu_pen = state.lagrange_nu, state.penalty_mu
    prev = np.inf
    p = state.p_k
    for rounds in range(1, max_rounds + 1):
        p = _minimize_al(quad, nu, mu_pen)
        viol = p.sum() - 1.0
        if abs(viol) < state.sum_tolerance:
            return replace(state, p_update=p, step=p - state.p_k,
                           lagrange_nu=nu, penalty_mu=mu_pen,
                           converged=True, rounds=rounds)
        nu += 2.0 * mu_pen * viol
        if abs(viol) > prev / 4.0 and mu_pen < 1e16:
            mu_pen *= 10.0
        prev = abs(viol)
    raise SolverError("augmented Lagrangian failed to reach feasibility")


def _stage2(problem: Problem, params: ParamSet, opts: SolverOptions):
    mask = problem.mask
    row_layout = CoordLayout(mask, mode="p")
    scalar_layout = _scalars_only_layout(mask)
    f, _ = problem.objective(params)
    if not np.isfinite(f):
        raise SolverError("non-finite objective at stage-2 start")
    trace = [f]
    stalled_rows = set()
    converged = False
    sweeps = 0
    for sweeps in range(1, opts.max_sweeps + 1):
        f_prev = f
        for kind, k, free, _, _ in row_layout.rows:
            if free.size < 2:
                continue
            rp = RowProblem(problem, params, kind, k, free)
            quad = quad_approx(rp, rp.row0)
            st = LagrangianState(p_k=rp.row0, sum_tolerance=opts.eps_sum)
            st = aug_lagrangian_update(st, quad, max_rounds=opts.al_max_rounds)
            if np.linalg.norm(st.step) <= 1e-14:
                continue
            # a non-increasing full step is taken as-is so NNLS zeros land
            # exactly on the boundary; otherwise backtrack
            if rp.value(st.p_update) <= rp.value(rp.row0):
                new_row, stalled = st.p_update, False
            else:
                new_row, stalled = line_search(
                    rp.row0, st.step, rp.value,
                    factor=opts.backtrack_factor,
                    max_halvings=opts.max_backtracks)
            if stalled:
                stalled_rows.add((kind, k))
                continue
            stalled_rows.discard((kind, k))
            # entries this small are boundary coordinates the quadratic
            # model approaches only geometrically; snap them, keeping the
            # snap only when it does not increase the objective
            tiny = (new_row > 0) & (new_row < 1e-12)
            if np.any(tiny):
                snapped = np.where(tiny, 0.0, new_row)
                if rp.value(snapped) <= rp.value(new_row):
                    new_row = snapped
            full = np.zeros(mask.p_zero.shape[1])
            full[free] = new_row
            if kind == "p":
                newp = np.array(params.p)
                newp[k] = full
                params = params.replace(p=newp)
            else:
                newpt = np.array(params.p_tilde)
                newpt[k] = full
                params = params.replace(p_tilde=newpt)
            f = rp.value(new_row)
        if scalar_layout.size:
            x = flat_from_params(params, mask, scalar_layout)
            grad_m, fim = problem.grad_fim(params, scalar_layout)
            s = fisher_step(-grad_m, fim)
            if np.any(s):
                base = params

                def scalar_f(xv):
                    cand = params_from_flat(xv, mask, scalar_layout, base)
                    fv, _ = problem.objective(cand)
                    return fv

                snorm = np.linalg.norm(s)
                eps = min(1.0, opts.max_step / snorm) if snorm > 0 else 1.0
                for _ in range(opts.max_backtracks):
                    cand = x - eps * s
                    fc = scalar_f(cand)
                    if fc < f:
                        params = params_from_flat(cand, mask,
                                                  scalar_layout, base)
                        f = fc
                        break
                    eps *= opts.backtrack_factor
        trace.append(f)
        if abs(f_prev - f) <= opts.tol * max(1.0, abs(f_prev)):
            converged = True
            break
    diagnostics = {"sweeps": sweeps, "stalled_rows": sorted(stalled_rows),
                   "stage2_trace": trace}
    return params, f, converged, diagnostics


# ---------------------------------------------------------------------------
# fit driver


def init_params(spec: ModelSpec, W: CountMatrix) -> ParamSet:
    """Default initialization: uniform simplex rows, zero scalars."""
    d, m = spec.designs, spec.mask
    J = spec.J
    beta = np.where(m.beta_estimable, 0.0, m.beta_fixed)
    p = np.empty((d.K, J))
    for k in range(d.K):
        if m.p_known[k]:
            p[k] = m.p_fixed_rows[k]
        else:
            free = ~m.p_zero[k]
            p[k] = np.where(free, 1.0 / free.sum(), 0.0)
    pt = np.empty((d.K_tilde, J))
    for k in range(d.K_tilde):
        if m.p_tilde_known[k]:
            pt[k] = m.p_tilde_fixed_rows[k]
        else:
            free = ~m.p_tilde_zero[k]
            pt[k] = np.where(free, 1.0 / free.sum(), 0.0)
    gt = np.where(m.gamma_tilde_estimable, 0.0, m.gamma_tilde_fixed)
    at = np.where(m.alpha_tilde_estimable, 0.0, m.alpha_tilde_fixed) \
        if d.n_groups else np.zeros(0)
    params = ParamSet(beta=beta, p=p, p_tilde=pt, gamma_tilde=gt,
                      gamma=np.zeros(d.n), alpha_tilde=at)
    mu = mu_ring(params, d)
    gamma = np.log(W.row_totals) - np.log(np.maximum(mu.sum(axis=1), MU_FLOOR))
    return params.replace(gamma=gamma)


def _with_profile_gamma(problem: Problem, params: ParamSet):
    _, gam = problem.objective(params)
    if gam is None:
        return params
    return params.replace(gamma=gam)


def beta_connectivity(spec: ModelSpec, W: CountMatrix):
    """Graph-connectivity heuristic for identifiability of beta.

    Builds a graph on taxa with edges between taxa co-present in a
    sample of known composition; returns True when estimable beta
    columns lie in one connected component (a necessary but not
    sufficient condition).
    """
    m, d = spec.mask, spec.designs
    if not np.any(m.beta_estimable):
        return True
    known_rows = np.flatnonzero(m.p_known)
    if known_rows.size == 0:
        return False
    J = spec.J
    adj = [set() for _ in range(J)]
    for i in range(d.n):
        weight_on_known = d.Z[i, known_rows].sum()
        if weight_on_known < 1.0 - 1e-12:
            continue
        profile = d.Z[i, known_rows] @ m.p_fixed_rows[known_rows]
        present = np.flatnonzero(profile > 0)
        for a in present:
            adj[a].update(present)
    start_candidates = [j for j in range(J) if adj[j]]
    if not start_candidates:
        return False
    seen = set()
    stack = [start_candidates[0]]
    while stack:
        node = stack.pop()
        if node in seen:
            continue
        seen.add(node)
        stack.extend(adj[node] - seen)
    needed = set(np.flatnonzero(np.any(m.beta_estimable, axis=0)))
    return needed.issubset(seen)


def fit(spec: ModelSpec, W: CountMatrix, estimator="unweighted",
        opts: SolverOptions | None = None, seed=None, *,
        init: ParamSet | None = None, skip_barrier=False,
        cell_weights=None) -> FitResult:
    """Two-stage maximum (weighted) likelihood fit.

    Parameters
    ----------
    estimator : {"unweighted", "reweighted"}
        The reweighted estimator first fits the unweighted barrier
        stage, estimates mean-variance weights from it, then reruns the
        barrier and stage 2 on the weighted objective.
    init, skip_barrier
        Warm start support: with ``skip_barrier=True`` only stage 2 runs,
        starting at ``init`` (used for bootstrap replicates, where the
        start is already near the optimum and may sit on the boundary).
    cell_weights : array or WeightTable, optional
        Externally supplied weights; disables internal weight estimation.
    """
    if estimator not in ("unweighted", "reweighted"):
        raise ValueError(f"unknown estimator {estimator!r}")
    opts = opts or SolverOptions()
    spec.validate(W)
    diagnostics = {}
    weights_out = None
    if cell_weights is not None:
        problem = Problem(W, spec.designs, spec.mask, cell_weights)
        if isinstance(cell_weights, WeightTable):
            weights_out = cell_weights
    else:
        problem = Problem(W, spec.designs, spec.mask, None)
    start = init if init is not None else init_params(spec, W)
    diagnostics["beta_connected"] = beta_connectivity(spec, W)

    if not skip_barrier:
        params, bstate = _barrier_stage(problem, start, opts)
        diagnostics["barrier_rounds"] = bstate.rounds
        diagnostics["barrier_trace"] = bstate.objective_trace
        if estimator == "reweighted" and cell_weights is None:
            interim = _with_profile_gamma(problem, params)
            mu_hat = np.exp(interim.gamma)[:, None] * mu_ring(interim, spec.designs)
            weights_out = estimate_weights(W.W, mu_hat)
            problem = Problem(W, spec.designs, spec.mask, weights_out)
            params, bstate2 = _barrier_stage(problem, params, opts)
            diagnostics["barrier_trace_weighted"] = bstate2.objective_trace
    else:
        if init is None:
            raise ValueError("skip_barrier requires an explicit init")
        params = start
        if estimator == "reweighted" and cell_weights is None:
            raise ValueError(
                "skip_barrier with the reweighted estimator requires "
                "precomputed cell_weights")

    params, f, converged, s2diag = _stage2(problem, params, opts)
    diagnostics.update(s2diag)
    params = _with_profile_gamma(problem, params)
    mu_hat = np.exp(params.gamma)[:, None] * mu_ring(params, spec.designs)
    return FitResult(params=params, objective=-f, mu_hat=mu_hat,
                     weights=weights_out, converged=converged,
                     diagnostics=diagnostics, seed=seed, options=opts)
