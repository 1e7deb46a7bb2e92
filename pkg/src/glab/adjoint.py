"""Hamiltonian calculus and the adjoint backward equation.

Under one volatility scenario the adjoint pair (p, q) solves a classical
backward SDE with terminal value g'(X(T)); it is computed here by backward
least-squares regression on a polynomial state basis (conditional means for
p, covariance with the driver increment for q).  The worst-case solution is
the pointwise maximum of the per-scenario value functions; the residual
process K estimated along a reference scenario measures how far that
aggregate is from solving the single-scenario equation.  A vanishing K is
the pivotal hypothesis of the sufficient optimality test, so K is reported,
never constrained.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .control import Control, ControlProblem
from .driver import simulate_driver, simulate_state
from .errors import RegressionError, UnsupportedModeError

__all__ = [
    "ControlProblem",
    "Control",
    "BasisSpec",
    "hamiltonian",
    "dH_du",
    "dH_dx",
    "solve_adjoint_under",
    "aggregate_gbsde",
    "solve_adjoint_family",
    "AdjointFit",
    "AdjointSolution",
]


# --------------------------------------------------------------------------
# Hamiltonian

def _coef(problem, name, t, x, u):
    fn = getattr(problem, name)
    return fn(t, x, u) if fn is not None else 0.0


def hamiltonian(problem, t, x, u, p, q, qv_density):
    """f + (b + mu*qv_density)*p + sigma*qv_density*q."""
    h = _coef(problem, "f", t, x, u)
    h = h + (_coef(problem, "b", t, x, u)
             + _coef(problem, "mu", t, x, u) * qv_density) * p
    h = h + _coef(problem, "sigma", t, x, u) * qv_density * q
    return h


def _dcoef(problem, name, wrt, t, x, u):
    if getattr(problem, name) is None:
        return 0.0
    if wrt == "x":
        return problem.dx(name, t, x, u)
    return problem.du(name, t, x, u)


def dH_du(problem, t, x, u, p, q, qv_density):
    """u-partial of the Hamiltonian (analytic partials when supplied,
    else central differences, one-sided at the boundary of U)."""
    return (
        _dcoef(problem, "f", "u", t, x, u)
        + (_dcoef(problem, "b", "u", t, x, u)
           + _dcoef(problem, "mu", "u", t, x, u) * qv_density) * p
        + _dcoef(problem, "sigma", "u", t, x, u) * qv_density * q
    )


def dH_dx(problem, t, x, u, p, q, qv_density):
    """x-partial of the Hamiltonian."""
    return (
        _dcoef(problem, "f", "x", t, x, u)
        + (_dcoef(problem, "b", "x", t, x, u)
           + _dcoef(problem, "mu", "x", t, x, u) * qv_density) * p
        + _dcoef(problem, "sigma", "x", t, x, u) * qv_density * q
    )


# --------------------------------------------------------------------------
# regression basis

@dataclass(frozen=True)
class BasisSpec:
    """Regression basis for the backward solver.

    Monomials of the (standardized) regression coordinate up to ``degree``.
    coordinate: "state" regresses on x, "log" on log x, "gprime" on g'(x),
    "auto" (default) picks "gprime" for multiplicative problems and
    "state" otherwise.  For geometric dynamics the span of {1, g'(x)} is
    closed under the transition kernel and contains the adjoint solution,
    so it fits without truncation bias; monomials in (log-)state cannot
    represent those solutions, and powers beyond the first only feed the
    backward recursion with noise that the kernel amplifies exponentially.
    Hence ``degree=None`` resolves to 1 on the g' coordinate and to 3
    otherwise.  ``features`` replaces the monomials with custom callables
    xi -> column; an intercept is prepended automatically.
    """

    degree: object = None
    coordinate: str = "auto"
    features: tuple = None

    def resolve(self, problem):
        c = self.coordinate
        if c == "auto":
            c = "gprime" if problem.multiplicative else "state"
        elif c not in ("state", "log", "gprime"):
            raise ValueError(f"unknown basis coordinate {c!r}")
        d = self.degree
        if d is None:
            d = 1 if c == "gprime" else 3
        return c, int(d)


class _StepBasis:
    """Design matrix for one time step, standardized and range-clamped."""

    def __init__(self, spec, xi_fit, cond_limit, when=""):
        self.spec = spec
        self.lo = float(np.min(xi_fit))
        self.hi = float(np.max(xi_fit))
        if spec.features is None:
            mu = float(xi_fit.mean())
            sd = float(xi_fit.std())
            if sd < 1e-13 * max(1.0, abs(mu)):
                # degenerate state (e.g. the initial node): intercept only
                self.mu, self.sd, self.degree = mu, 1.0, 0
            else:
                self.mu, self.sd, self.degree = mu, sd, spec.degree
            self.ncols = self.degree + 1
        else:
            self.ncols = 1 + len(spec.features)
        dv = self.design(xi_fit)
        gram = dv.T @ dv
        ev = np.linalg.eigvalsh(gram)
        ev = np.clip(ev, 0.0, None)
        self.cond = math.sqrt(ev[-1] / ev[0]) if ev[0] > 0 else math.inf
        if self.cond > cond_limit:
            raise RegressionError(
                f"regression design singular{when}: condition number "
                f"{self.cond:.3e} exceeds {cond_limit:.0e}; change the basis "
                "(degree or custom features in BasisSpec)"
            )
        self.gram = gram

    def design(self, xi, clamp=False):
        xi = np.asarray(xi, dtype=float)
        if clamp:
            xi = np.clip(xi, self.lo, self.hi)
        m = xi.shape[0]
        if self.spec.features is None:
            z = (xi - self.mu) / self.sd
            cols = np.empty((m, self.ncols))
            cols[:, 0] = 1.0
            for d in range(1, self.ncols):
                cols[:, d] = cols[:, d - 1] * z
            return cols
        cols = np.empty((m, self.ncols))
        cols[:, 0] = 1.0
        for i, f in enumerate(self.spec.features):
            cols[:, i + 1] = f(xi)
        return cols

    def solve(self, dv, y):
        return np.linalg.solve(self.gram, dv.T @ y)


# --------------------------------------------------------------------------
# per-scenario backward solve

@dataclass
class AdjointFit:
    """Adjoint solution under one scenario.

    Realization grids ``p`` (n_paths, n_steps+1) and ``q`` (n_paths,
    n_steps) live on that scenario's paths; the fitted value functions are
    kept as per-step coefficients so they can be re-evaluated on any state
    (clamped to the per-step fitted range).
    """

    scenario_label: str
    coordinate: str
    n_steps: int
    g_prime: object
    step_bases: list
    pcoef: list
    qcoef: list
    r2: np.ndarray
    cond: np.ndarray
    p: np.ndarray = None
    q: np.ndarray = None

    def _xi(self, x_nodes):
        x_nodes = np.asarray(x_nodes, dtype=float)
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            if self.coordinate == "log":
                return np.log(x_nodes)
            if self.coordinate == "gprime":
                return np.asarray(self.g_prime(x_nodes), dtype=float)
        return x_nodes

    def eval_p(self, k, x_nodes):
        """Fitted p value-function at step k on arbitrary states."""
        if k == self.n_steps:
            return np.asarray(self.g_prime(np.asarray(x_nodes, dtype=float)),
                              dtype=float)
        sb = self.step_bases[k]
        return sb.design(self._xi(x_nodes), clamp=True) @ self.pcoef[k]

    def eval_q(self, k, x_nodes):
        sb = self.step_bases[k]
        return sb.design(self._xi(x_nodes), clamp=True) @ self.qcoef[k]

    def light(self):
        """Copy without the per-path realization grids."""
        out = copy.copy(self)
        out.p = None
        out.q = None
        return out


def _coordinate_grid(problem, coordinate, x):
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        if coordinate == "log":
            return np.log(x)
        if coordinate == "gprime":
            return np.asarray(problem.g_prime(x), dtype=float)
    return x


def solve_adjoint_under(problem, control, scenario, paths, state, basis=None,
                        cond_limit=1e12, train_paths=None, train_state=None):
    """Backward regression solve of the adjoint equation under one scenario.

    p(T) = g'(X(T)) exactly; then for each step, q is the regression of the
    (conditionally centered) product p_{k+1} dB_k / (theta_k^2 dt) on the
    basis.  The Hamiltonian x-gradient is linear in (p, q), so its q-part
    (coefficient sigma_x * qv) is absorbed into the conditional mean by an
    exponential-martingale tilt of the transition weights; the p-recursion
    then never feeds on the fitted q.  (The naive form
    p_k = Reg[p_{k+1}] + dH/dx(p, q) dt is first-order equivalent but
    amplifies the (p, q) fit-noise mismatch by exp(int b_x + mu_x qv) over
    the horizon, which wrecks multiplicative problems.)

    Two de-biasing devices keep the fitted value functions centered:
    regressions alternate between disjoint path halves across steps, and a
    separate training bundle (``train_paths``/``train_state``, same
    scenario, different seed) may be supplied so the returned realization
    grids on ``paths`` never reuse the regression sample.  Both remove
    O(1/n_paths) look-ahead bias that otherwise compounds backward.
    """
    basis = basis or BasisSpec()
    coordinate, degree = basis.resolve(problem)
    tp = paths if train_paths is None else train_paths
    ts = state if train_state is None else train_state
    grid = paths.grid
    if tp.grid != grid:
        raise ValueError("training bundle must share the evaluation grid")
    n, dt, nodes = grid.n_steps, grid.dt, grid.nodes
    spec = BasisSpec(degree=degree, coordinate=coordinate,
                     features=basis.features)

    x_t, u_t = ts.x, ts.u
    idx = np.flatnonzero(ts.valid)
    if idx.size < 4 * (degree + 2):
        raise ValueError("too few valid training paths for the regression")
    halves = (idx[0::2], idx[1::2])

    step_bases = [None] * n
    pcoef = [None] * n
    qcoef = [None] * n
    r2 = np.empty(n)
    cond = np.empty(n)

    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        xi_train = _coordinate_grid(problem, coordinate, x_t)
        p_run = np.asarray(problem.g_prime(x_t[:, n]), dtype=float).copy()
        for k in range(n - 1, -1, -1):
            t = nodes[k]
            rows = halves[k % 2]
            rows_o = halves[(k + 1) % 2]
            xi = xi_train[:, k]
            sb = _StepBasis(spec, xi[rows], cond_limit, when=f" at t={t:g}")
            d_rows = sb.design(xi[rows])
            d_other = sb.design(xi[rows_o], clamp=True)

            xk, uk = x_t[:, k], u_t[:, k]
            db = tp.b[:, k + 1] - tp.b[:, k]
            v2 = tp.theta_sq[:, k]
            th = np.sqrt(v2)

            # conditional-mean fit from the opposite half: centers the
            # covariance target without reusing this half's noise
            g_other = d_other.T @ d_other
            beta_m = np.linalg.solve(g_other, d_other.T @ p_run[rows_o])
            m_rows = d_rows @ beta_m
            resid = p_run[rows] - m_rows
            yq = resid * db[rows] / (v2[rows] * dt)
            beta_q = sb.solve(d_rows, yq)

            # dH/dx = f_x + A p + C q with A = b_x + mu_x qv, C = sigma_x qv;
            # C q dt is the drift p_{k+1} picks up under the tilted kernel
            # exp((C/theta) dW - (C/theta)^2 dt / 2)
            a_lin = (_dcoef(problem, "b", "x", t, xk, uk)
                     + _dcoef(problem, "mu", "x", t, xk, uk) * v2)
            c_lin = _dcoef(problem, "sigma", "x", t, xk, uk) * v2
            kernel = c_lin / th
            lam = np.exp(kernel * (db / th) - 0.5 * kernel ** 2 * dt)
            beta_w = sb.solve(d_rows, (lam * p_run)[rows])

            d_train = sb.design(xi, clamp=True)
            w_fit = d_train @ beta_w
            f_x = _dcoef(problem, "f", "x", t, xk, uk)
            p_run = w_fit * np.exp(a_lin * dt) + f_x * dt

            pcoef[k] = sb.solve(d_rows, p_run[rows])
            qcoef[k] = beta_q
            step_bases[k] = sb

            sst = float(((p_run[rows] - p_run[rows].mean()) ** 2).sum())
            ssr = float(((p_run[rows] - d_rows @ pcoef[k]) ** 2).sum())
            r2[k] = 1.0 - ssr / sst if sst > 0 else 1.0
            cond[k] = sb.cond

    fit = AdjointFit(
        scenario_label=scenario.label, coordinate=coordinate, n_steps=n,
        g_prime=problem.g_prime, step_bases=step_bases, pcoef=pcoef,
        qcoef=qcoef, r2=r2, cond=cond,
    )

    # realization grids on the evaluation paths
    n_paths = paths.n_paths
    p = np.empty((n_paths, n + 1))
    q = np.empty((n_paths, n))
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        p[:, n] = problem.g_prime(state.x[:, n])
        for k in range(n):
            p[:, k] = fit.eval_p(k, state.x[:, k])
            q[:, k] = fit.eval_q(k, state.x[:, k])
    fit.p = p
    fit.q = q
    return fit


# --------------------------------------------------------------------------
# worst-case aggregation and the K residual

@dataclass
class AdjointSolution:
    """Aggregated adjoint solution over a scenario family.

    p_G is the pointwise maximum of the member value functions; q_G follows
    the member attaining the maximum.  ``khat`` is the cumulative drift
    residual of p_G along the reference scenario (mean over paths, with a
    pointwise standard error); its monotonicity is reported, not enforced.
    """

    fits: list
    labels: list
    reference_index: int
    khat: np.ndarray
    khat_se: np.ndarray
    khat_n_increase: int
    khat_max_increase: float
    comparison_violations: int
    comparison_nodes: int
    argmax_share: np.ndarray
    reference_bundle: object = None
    reference_state: object = None
    reference_fit: object = None

    def eval_pg(self, k, x_nodes):
        vals = np.stack([f.eval_p(k, x_nodes) for f in self.fits])
        return vals.max(axis=0)

    def eval_pg_argmax(self, k, x_nodes):
        vals = np.stack([f.eval_p(k, x_nodes) for f in self.fits])
        return vals.max(axis=0), vals.argmax(axis=0)

    def eval_qg(self, k, x_nodes):
        _, arg = self.eval_pg_argmax(k, x_nodes)
        qs = np.stack([f.eval_q(k, x_nodes) for f in self.fits])
        return np.take_along_axis(qs, arg[None, :], axis=0)[0]

    @property
    def comparison_violation_fraction(self):
        if self.comparison_nodes == 0:
            return 0.0
        return self.comparison_violations / self.comparison_nodes


def aggregate_gbsde(problem, control, fits, reference_index, ref_paths,
                    ref_state, comparison_tol=1e-8):
    """Aggregate per-scenario fits into the worst-case solution.

    Markovian problems only: the per-scenario fits are value functions of
    (t, state), so a control that reads the whole path is refused.
    """
    if control.kind in ("path_rule", "composite"):
        raise UnsupportedModeError(
            "aggregation needs a Markovian control (open_loop or feedback); "
            f"got kind={control.kind!r}; use the per-scenario solutions"
        )
    grid = ref_paths.grid
    n, dt, nodes = grid.n_steps, grid.dt, grid.nodes
    x, u, valid = ref_state.x, ref_state.u, ref_state.valid
    nv = int(valid.sum())
    m = len(fits)

    khat = np.zeros(n + 1)
    khat_se = np.zeros(n + 1)
    cum = np.zeros(ref_paths.n_paths)
    violations = 0
    nodes_count = 0
    argmax_share = np.zeros(m)

    def member_eval(k):
        return np.stack([f.eval_p(k, x[:, k]) for f in fits])

    vals = member_eval(0)
    p_g = vals.max(axis=0)
    arg = vals.argmax(axis=0)
    with np.errstate(invalid="ignore", over="ignore"):
        for k in range(n):
            violations += int((vals[:, valid] > p_g[valid] + comparison_tol).sum())
            nodes_count += m * nv
            argmax_share += np.bincount(arg[valid], minlength=m)

            qs = np.stack([f.eval_q(k, x[:, k]) for f in fits])
            q_g = np.take_along_axis(qs, arg[None, :], axis=0)[0]

            vals_next = member_eval(k + 1)
            p_g_next = vals_next.max(axis=0)
            arg_next = vals_next.argmax(axis=0)

            t = nodes[k]
            v2 = ref_paths.theta_sq[:, k]
            db = ref_paths.b[:, k + 1] - ref_paths.b[:, k]
            hx = dH_dx(problem, t, x[:, k], u[:, k], p_g, q_g, v2)
            dk = p_g_next - p_g + hx * dt - q_g * db
            cum += np.where(valid, dk, 0.0)
            khat[k + 1] = cum[valid].mean()
            khat_se[k + 1] = cum[valid].std(ddof=1) / math.sqrt(nv)

            vals, p_g, arg = vals_next, p_g_next, arg_next

    inc = np.diff(khat)
    pos = inc > 0
    return AdjointSolution(
        fits=fits, labels=[f.scenario_label for f in fits],
        reference_index=reference_index, khat=khat, khat_se=khat_se,
        khat_n_increase=int(pos.sum()),
        khat_max_increase=float(inc[pos].max()) if pos.any() else 0.0,
        comparison_violations=violations, comparison_nodes=nodes_count,
        argmax_share=argmax_share / max(1, nodes_count // m),
    )


# offset deriving the regression-training seed from the run seed
TRAIN_SEED_OFFSET = 7654321


def solve_adjoint_family(problem, control, family, grid, seed, n_paths,
                         basis=None, reference=0, train_seed=None):
    """Solve the adjoint equation under every family member and aggregate.

    Members are processed one at a time (bounded memory); all members share
    the increment stream of ``seed`` for their evaluation paths and of a
    derived training seed for the regressions, so fitted value functions
    are independent of the paths they are evaluated on.  The reference
    member keeps its bundle, state and realization grids for downstream
    checks.
    """
    if not (0 <= reference < len(family)):
        raise ValueError("reference index out of range")
    if train_seed is None:
        train_seed = int(seed) + TRAIN_SEED_OFFSET
    fits = []
    ref_bundle = ref_state = ref_fit = None
    for i, sc in enumerate(family):
        bundle = simulate_driver(sc, grid, seed, n_paths)
        state = simulate_state(problem, control, bundle)
        tb = simulate_driver(sc, grid, train_seed, n_paths)
        tst = simulate_state(problem, control, tb)
        fit = solve_adjoint_under(problem, control, sc, bundle, state, basis,
                                  train_paths=tb, train_state=tst)
        del tb, tst
        if i == reference:
            ref_bundle, ref_state, ref_fit = bundle, state, fit
        fits.append(fit.light())
    solution = aggregate_gbsde(problem, control, fits, reference,
                               ref_bundle, ref_state)
    solution.reference_bundle = ref_bundle
    solution.reference_state = ref_state
    solution.reference_fit = ref_fit
    return solution
