"""Built-in control problems with closed-form candidates and oracles.

Four log-utility/consumption problems plus the power-utility problem whose
candidate control is only worst-case optimal.  Each builder returns the
wired ControlProblem, the closed-form candidate control and a dictionary of
oracle functions (value under a constant scenario, adjoint closed forms,
residual-drift coefficient) used by the verification tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .control import ControlProblem, open_loop
from .errors import UnsupportedModeError
from .scenario import ConstantRule, ScenarioProcess, VolatilityBounds

BUILTIN_IDS = ("example1", "example2", "example3", "example3_general",
               "counterexample")


@dataclass(frozen=True)
class BuiltinBundle:
    problem: ControlProblem
    u_hat: object
    oracles: dict


def _as_fn(v):
    if callable(v):
        return v
    c = float(v)
    return lambda t, _c=c: _c


def _check_nonzero(fn, horizon, what):
    ts = np.linspace(0.0, horizon, 257)
    vals = np.array([fn(t) for t in ts], dtype=float)
    if np.any(vals == 0.0):
        raise ValueError(f"{what} must be nonzero on [0, T]")


def _ones(x):
    return np.ones_like(np.asarray(x, dtype=float))


def _zero3(t, x, u):
    return 0.0


def _integral(fn, a, b, n=4097):
    ts = np.linspace(a, b, n)
    return float(np.trapz([fn(t) for t in ts], ts))


def example1(x0=1.0, T=1.0, bounds=None, delta=0.0,
             u_min=0.05, u_max=20.0):
    """Consumption from a noise-driven account, log reward on consumption."""
    bounds = bounds or VolatilityBounds()
    problem = ControlProblem(
        name="example1",
        b=lambda t, x, u: -u,
        mu=_zero3,
        sigma=lambda t, x, u: _ones(x),
        f=lambda t, x, u: np.log(u),
        g=lambda x: np.asarray(x, dtype=float),
        g_prime=_ones,
        u_min=u_min, u_max=u_max, x0=x0, horizon=T, bounds=bounds,
        delta=delta,
        partials={
            "db_dx": _zero3, "db_du": lambda t, x, u: -_ones(u),
            "dmu_dx": _zero3, "dmu_du": _zero3,
            "dsigma_dx": _zero3, "dsigma_du": _zero3,
            "df_dx": _zero3, "df_du": lambda t, x, u: 1.0 / u,
        },
    )
    u_hat = open_loop(1.0, label="c=1")
    oracles = {
        "value": lambda theta_sq: x0 - T,
        "p": lambda t, x: _ones(x),
        "q_over_p": lambda t: 0.0,
        "u_hat_fn": lambda t: 1.0,
    }
    return BuiltinBundle(problem, u_hat, oracles)


def example2(r=0.5, x0=1.0, T=1.0, bounds=None, delta=0.0,
             u_min=0.05, u_max=20.0, b_fn=None):
    """Consumption from a geometric account with drift b(t)."""
    bounds = bounds or VolatilityBounds()
    if b_fn is None:
        rr = float(r)
        b_t = lambda t: rr
        big_i = lambda t: rr * t
    else:
        b_t = b_fn
        sol = solve_ivp(lambda t, y: [b_t(t)], (0.0, T), [0.0],
                        rtol=1e-10, atol=1e-12, dense_output=True)
        big_i = lambda t: float(sol.sol(t)[0])
    i_T = big_i(T)
    c_hat = lambda t: math.exp(big_i(t) - i_T)
    p_fn = lambda t: math.exp(i_T - big_i(t))

    problem = ControlProblem(
        name="example2",
        b=lambda t, x, u: b_t(t) * x - u,
        mu=_zero3,
        sigma=lambda t, x, u: np.asarray(x, dtype=float),
        f=lambda t, x, u: np.log(u),
        g=lambda x: np.asarray(x, dtype=float),
        g_prime=_ones,
        u_min=u_min, u_max=u_max, x0=x0, horizon=T, bounds=bounds,
        delta=delta,
        partials={
            "db_dx": lambda t, x, u: b_t(t) * _ones(x),
            "db_du": lambda t, x, u: -_ones(u),
            "dmu_dx": _zero3, "dmu_du": _zero3,
            "dsigma_dx": lambda t, x, u: _ones(x), "dsigma_du": _zero3,
            "df_dx": _zero3, "df_du": lambda t, x, u: 1.0 / u,
        },
    )
    u_hat = open_loop(c_hat, label="c=exp(-int_t^T b)")

    def value(theta_sq=None):
        # deterministic ODE for the mean state plus the running log reward;
        # the driver is a martingale so the value has no scenario dependence
        def rhs(t, y):
            c = c_hat(t)
            return [b_t(t) * y[0] - c, math.log(c)]

        sol = solve_ivp(rhs, (0.0, T), [x0, 0.0], rtol=1e-8, atol=1e-8)
        return float(sol.y[0, -1] + sol.y[1, -1])

    oracles = {
        "value": value,
        "p": lambda t, x: p_fn(t) * _ones(x),
        "p_t": p_fn,
        "q_over_p": lambda t: 0.0,
        "u_hat_fn": c_hat,
    }
    return BuiltinBundle(problem, u_hat, oracles)


def _merton_dynamics(m_fn, s_fn, b_fn=None):
    """Coefficient pack for geometric dynamics x*u*(b dt + m dQV + s dB)."""
    kw = dict(
        mu=lambda t, x, u: np.asarray(x, dtype=float) * u * m_fn(t),
        sigma=lambda t, x, u: np.asarray(x, dtype=float) * u * s_fn(t),
        multiplicative=True,
        mult_qv_drift=lambda t, u: u * m_fn(t),
        mult_vol=lambda t, u: u * s_fn(t),
    )
    partials = {
        "dmu_dx": lambda t, x, u: u * m_fn(t) * _ones(x),
        "dmu_du": lambda t, x, u: np.asarray(x, dtype=float) * m_fn(t),
        "dsigma_dx": lambda t, x, u: u * s_fn(t) * _ones(x),
        "dsigma_du": lambda t, x, u: np.asarray(x, dtype=float) * s_fn(t),
    }
    mult_partials = {
        "mult_qv_drift_du": lambda t, u: m_fn(t) * _ones(u),
        "mult_vol_du": lambda t, u: s_fn(t) * _ones(u),
    }
    if b_fn is None:
        kw["b"] = _zero3
        partials["db_dx"] = _zero3
        partials["db_du"] = _zero3
    else:
        kw["b"] = lambda t, x, u: np.asarray(x, dtype=float) * u * b_fn(t)
        kw["mult_drift"] = lambda t, u: u * b_fn(t)
        partials["db_dx"] = lambda t, x, u: u * b_fn(t) * _ones(x)
        partials["db_du"] = lambda t, x, u: np.asarray(x, dtype=float) * b_fn(t)
        mult_partials["mult_drift_du"] = lambda t, u: b_fn(t) * _ones(u)
    return kw, partials, mult_partials


def example3(m=1.0, s=1.0, x0=1.0, T=1.0, bounds=None, delta=0.0,
             u_min=-10.0, u_max=10.0):
    """Log-utility investment fraction in a geometric risky account."""
    bounds = bounds or VolatilityBounds()
    m_fn, s_fn = _as_fn(m), _as_fn(s)
    _check_nonzero(s_fn, T, "volatility loading s(t)")
    kw, partials, mp = _merton_dynamics(m_fn, s_fn)
    problem = ControlProblem(
        name="example3",
        f=None,
        g=lambda x: np.log(x),
        g_prime=lambda x: 1.0 / np.asarray(x, dtype=float),
        u_min=u_min, u_max=u_max, x0=x0, horizon=T, bounds=bounds,
        delta=delta, partials=partials, mult_partials=mp, **kw,
    )
    u_hat = open_loop(lambda t: m_fn(t) / s_fn(t) ** 2, label="u=m/s^2")

    def value(theta_sq):
        rate = _integral(lambda t: m_fn(t) ** 2 / (2.0 * s_fn(t) ** 2), 0.0, T)
        return math.log(x0) + rate * float(theta_sq)

    oracles = {
        "value": value,
        "p": lambda t, x: 1.0 / np.asarray(x, dtype=float),
        "q_over_p": lambda t: -m_fn(t) / s_fn(t),
        "u_hat_fn": lambda t: m_fn(t) / s_fn(t) ** 2,
    }
    return BuiltinBundle(problem, u_hat, oracles)


def example3_general(b=0.5, m=1.0, s=1.0, x0=1.0, T=1.0, bounds=None,
                     delta=0.0, u_min=-10.0, u_max=10.0):
    """Geometric dynamics with an extra dt drift.

    The per-scenario maximizer u = (b + m*theta^2)/(s^2*theta^2) depends on
    the scenario, so no single candidate is returned as robust: the bundle
    exposes a per-scenario ``candidate`` factory instead (the default
    ``u_hat`` is the candidate of the upper band endpoint).
    """
    bounds = bounds or VolatilityBounds()
    b_fn, m_fn, s_fn = _as_fn(b), _as_fn(m), _as_fn(s)
    _check_nonzero(s_fn, T, "volatility loading s(t)")
    kw, partials, mp = _merton_dynamics(m_fn, s_fn, b_fn)
    problem = ControlProblem(
        name="example3_general",
        f=None,
        g=lambda x: np.log(x),
        g_prime=lambda x: 1.0 / np.asarray(x, dtype=float),
        u_min=u_min, u_max=u_max, x0=x0, horizon=T, bounds=bounds,
        delta=delta, partials=partials, mult_partials=mp, **kw,
    )

    def candidate(theta_sq):
        v2 = float(theta_sq)
        return open_loop(
            lambda t: (b_fn(t) + m_fn(t) * v2) / (s_fn(t) ** 2 * v2),
            label=f"u=(b+m*{v2:g})/(s^2*{v2:g})",
        )

    def value_at(u_const, theta_sq):
        v2 = float(theta_sq)
        uu = float(u_const)
        rate = _integral(
            lambda t: (b_fn(t) * uu + m_fn(t) * uu * v2
                       - 0.5 * s_fn(t) ** 2 * uu ** 2 * v2), 0.0, T)
        return math.log(x0) + rate

    def value(theta_sq):
        v2 = float(theta_sq)
        rate = _integral(
            lambda t: (b_fn(t) + m_fn(t) * v2) ** 2
            / (2.0 * s_fn(t) ** 2 * v2), 0.0, T)
        return math.log(x0) + rate

    oracles = {
        "value": value,
        "value_at": value_at,
        "candidate": candidate,
    }
    return BuiltinBundle(problem, candidate(bounds.sigma_high_sq), oracles)


def counterexample(alpha=0.5, m=1.0, s=1.0, x0=1.0, T=1.0, bounds=None,
                   delta=0.0, u_min=-10.0, u_max=10.0):
    """Power utility on geometric dynamics.

    The candidate maximizes the worst-case value but is not optimal under
    every scenario; its aggregated adjoint solution has a nonvanishing
    residual process with drift coefficient ``khat_coeff``.
    """
    bounds = bounds or VolatilityBounds()
    alpha = float(alpha)
    if not (0.0 < alpha < 1.0):
        raise ValueError("power exponent alpha must lie in (0, 1)")
    m_fn, s_fn = _as_fn(m), _as_fn(s)
    _check_nonzero(s_fn, T, "volatility loading s(t)")
    kw, partials, mp = _merton_dynamics(m_fn, s_fn)
    problem = ControlProblem(
        name="counterexample",
        f=None,
        g=lambda x: np.asarray(x, dtype=float) ** alpha / alpha,
        g_prime=lambda x: np.asarray(x, dtype=float) ** (alpha - 1.0),
        u_min=u_min, u_max=u_max, x0=x0, horizon=T, bounds=bounds,
        delta=delta, partials=partials, mult_partials=mp, **kw,
    )
    u_fn = lambda t: m_fn(t) / ((1.0 - alpha) * s_fn(t) ** 2)
    u_hat = open_loop(u_fn, label="u=m/((1-a)s^2)")

    khat_coeff = lambda t: (alpha * m_fn(t) ** 2
                            / (2.0 * (1.0 - alpha) * s_fn(t) ** 2))

    def value(theta_sq):
        v2 = float(theta_sq)
        rate = _integral(
            lambda t: (alpha * m_fn(t) * u_fn(t)
                       + 0.5 * (alpha ** 2 - alpha) * s_fn(t) ** 2
                       * u_fn(t) ** 2), 0.0, T)
        return x0 ** alpha / alpha * math.exp(rate * v2)

    def p_oracle(t, x):
        tail = _integral(khat_coeff, float(t), T, n=1025) * bounds.sigma_high_sq
        return np.asarray(x, dtype=float) ** (alpha - 1.0) * math.exp(tail)

    oracles = {
        "value": value,
        "p": p_oracle,
        "q_over_p": lambda t: -m_fn(t) / s_fn(t),
        "khat_coeff": khat_coeff,
        "u_hat_fn": u_fn,
    }
    return BuiltinBundle(problem, u_hat, oracles)


_BUILDERS = {
    "example1": example1,
    "example2": example2,
    "example3": example3,
    "example3_general": example3_general,
    "counterexample": counterexample,
}


def builtin(problem_id, **params):
    """Build a named problem: (ControlProblem, candidate control, oracles)."""
    if problem_id not in _BUILDERS:
        raise ValueError(
            f"unknown problem id {problem_id!r}; known: {', '.join(BUILTIN_IDS)}"
        )
    return _BUILDERS[problem_id](**params)


def value_oracle(problem_id, params, theta):
    """Closed-form value of the built-in candidate under a constant scenario.

    ``theta`` is the constant volatility (or a constant ScenarioProcess);
    non-constant scenarios have no closed form here.
    """
    if isinstance(theta, ScenarioProcess):
        if not isinstance(theta.rule, ConstantRule):
            raise UnsupportedModeError(
                "value oracle is defined for constant scenarios only"
            )
        theta_sq = theta.rule.theta_sq
    else:
        theta_sq = float(theta) ** 2
    bundle = builtin(problem_id, **(params or {}))
    return bundle.oracles["value"](theta_sq)


def random_problem(seed, u_min=-2.0, u_max=2.0, T=1.0, x0=1.0, bounds=None):
    """Randomized smooth coefficient problem (test support).

    Bounded, Lipschitz coefficients with analytic partials: drift and
    volatility affine in u with tanh state feedback, concave quadratic
    rewards.  Returns (problem, interior candidate control).
    """
    rng = np.random.default_rng(seed)
    bounds = bounds or VolatilityBounds()
    b0, b1, b2 = rng.uniform(-0.5, 0.5, 3)
    m0, m1, m2 = rng.uniform(-0.3, 0.3, 3)
    s0 = rng.uniform(0.5, 1.0)
    s1, s2 = rng.uniform(-0.3, 0.3, 2)
    f1 = rng.uniform(-0.5, 0.5)
    f2 = rng.uniform(0.1, 0.5)
    f3 = rng.uniform(-0.5, 0.5)
    g1 = rng.uniform(0.5, 1.5)
    g2 = rng.uniform(0.0, 0.3)
    u0 = float(rng.uniform(-0.5, 0.5))

    th = np.tanh
    dth = lambda x: 1.0 - np.tanh(x) ** 2
    problem = ControlProblem(
        name=f"random{seed}",
        b=lambda t, x, u: b0 + b1 * th(x) + b2 * u,
        mu=lambda t, x, u: m0 + m1 * th(x) + m2 * u,
        sigma=lambda t, x, u: s0 + s1 * th(x) + s2 * u,
        f=lambda t, x, u: f1 * u - f2 * u ** 2 + f3 * th(x),
        g=lambda x: g1 * x - g2 * np.asarray(x, dtype=float) ** 2,
        g_prime=lambda x: g1 - 2.0 * g2 * np.asarray(x, dtype=float),
        u_min=u_min, u_max=u_max, x0=x0, horizon=T, bounds=bounds,
        partials={
            "db_dx": lambda t, x, u: b1 * dth(x),
            "db_du": lambda t, x, u: b2 * _ones(u),
            "dmu_dx": lambda t, x, u: m1 * dth(x),
            "dmu_du": lambda t, x, u: m2 * _ones(u),
            "dsigma_dx": lambda t, x, u: s1 * dth(x),
            "dsigma_du": lambda t, x, u: s2 * _ones(u),
            "df_dx": lambda t, x, u: f3 * dth(x),
            "df_du": lambda t, x, u: f1 - 2.0 * f2 * u,
        },
    )
    return problem, open_loop(u0, label=f"u={u0:.3f}"), rng
