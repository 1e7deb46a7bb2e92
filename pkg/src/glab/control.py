"""Controlled-dynamics descriptions and control policies.

A ControlProblem bundles the coefficient functions of the state equation

    dX = b(t,X,u) dt + mu(t,X,u) dQV + sigma(t,X,u) dB,

the reward pieces f (running) and g (terminal, with derivative g'), the
admissible control interval U, the information delay and the volatility
band.  Problems with multiplicative (geometric) dynamics additionally carry
the per-unit-state factor functions so the state can be simulated in log
coordinates.

Controls are open-loop (deterministic in t), state-feedback, or general
path rules; emitted values are clipped into U and any state/path access is
delayed by the problem's information lag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# step for one-dimensional central differences on coefficients
def _fd_step(v):
    return np.maximum(1e-6, 1e-6 * np.abs(v))


@dataclass(frozen=True)
class ControlProblem:
    """Coefficients, rewards and constraints of one control problem.

    ``b``, ``mu``, ``sigma`` and ``f`` take (t, x, u) with array x, u and
    must broadcast; ``f=None`` means no running reward.  Analytic partial
    derivatives are optional; missing ones fall back to central finite
    differences.  ``multiplicative=True`` requires the ``mult_*`` factor
    functions (t, u) -> per-unit-x coefficient and switches the simulator
    to log coordinates (initial state must then be positive).
    """

    name: str
    b: object
    mu: object
    sigma: object
    f: object
    g: object
    g_prime: object
    u_min: float
    u_max: float
    x0: float
    horizon: float
    bounds: object
    delta: float = 0.0
    multiplicative: bool = False
    mult_drift: object = None
    mult_qv_drift: object = None
    mult_vol: object = None
    partials: dict = field(default_factory=dict)
    mult_partials: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.u_min > self.u_max:
            raise ValueError("empty control interval")
        if self.delta < 0:
            raise ValueError("information delay must be >= 0")
        if self.multiplicative:
            if self.x0 <= 0:
                raise ValueError("multiplicative dynamics need x0 > 0")
            for nm in ("mult_qv_drift", "mult_vol"):
                if getattr(self, nm) is None:
                    raise ValueError(f"multiplicative problem lacks {nm}")

    def clip_u(self, u):
        return np.clip(u, self.u_min, self.u_max)

    def _coef(self, name):
        fn = getattr(self, name)
        if fn is None:
            return lambda t, x, u: 0.0
        return fn

    def dx(self, name, t, x, u):
        """d(coefficient)/dx, analytic if supplied else central difference."""
        key = f"d{name}_dx"
        if key in self.partials:
            return self.partials[key](t, x, u)
        fn = self._coef(name)
        h = _fd_step(x)
        return (fn(t, x + h, u) - fn(t, x - h, u)) / (2.0 * h)

    def du(self, name, t, x, u):
        """d(coefficient)/du; one-sided at the boundary of U."""
        key = f"d{name}_du"
        if key in self.partials:
            return self.partials[key](t, x, u)
        fn = self._coef(name)
        h = _fd_step(u)
        up = np.minimum(np.asarray(u, dtype=float) + h, self.u_max)
        dn = np.maximum(np.asarray(u, dtype=float) - h, self.u_min)
        span = up - dn
        span = np.where(span == 0.0, 1.0, span)
        return (fn(t, x, up) - fn(t, x, dn)) / span

    def mult_du(self, name, t, u):
        """u-partial of a multiplicative factor function."""
        key = f"{name}_du"
        if key in self.mult_partials:
            return self.mult_partials[key](t, u)
        fn = getattr(self, name)
        if fn is None:
            return 0.0
        h = _fd_step(u)
        up = np.minimum(np.asarray(u, dtype=float) + h, self.u_max)
        dn = np.maximum(np.asarray(u, dtype=float) - h, self.u_min)
        span = up - dn
        span = np.where(span == 0.0, 1.0, span)
        return (fn(t, up) - fn(t, dn)) / span


def delayed_index(t, delta, grid):
    """Grid index of (t - delta)+ rounded down to a node."""
    td = max(0.0, t - delta)
    return min(int(math.floor(td / grid.dt + 1e-9)), grid.n_steps)


@dataclass(frozen=True)
class Control:
    """A control policy.

    kind: "open_loop" (t -> u), "feedback" ((t, delayed state) -> u) or
    "path_rule" ((t, delayed index, path bundle) -> u).  ``raw`` returns
    unclipped per-path values; ``evaluate`` clips into U.
    """

    kind: str
    label: str
    fn: object
    params: tuple = ()

    @property
    def is_deterministic(self):
        return self.kind == "open_loop"

    def raw(self, t, k, problem, grid, bundle, x_hist):
        n_paths = x_hist.shape[0]
        if self.kind == "open_loop":
            v = self.fn(t)
        elif self.kind == "feedback":
            j = delayed_index(t, problem.delta, grid)
            j = min(j, x_hist.shape[1] - 1)
            v = self.fn(t, x_hist[:, j])
        elif self.kind == "path_rule":
            j = delayed_index(t, problem.delta, grid)
            v = self.fn(t, j, bundle)
        else:  # composite, built by perturb()
            v = self.fn(t, k, problem, grid, bundle, x_hist)
        v = np.asarray(v, dtype=float)
        if v.ndim == 0:
            return np.full(n_paths, float(v))
        return np.broadcast_to(v, (n_paths,))

    def evaluate(self, t, k, problem, grid, bundle, x_hist):
        return problem.clip_u(self.raw(t, k, problem, grid, bundle, x_hist))


def open_loop(fn_or_value, label=None, params=()):
    if callable(fn_or_value):
        fn = fn_or_value
        label = label or "open_loop"
    else:
        c = float(fn_or_value)
        fn = lambda t, _c=c: _c
        label = label or f"u={c:g}"
    return Control(kind="open_loop", label=label, fn=fn, params=params)


def feedback_rule(fn, label="feedback", params=()):
    return Control(kind="feedback", label=label, fn=fn, params=params)


def path_rule(fn, label="path_rule", params=()):
    return Control(kind="path_rule", label=label, fn=fn, params=params)


_KIND_ORDER = {"open_loop": 0, "feedback": 1, "path_rule": 2, "composite": 2}


def perturb(base, beta, a, label=None):
    """Control u = base + a*beta (clipped into U when evaluated)."""

    def fn(t, k, problem, grid, bundle, x_hist):
        u0 = base.raw(t, k, problem, grid, bundle, x_hist)
        db = beta.raw(t, k, problem, grid, bundle, x_hist)
        return u0 + a * db

    kind = max(base.kind, beta.kind, key=lambda s: _KIND_ORDER[s])
    if kind == "open_loop":
        # sum of deterministic rules is deterministic
        out_kind = "open_loop"
        out_fn = lambda t: base.fn(t) + a * beta.fn(t)
    else:
        out_kind = "composite"
        out_fn = fn
    return Control(
        kind=out_kind,
        label=label or f"{base.label}{a:+g}*{beta.label}",
        fn=out_fn,
        params=base.params + (a,),
    )
