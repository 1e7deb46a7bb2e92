"""Volatility-uncertainty band, the sublinear G-function and scenario families.

A scenario is an adapted volatility path theta(t) whose square stays inside
a fixed variance band [sigma_low_sq, sigma_high_sq].  Each scenario stands
for one probability model in which the quadratic variation of the driving
noise has density theta(t)^2.  A finite family of scenarios discretizes the
(uncountable) model set; the worst case over the family approximates the
sublinear expectation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ScenarioBoundsError

# Relative slack for the emitted-value band check; only guards against
# float round-trip noise (sqrt/square), not against real violations.
_BAND_RTOL = 1e-12


@dataclass(frozen=True)
class VolatilityBounds:
    """Variance-rate band: 0 < sigma_low_sq <= sigma_high_sq (units 1/time).

    The default upper bound 1.0 matches the normalization used by the
    built-in problems; the lower bound must be strictly positive so the
    G-function is non-degenerate.
    """

    sigma_low_sq: float = 0.25
    sigma_high_sq: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.sigma_low_sq <= self.sigma_high_sq):
            raise ValueError(
                "need 0 < sigma_low_sq <= sigma_high_sq, got "
                f"({self.sigma_low_sq}, {self.sigma_high_sq})"
            )

    @property
    def sigma_low(self):
        return math.sqrt(self.sigma_low_sq)

    @property
    def sigma_high(self):
        return math.sqrt(self.sigma_high_sq)

    def contains_sq(self, theta_sq):
        """Band membership for (arrays of) squared volatilities."""
        v = np.asarray(theta_sq, dtype=float)
        lo = self.sigma_low_sq * (1.0 - _BAND_RTOL)
        hi = self.sigma_high_sq * (1.0 + _BAND_RTOL)
        return (v >= lo) & (v <= hi)


def g_function(a, bounds):
    """Sublinear generator 0.5*(sigma_high_sq*a+ - sigma_low_sq*a-).

    Positively homogeneous and monotone; ``a`` may be a scalar or array.
    """
    a = np.asarray(a, dtype=float)
    pos = np.maximum(a, 0.0)
    neg = np.maximum(-a, 0.0)
    out = 0.5 * (bounds.sigma_high_sq * pos - bounds.sigma_low_sq * neg)
    return out if out.ndim else float(out)


class ConstantRule:
    """theta identically equal to one in-band value."""

    def __init__(self, theta=None, theta_sq=None):
        if (theta is None) == (theta_sq is None):
            raise ValueError("give exactly one of theta, theta_sq")
        self.theta_sq = float(theta_sq) if theta_sq is not None else float(theta) ** 2
        self.adapted = False

    def theta_sq_step(self, k, t, w_hist, b_hist, grid, n_paths):
        return np.full(n_paths, self.theta_sq)

    def describe(self):
        return f"const(theta2={self.theta_sq:g})"


class StepRule:
    """Deterministic step function t -> theta (evaluated at grid nodes)."""

    def __init__(self, fn):
        self.fn = fn
        self.adapted = False

    def theta_sq_step(self, k, t, w_hist, b_hist, grid, n_paths):
        return np.full(n_paths, float(self.fn(t)) ** 2)

    def describe(self):
        return "step(t->theta)"


class AdaptedRule:
    """Adapted switching rule; ``fn(k, t, w_hist, b_hist, grid)`` returns
    per-path theta^2 values and may only read history up to index k."""

    def __init__(self, fn, label="adapted"):
        self.fn = fn
        self.label = label
        self.adapted = True

    def theta_sq_step(self, k, t, w_hist, b_hist, grid, n_paths):
        v = np.asarray(self.fn(k, t, w_hist, b_hist, grid), dtype=float)
        return np.broadcast_to(v, (n_paths,))

    def describe(self):
        return self.label


@dataclass(frozen=True)
class ScenarioProcess:
    """One volatility scenario: a rule plus the band it must respect.

    ``grid`` is optional; when set it pins the scenario to that time grid
    (families always pin their members).
    """

    bounds: VolatilityBounds
    rule: object
    grid: object = None
    label: str = ""

    def __post_init__(self):
        if not self.label:
            object.__setattr__(self, "label", self.rule.describe())

    @property
    def adapted(self):
        return self.rule.adapted

    def theta_sq_at(self, k, t, w_hist, b_hist, grid, n_paths):
        """Emit per-path theta^2 for step k, enforcing the band exactly."""
        v = self.rule.theta_sq_step(k, t, w_hist, b_hist, grid, n_paths)
        ok = self.bounds.contains_sq(v)
        if not ok.all():
            bad = float(np.asarray(v)[~ok].flat[0])
            raise ScenarioBoundsError(
                f"scenario '{self.label}' emitted theta^2={bad:g} outside "
                f"[{self.bounds.sigma_low_sq:g}, {self.bounds.sigma_high_sq:g}] "
                f"at t={t:g}"
            )
        return v


def make_scenario(bounds, rule, grid=None, label=None):
    """Build a ScenarioProcess from a rule spec.

    ``rule`` is a number (constant theta), a callable t -> theta
    (deterministic step function), or an AdaptedRule.  Constant rules are
    band-checked here; step and adapted rules are checked at emission.
    """
    if isinstance(rule, AdaptedRule):
        r = rule
    elif callable(rule):
        r = StepRule(rule)
    else:
        r = ConstantRule(theta=float(rule))
        if not bounds.contains_sq(r.theta_sq):
            raise ScenarioBoundsError(
                f"constant theta={float(rule):g} has theta^2={r.theta_sq:g} outside "
                f"[{bounds.sigma_low_sq:g}, {bounds.sigma_high_sq:g}]"
            )
    return ScenarioProcess(bounds=bounds, rule=r, grid=grid,
                           label=label or r.describe())


@dataclass(frozen=True)
class ScenarioFamily:
    """Ordered, non-empty tuple of scenarios on one shared grid."""

    members: tuple

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise ValueError("scenario family must be non-empty")
        g0 = members[0].grid
        if any(m.grid != g0 for m in members[1:]):
            raise ValueError("family members must share one time grid")
        object.__setattr__(self, "members", members)

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __getitem__(self, i):
        return self.members[i]

    @property
    def labels(self):
        return [m.label for m in self.members]

    @property
    def grid(self):
        return self.members[0].grid


def _bang_rule(bounds, t_star, hi_on_positive):
    """Switch between the band endpoints at t_star on the sign of b(t_star).

    Before the switch theta^2 sits at the upper endpoint (the reference
    model).  From t_star on, paths with b(t_star) >= 0 take one endpoint and
    the rest take the other; ``hi_on_positive`` picks the orientation.
    """
    hi = bounds.sigma_high_sq
    lo = bounds.sigma_low_sq

    def fn(k, t, w_hist, b_hist, grid, _ts=float(t_star)):
        n = b_hist.shape[0]
        if t < _ts - 1e-12:
            return np.full(n, hi)
        k_star = min(int(math.floor(_ts / grid.dt + 1e-9)), k)
        up = b_hist[:, k_star] >= 0.0
        if hi_on_positive:
            return np.where(up, hi, lo)
        return np.where(up, lo, hi)

    side = "pos" if hi_on_positive else "neg"
    return AdaptedRule(fn, label=f"bang(hi_on_{side},t*={t_star:g})")


def canonical_family(bounds, grid, mode, param=None):
    """Standard scenario families.

    mode="constants": ``param`` = n >= 1 constant scenarios with theta^2
    equally spaced on the band (n=1 keeps only the upper endpoint).
    mode="bang_bang_on_sign": ``param`` = switch time; the two adapted
    scenarios that jump between the band endpoints at the switch time
    depending on the sign of the driver there.
    """
    if mode == "constants":
        n = int(param)
        if n < 1:
            raise ValueError("constants family needs n >= 1")
        if n == 1:
            sq_values = [bounds.sigma_high_sq]
        else:
            sq_values = np.linspace(bounds.sigma_low_sq, bounds.sigma_high_sq, n)
        members = [
            ScenarioProcess(bounds=bounds, rule=ConstantRule(theta_sq=float(v)),
                            grid=grid)
            for v in sq_values
        ]
        return ScenarioFamily(tuple(members))
    if mode == "bang_bang_on_sign":
        t_star = float(param)
        if not (0.0 < t_star < grid.horizon):
            raise ValueError("switch time must lie strictly inside the horizon")
        members = [
            ScenarioProcess(bounds=bounds, rule=_bang_rule(bounds, t_star, True),
                            grid=grid),
            ScenarioProcess(bounds=bounds, rule=_bang_rule(bounds, t_star, False),
                            grid=grid),
        ]
        return ScenarioFamily(tuple(members))
    raise ValueError(f"unknown family mode {mode!r}")
