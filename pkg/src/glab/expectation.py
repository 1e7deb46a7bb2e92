"""Per-model expectations and the worst-case (sublinear) expectation.

Every estimate is a plain Monte Carlo mean with a standard error.  The
sublinear estimate is the maximum of the per-scenario means computed with
common random numbers, which makes the four sublinear-expectation axioms
exact identities of the estimator (not just asymptotic properties).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._parallel import parallel_map
from .driver import simulate_driver, simulate_state
from .errors import SimulationError


@dataclass(frozen=True)
class Estimate:
    value: float
    std_error: float
    n_paths: int
    scenario: str = ""
    n_flagged: int = 0

    def __post_init__(self):
        if self.std_error < 0:
            raise ValueError("std_error must be >= 0")


class Functional:
    """A path functional: bundle -> per-path values (+ validity mask)."""

    def __init__(self, fn, label="functional"):
        self._fn = fn
        self.label = label

    def evaluate(self, bundle):
        vals = np.asarray(self._fn(bundle), dtype=float)
        if vals.shape != (bundle.n_paths,):
            vals = np.broadcast_to(vals, (bundle.n_paths,)).astype(float)
        return vals, np.isfinite(vals)


def path_functional(fn, label="functional"):
    return Functional(fn, label)


def evaluate_performance(problem, control, bundle, state=None):
    """Per-path reward sum f dt + terminal g along one bundle.

    Returns (values, valid).  Pass a pre-simulated ``state`` to reuse it.
    """
    if state is None:
        state = simulate_state(problem, control, bundle)
    grid = bundle.grid
    dt = grid.dt
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        acc = np.zeros(bundle.n_paths)
        if problem.f is not None:
            for k in range(grid.n_steps):
                acc += problem.f(grid.nodes[k], state.x[:, k], state.u[:, k]) * dt
        vals = acc + problem.g(state.x[:, -1])
    valid = state.valid & np.isfinite(vals)
    return vals, valid


def performance_functional(problem, control):
    """Performance criterion of a control as a path functional."""

    def fn(bundle):
        vals, valid = evaluate_performance(problem, control, bundle)
        out = np.where(valid, vals, np.nan)
        return out

    return Functional(fn, label=f"J[{problem.name};{control.label}]")


def expect_under(functional, scenario, grid, seed, n_paths,
                 max_flagged_fraction=0.01):
    """Monte Carlo estimate of the expectation under one scenario."""
    bundle = simulate_driver(scenario, grid, seed, n_paths)
    vals, valid = functional.evaluate(bundle)
    n_bad = int(n_paths - valid.sum())
    if n_bad > max_flagged_fraction * n_paths:
        raise SimulationError(
            f"{n_bad}/{n_paths} non-finite evaluations of '{functional.label}' "
            f"under scenario '{scenario.label}'"
        )
    good = vals[valid]
    n = good.size
    se = float(good.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return Estimate(value=float(good.mean()), std_error=se, n_paths=n,
                    scenario=scenario.label, n_flagged=n_bad)


def expect_sublinear(functional, family, grid, seed, n_paths,
                     max_flagged_fraction=0.01):
    """Worst case of the per-scenario estimates (common random numbers).

    Returns (estimate of the maximizing member, argmax member index).
    Ties break toward the lowest member index.
    """
    estimates = parallel_map(
        lambda sc: expect_under(functional, sc, grid, seed, n_paths,
                                max_flagged_fraction),
        family.members,
    )
    best = 0
    for i in range(1, len(estimates)):
        if estimates[i].value > estimates[best].value:
            best = i
    return estimates[best], best
