"""Path simulation: driving noise under a volatility scenario, then the
controlled state by an Euler scheme.

Randomness is counter-based: path p of a run with seed s reads an
independent Philox stream keyed (s, p), mapped to normals by the inverse
CDF, so the increment at (seed, path, step) is a pure function of those
three integers.  Path batches can therefore be generated in any order or
split across workers without changing a single bit of the output, and two
scenarios evaluated with the same seed share one increment stream (common
random numbers).
"""

from __future__ import annotations

import math
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from ._parallel import parallel_map, worker_count
from .errors import SimulationError


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_n = T."""

    horizon: float
    n_steps: int
    _nodes: np.ndarray = field(init=False, repr=False, compare=False, default=None)

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.n_steps < 1:
            raise ValueError("need at least one step")
        nodes = np.linspace(0.0, self.horizon, self.n_steps + 1)
        nodes.flags.writeable = False
        object.__setattr__(self, "_nodes", nodes)

    @property
    def dt(self):
        return self.horizon / self.n_steps

    @property
    def nodes(self):
        return self._nodes

    def index_at(self, t):
        return min(int(math.floor(t / self.dt + 1e-9)), self.n_steps)


# --------------------------------------------------------------------------
# counter-based normal increments, cached per (seed, n_paths, n_steps)

_CACHE_MAX = 2
_cache = OrderedDict()
_cache_lock = threading.Lock()
_TINY = 2.0 ** -64


def _path_block(seed, start, stop, n_steps):
    out = np.empty((stop - start, n_steps))
    for p in range(start, stop):
        u = np.random.Generator(np.random.Philox(key=[seed, p])).random(n_steps)
        out[p - start] = u
    return out


def standard_normals(seed, n_paths, n_steps):
    """(n_paths, n_steps) standard normals, row p from Philox key (seed, p).

    Cached (the matrix is reused verbatim across scenarios for common
    random numbers).  The returned array is read-only.
    """
    key = (int(seed), int(n_paths), int(n_steps))
    with _cache_lock:
        if key in _cache:
            _cache.move_to_end(key)
            return _cache[key]
    chunk = max(1, n_paths // max(1, worker_count(8)))
    starts = list(range(0, n_paths, chunk))
    blocks = parallel_map(
        lambda s: _path_block(key[0], s, min(s + chunk, n_paths), n_steps), starts
    )
    u = np.vstack(blocks) if len(blocks) > 1 else blocks[0]
    z = ndtri(np.clip(u, _TINY, 1.0 - 1e-16))
    z.flags.writeable = False
    with _cache_lock:
        _cache[key] = z
        while len(_cache) > _CACHE_MAX:
            _cache.popitem(last=False)
    return z


@dataclass(frozen=True)
class PathBundle:
    """Simulated driving processes under one scenario.

    w: Wiener path, b: driver, qv: quadratic variation, all (n_paths,
    n_steps+1) with zero first column; theta_sq: realized variance rate per
    step, (n_paths, n_steps).  Arrays are read-only.
    """

    grid: TimeGrid
    scenario: object
    seed: int
    w: np.ndarray
    b: np.ndarray
    qv: np.ndarray
    theta_sq: np.ndarray

    @property
    def n_paths(self):
        return self.w.shape[0]


def simulate_driver(scenario, grid, seed, n_paths):
    """Simulate (W, B, QV) under one scenario.

    Step updates: dB_k = theta_k dW_k and dQV_k = theta_k^2 dt, with
    theta_k emitted by the scenario rule from history up to t_k.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    if scenario.grid is not None and scenario.grid != grid:
        raise ValueError("scenario is pinned to a different time grid")
    n = grid.n_steps
    dt = grid.dt
    sq = math.sqrt(dt)
    z = standard_normals(seed, n_paths, n)
    nodes = grid.nodes

    w = np.zeros((n_paths, n + 1))
    b = np.zeros((n_paths, n + 1))
    qv = np.zeros((n_paths, n + 1))
    th2 = np.empty((n_paths, n))
    for k in range(n):
        t = nodes[k]
        v2 = scenario.theta_sq_at(k, t, w[:, : k + 1], b[:, : k + 1], grid, n_paths)
        th2[:, k] = v2
        dw = z[:, k] * sq
        w[:, k + 1] = w[:, k] + dw
        b[:, k + 1] = b[:, k] + np.sqrt(v2) * dw
        qv[:, k + 1] = qv[:, k] + v2 * dt
    for arr in (w, b, qv, th2):
        arr.flags.writeable = False
    return PathBundle(grid=grid, scenario=scenario, seed=int(seed),
                      w=w, b=b, qv=qv, theta_sq=th2)


@dataclass(frozen=True)
class StatePaths:
    """Controlled state along a bundle: x (n_paths, n_steps+1), realized
    control u (n_paths, n_steps), validity mask for finite paths."""

    x: np.ndarray
    u: np.ndarray
    x0: float
    valid: np.ndarray

    @property
    def n_flagged(self):
        return int(self.x.shape[0] - self.valid.sum())


def simulate_state(problem, control, paths, max_flagged_fraction=0.01):
    """Euler scheme for the controlled state along simulated paths.

    Additive problems step x directly; multiplicative problems step log x
    (positivity-preserving).  Paths that become non-finite are flagged and
    reported; more than ``max_flagged_fraction`` of them is an error.
    """
    grid = paths.grid
    if abs(grid.horizon - problem.horizon) > 1e-12:
        raise ValueError("problem horizon does not match the path grid")
    n = grid.n_steps
    dt = grid.dt
    nodes = grid.nodes
    n_paths = paths.n_paths
    b_path = paths.b
    th2 = paths.theta_sq

    x = np.empty((n_paths, n + 1))
    u_arr = np.empty((n_paths, n))
    x[:, 0] = problem.x0

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        if problem.multiplicative:
            z = np.full(n_paths, math.log(problem.x0))
            for k in range(n):
                t = nodes[k]
                u = control.evaluate(t, k, problem, grid, paths, x[:, : k + 1])
                u_arr[:, k] = u
                db = b_path[:, k + 1] - b_path[:, k]
                v2 = th2[:, k]
                drift = 0.0
                if problem.mult_drift is not None:
                    drift = problem.mult_drift(t, u)
                m = problem.mult_qv_drift(t, u)
                s = problem.mult_vol(t, u)
                z = z + (drift + (m - 0.5 * s * s) * v2) * dt + s * db
                x[:, k + 1] = np.exp(z)
        else:
            for k in range(n):
                t = nodes[k]
                xk = x[:, k]
                u = control.evaluate(t, k, problem, grid, paths, x[:, : k + 1])
                u_arr[:, k] = u
                db = b_path[:, k + 1] - b_path[:, k]
                v2 = th2[:, k]
                x[:, k + 1] = (
                    xk
                    + problem.b(t, xk, u) * dt
                    + problem.mu(t, xk, u) * v2 * dt
                    + problem.sigma(t, xk, u) * db
                )

    valid = np.isfinite(x).all(axis=1) & np.isfinite(u_arr).all(axis=1)
    n_bad = int(n_paths - valid.sum())
    if n_bad > max_flagged_fraction * n_paths:
        raise SimulationError(
            f"{n_bad}/{n_paths} paths became non-finite under control "
            f"'{control.label}' (limit {max_flagged_fraction:.0%})"
        )
    x.flags.writeable = False
    u_arr.flags.writeable = False
    return StatePaths(x=x, u=u_arr, x0=problem.x0, valid=valid)
