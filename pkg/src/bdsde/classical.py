"""Backward pair solver conditional on a frozen backward path.

Solves, under a fixed volatility measure,

    y_t = xi + int_t^T f(s, X_s, y_s, z_s) ds + int_t^T g(s, X_s, y_s, z_s) . dW(backward)
          + V_T - V_t - int_t^T z_s . dB_s

by backward induction.  The backward integral anchors g at the RIGHT time
endpoint against dW_i = W_{t_{i+1}} - W_{t_i} ("ito" scheme); the midpoint
("stratonovich") scheme averages the two endpoints instead.  The y-update
is implicit with an inner fixed point (contraction for dt * Lip(f) < 1);
z comes from an explicit conditional projection against the forward
increment.  The conditional expectation backend is either exact (a
recombining tree, d = 1) or least-squares Monte Carlo.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from itertools import combinations_with_replacement
from typing import Callable, Optional

import numpy as np

from . import rng
from .errors import (
    ConvergenceError,
    InvalidArgumentError,
    RegressionError,
    StepSizeError,
)
from .generators import g_dot
from .grids import BackwardPath, BrownianTree, PathEnsemble

PHANTOM_STREAM_BASE = 1_000_001


@dataclass(frozen=True)
class BdsdeProblem:
    """Data of one classical backward equation under a fixed volatility."""

    terminal: Callable                 # x array -> xi array (Markovian)
    f: Callable                        # (t, x, y, z) -> array
    g: Callable                        # (t, x, y, z) -> array (scalar l = 1) or (..., l)
    forcing: Optional[np.ndarray] = None   # V at grid nodes, shape (n_steps + 1,)
    a: Optional[float] = None
    lipschitz_f: Optional[float] = None
    terminal_path: Optional[Callable] = None  # whole-path callback (MC only)


@dataclass(frozen=True)
class SolverOptions:
    fp_tol: float = 1e-12
    max_iters: int = 50
    g_scheme: str = "ito"              # "ito" (right endpoint) or "stratonovich" (midpoint)

    def __post_init__(self):
        if self.g_scheme not in ("ito", "stratonovich"):
            raise InvalidArgumentError(f"unknown g_scheme {self.g_scheme!r}")


@dataclass
class BdsdeSolution:
    y: list                            # per-level node values (tree) or (N, n+1) (MC)
    z: list
    residual: np.ndarray               # per-step fixed-point defect (max-norm)
    picard_iters: np.ndarray
    y0: float
    projection_rms: Optional[np.ndarray] = None  # MC only: per-step regression residual
    meta: dict = field(default_factory=dict)


def _check_contraction(problem: BdsdeProblem, dt: float):
    if problem.lipschitz_f is not None and dt * problem.lipschitz_f >= 1.0:
        raise StepSizeError(
            f"dt * Lip(f) = {dt * problem.lipschitz_f:.3g} >= 1: implicit step not contracting",
            suggested_dt=0.5 / problem.lipschitz_f)


def _fixed_point(update, y_start, tol, max_iters):
    """Iterate y <- update(y) to tolerance; returns (y, n_iters, defect)."""
    y = y_start
    for k in range(1, max_iters + 1):
        y_new = update(y)
        delta = float(np.max(np.abs(y_new - y))) if np.size(y_new) else 0.0
        y = y_new
        if delta <= tol:
            return y, k, float(np.max(np.abs(update(y) - y))) if np.size(y) else 0.0
    raise ConvergenceError(
        f"inner fixed point did not reach {tol:g} in {max_iters} iterations")


def _terminal_z_tree(problem, tree):
    """Phantom-step projection z_T(x) = E[xi(x + dX) dX] / (a dt) per leaf."""
    n = tree.grid.n_steps
    leaves = tree.states(n)
    offs = tree.branch_offsets()
    p = tree.transition_probs
    num = np.zeros_like(leaves)
    for pk, ok in zip(p, offs):
        num += pk * problem.terminal(leaves + ok) * ok
    return num / (tree.a * tree.grid.dt)


def solve_tree(problem: BdsdeProblem, tree: BrownianTree, w: BackwardPath,
               opts: SolverOptions = SolverOptions()) -> BdsdeSolution:
    """Exact-expectation backward induction on a recombining tree (d = 1)."""
    grid = tree.grid
    if w.grid.n_steps != grid.n_steps:
        raise InvalidArgumentError("tree and backward path must share the grid")
    _check_contraction(problem, grid.dt)
    n = grid.n_steps
    dt = grid.dt
    a_dt = tree.a * dt
    V = problem.forcing

    y_levels = [None] * (n + 1)
    z_levels = [None] * (n + 1)
    residual = np.zeros(n)
    iters = np.zeros(n, dtype=int)

    y_levels[n] = np.asarray(problem.terminal(tree.states(n)), dtype=float)
    z_levels[n] = _terminal_z_tree(problem, tree)

    for i in range(n - 1, -1, -1):
        t_i, t_next = grid.time(i), grid.time(i + 1)
        x_i = tree.states(i)
        x_next = tree.states(i + 1)
        wi = w.increments[i]
        y_next, z_next = y_levels[i + 1], z_levels[i + 1]

        g_next = g_dot(problem.g(t_next, x_next, y_next, z_next), wi)
        half = 0.5 if opts.g_scheme == "stratonovich" else 1.0
        R = y_next + half * g_next

        e_mean = tree.child_expectation(R)
        z_i = tree.child_cross(R) / a_dt
        dV = (V[i + 1] - V[i]) if V is not None else 0.0

        if opts.g_scheme == "stratonovich":
            def update(y):
                own = 0.5 * g_dot(problem.g(t_i, x_i, y, z_i), wi)
                return e_mean + dV + own + problem.f(t_i, x_i, y, z_i) * dt
        else:
            def update(y):
                return e_mean + dV + problem.f(t_i, x_i, y, z_i) * dt

        y_i, k, defect = _fixed_point(update, e_mean + dV, opts.fp_tol, opts.max_iters)
        y_levels[i], z_levels[i] = y_i, z_i
        residual[i], iters[i] = defect, k

    return BdsdeSolution(y=y_levels, z=z_levels, residual=residual,
                         picard_iters=iters, y0=float(y_levels[0][0]),
                         meta={"backend": "tree", "a": tree.a})


def solve_with_forcing(problem: BdsdeProblem, tree: BrownianTree, w: BackwardPath,
                       opts: SolverOptions = SolverOptions()) -> BdsdeSolution:
    """Forced equation solved via the additive substitution ybar = y + V."""
    V = problem.forcing
    if V is None:
        V = np.zeros(tree.grid.n_steps + 1)
    V = np.asarray(V, dtype=float)
    if V.shape != (tree.grid.n_steps + 1,):
        raise InvalidArgumentError("forcing must carry one value per grid node")

    v_of_t = {round(tree.grid.time(i), 12): V[i] for i in range(len(V))}

    def vt(t):
        return v_of_t[round(t, 12)]

    shifted = replace(
        problem,
        terminal=lambda x: problem.terminal(x) + V[-1],
        f=lambda t, x, y, z: problem.f(t, x, y - vt(t), z),
        g=lambda t, x, y, z: problem.g(t, x, y - vt(t), z),
        forcing=None,
    )
    bar = solve_tree(shifted, tree, w, opts)
    y_levels = [bar.y[i] - V[i] for i in range(len(bar.y))]
    return BdsdeSolution(y=y_levels, z=bar.z, residual=bar.residual,
                         picard_iters=bar.picard_iters, y0=float(y_levels[0][0]),
                         meta={"backend": "tree+forcing", "a": tree.a})


@dataclass
class ComparisonReport:
    ordered: bool
    worst_margin: float      # min over nodes of y1 - y2 (negative = violation)
    preconditions_hold: bool
    detail: dict = field(default_factory=dict)


def check_comparison(sol1: BdsdeSolution, sol2: BdsdeSolution,
                     problem1: BdsdeProblem, problem2: BdsdeProblem,
                     tree: BrownianTree, eps: float = 1e-11) -> ComparisonReport:
    """Monotone data => monotone solution, nodewise on a shared tree."""
    n = tree.grid.n_steps
    xi1 = np.asarray(problem1.terminal(tree.states(n)), dtype=float)
    xi2 = np.asarray(problem2.terminal(tree.states(n)), dtype=float)
    pre_xi = bool(np.all(xi1 >= xi2 - eps))

    pre_f = True
    for i in range(n):
        t, x = tree.grid.time(i), tree.states(i)
        f1 = np.asarray(problem1.f(t, x, sol1.y[i], sol1.z[i]), dtype=float)
        f2 = np.asarray(problem2.f(t, x, sol1.y[i], sol1.z[i]), dtype=float)
        if not np.all(f1 >= f2 - eps):
            pre_f = False
            break

    v1 = problem1.forcing if problem1.forcing is not None else np.zeros(n + 1)
    v2 = problem2.forcing if problem2.forcing is not None else np.zeros(n + 1)
    pre_v = bool(np.all(np.diff(np.asarray(v1) - np.asarray(v2)) >= -eps))

    worst = math.inf
    for i in range(n + 1):
        worst = min(worst, float(np.min(sol1.y[i] - sol2.y[i])))
    return ComparisonReport(ordered=worst >= -eps, worst_margin=worst,
                            preconditions_hold=pre_xi and pre_f and pre_v,
                            detail={"xi": pre_xi, "f": pre_f, "forcing": pre_v})


# ---------------------------------------------------------------------------
# least-squares Monte Carlo backend


def polynomial_features(x: np.ndarray, degree: int) -> np.ndarray:
    """Total-degree monomials of the (normalized) state, shape (N, p)."""
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    cols = [np.ones(n)]
    for deg in range(1, degree + 1):
        for combo in combinations_with_replacement(range(d), deg):
            col = np.ones(n)
            for j in combo:
                col = col * x[:, j]
            cols.append(col)
    return np.column_stack(cols)


def _fit(phi: np.ndarray, targets: np.ndarray, ridge: float, cond_max: float):
    """Ridge-regularized normal equations with a condition-number guard."""
    gram = phi.T @ phi / phi.shape[0] + ridge * np.eye(phi.shape[1])
    cond = np.linalg.cond(gram)
    if cond > cond_max:
        raise RegressionError(
            f"normal equations condition number {cond:.3g} exceeds {cond_max:.3g}",
            condition_number=cond)
    rhs = phi.T @ targets / phi.shape[0]
    return np.linalg.solve(gram, rhs)


def _step_controls(ensemble: PathEnsemble) -> np.ndarray:
    c = np.asarray(ensemble.control, dtype=float)
    n = ensemble.grid.n_steps
    if c.ndim == 0:
        return np.full(n, float(c))
    if c.ndim == 1:
        return c
    raise InvalidArgumentError("regression backend supports scalar controls (d = 1)")


def solve_regression(problem: BdsdeProblem, ensemble: PathEnsemble, w: BackwardPath,
                     basis_degree: int = 3, opts: SolverOptions = SolverOptions(),
                     ridge: float = 1e-10, cond_max: float = 1e12) -> BdsdeSolution:
    """Least-squares Monte Carlo backward induction (d = 1)."""
    grid = ensemble.grid
    if w.grid.n_steps != grid.n_steps:
        raise InvalidArgumentError("ensemble and backward path must share the grid")
    if ensemble.d_dim != 1:
        raise InvalidArgumentError("regression backend implemented for d = 1")
    _check_contraction(problem, grid.dt)

    n, dt = grid.n_steps, grid.dt
    a_steps = _step_controls(ensemble)
    X = ensemble.states[:, :, 0]
    dX = ensemble.increments[:, :, 0]
    N = ensemble.n_paths
    V = problem.forcing

    y = np.empty((N, n + 1))
    z = np.empty((N, n + 1))
    residual = np.zeros(n)
    iters = np.zeros(n, dtype=int)
    proj_rms = np.zeros(n)

    if problem.terminal_path is not None:
        y[:, n] = problem.terminal_path(ensemble.states)
    else:
        y[:, n] = problem.terminal(X[:, n])

    # phantom projection for the terminal z: one extra seeded step on a
    # shifted key so it cannot collide with the ensemble's own streams
    zp = rng.blocked_normals(ensemble.seed + PHANTOM_STREAM_BASE, N, (1,))[:, 0]
    dx_ph = math.sqrt(a_steps[-1] * dt) * zp
    x_ph = X[:, n] + dx_ph
    if problem.terminal_path is not None:
        states_ph = np.concatenate([ensemble.states, x_ph[:, None, None]], axis=1)
        xi_ph = problem.terminal_path(states_ph[:, 1:, :])
    else:
        xi_ph = problem.terminal(x_ph)
    z[:, n] = _regress_on_state(X[:, n], xi_ph * dx_ph / (a_steps[-1] * dt),
                                basis_degree, ridge, cond_max)[0]

    for i in range(n - 1, -1, -1):
        t_i, t_next = grid.time(i), grid.time(i + 1)
        wi = w.increments[i]
        a_dt = a_steps[i] * dt
        g_next = g_dot(problem.g(t_next, X[:, i + 1], y[:, i + 1], z[:, i + 1]), wi)
        half = 0.5 if opts.g_scheme == "stratonovich" else 1.0
        R = y[:, i + 1] + half * g_next

        fit_y, rms = _regress_on_state(X[:, i], R, basis_degree, ridge, cond_max)
        fit_z, _ = _regress_on_state(X[:, i], R * dX[:, i] / a_dt,
                                     basis_degree, ridge, cond_max)
        z[:, i] = fit_z
        dV = (V[i + 1] - V[i]) if V is not None else 0.0

        if opts.g_scheme == "stratonovich":
            def update(yv):
                own = 0.5 * g_dot(problem.g(t_i, X[:, i], yv, fit_z), wi)
                return fit_y + dV + own + problem.f(t_i, X[:, i], yv, fit_z) * dt
        else:
            def update(yv):
                return fit_y + dV + problem.f(t_i, X[:, i], yv, fit_z) * dt

        y[:, i], iters[i], residual[i] = _fixed_point(
            update, fit_y + dV, opts.fp_tol, opts.max_iters)
        proj_rms[i] = rms

    return BdsdeSolution(y=y, z=z, residual=residual, picard_iters=iters,
                         y0=float(y[0, 0]), projection_rms=proj_rms,
                         meta={"backend": "mc", "n_paths": N,
                               "basis_degree": basis_degree})


def _regress_on_state(x, targets, degree, ridge, cond_max):
    """Conditional-expectation estimate E[target | x]; returns (fitted, rms)."""
    std = float(np.std(x))
    if std < 1e-12 * (1.0 + float(np.abs(np.mean(x)))):
        fitted = np.full_like(targets, float(np.mean(targets)))
    else:
        xn = (x - np.mean(x)) / std
        phi = polynomial_features(xn, degree)
        coef = _fit(phi, targets, ridge, cond_max)
        fitted = phi @ coef
    rms = float(np.sqrt(np.mean((targets - fitted) ** 2)))
    return fitted, rms
