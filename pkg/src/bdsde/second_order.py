"""Uncertain-volatility backward solver: per-step supremum over a volatility grid.

The value is propagated backward on a shared spatial lattice; under each
admissible volatility the one-step conditional expectation is the exact
Gaussian integral of the piecewise-linear continuation (see _accel), the
control gets the per-node argmax with ties resolved toward the smallest
volatility, and the nondecreasing compensator K is diagnosed as the defect
of the value against each fixed-volatility one-step operator.

A singleton volatility grid admits an exact tree backend that coincides
with the classical solver nodewise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ._accel import linear_interp, pl_gauss_moments
from .classical import BdsdeProblem, SolverOptions, _fixed_point, solve_tree
from .errors import (
    ConsistencyError,
    InvalidArgumentError,
    UnsupportedBackendError,
    VerificationError,
)
from .generators import g_dot
from .grids import (
    BackwardPath,
    PathEnsemble,
    TimeGrid,
    VolatilityGrid,
    build_tree,
)


@dataclass(frozen=True)
class TbdsdeProblem:
    """Terminal data, per-volatility generator, and the admissible grid."""

    terminal: Callable                 # x array -> xi array
    F: Callable                        # (t, x, y, z, a) -> array
    g: Callable                        # (t, x, y, z) -> array
    volgrid: VolatilityGrid
    lipschitz_f: Optional[float] = None

    def classical_problem(self, a: float) -> BdsdeProblem:
        return BdsdeProblem(terminal=self.terminal,
                            f=lambda t, x, y, z: self.F(t, x, y, z, a),
                            g=self.g, a=a, lipschitz_f=self.lipschitz_f)

    def finite_volatilities(self) -> np.ndarray:
        """Volatilities where the generator is finite at a probe point."""
        keep = []
        for a in self.volgrid:
            probe = float(np.asarray(self.F(0.0, np.zeros(1), 0.0, 0.0, float(a))).reshape(-1)[0])
            if math.isfinite(probe):
                keep.append(float(a))
        if not keep:
            raise InvalidArgumentError("generator infinite on the entire volatility grid")
        return np.asarray(keep)


@dataclass(frozen=True)
class DpOptions(SolverOptions):
    x_steps: int = 400
    span_sigmas: float = 6.0


@dataclass
class KTrace:
    increments: np.ndarray          # (n_steps, n_nodes) nonnegative defects
    expected_cumulative: np.ndarray  # (n_steps + 1,) forward-law expectation
    clamped: int
    volatility: Optional[float]     # None = per-node argmax

    @property
    def k_terminal(self) -> float:
        return float(self.expected_cumulative[-1])


@dataclass
class TbdsdeSolution:
    Y: list
    Z: list
    argmax_a: list
    K: KTrace
    residual: np.ndarray
    y0: float
    minimality_gap: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def backend(self) -> str:
        return self.meta.get("backend", "lattice")


def _build_lattice(grid: TimeGrid, volgrid: VolatilityGrid, x0: float,
                   opts: DpOptions) -> np.ndarray:
    reach = opts.span_sigmas * math.sqrt(volgrid.a_high * (grid.horizon - grid.t0))
    return np.linspace(x0 - reach, x0 + reach, opts.x_steps + 1)


def _phantom_z_lattice(problem, xs, a, dt):
    xi = np.asarray(problem.terminal(xs), dtype=float)
    _, m1 = pl_gauss_moments(xs, xi, xs, math.sqrt(a * dt))
    return m1 / (a * dt)


def _dp_candidates(problem, xs, t_i, t_next, wi, y_next, z_next, a, dt, opts):
    """One-step value and z under a fixed volatility, on the lattice."""
    sigma = math.sqrt(a * dt)
    half = 0.5 if opts.g_scheme == "stratonovich" else 1.0
    r_knots = y_next + half * g_dot(problem.g(t_next, xs, y_next, z_next), wi)
    m0, m1 = pl_gauss_moments(xs, r_knots, xs, sigma)
    z_a = m1 / (a * dt)

    if opts.g_scheme == "stratonovich":
        def update(y):
            own = 0.5 * g_dot(problem.g(t_i, xs, y, z_a), wi)
            return m0 + own + problem.F(t_i, xs, y, z_a, a) * dt
    else:
        def update(y):
            return m0 + problem.F(t_i, xs, y, z_a, a) * dt

    y_a, iters, defect = _fixed_point(update, m0, opts.fp_tol, opts.max_iters)
    return y_a, z_a, iters, defect


def solve_dp(problem: TbdsdeProblem, grid: TimeGrid, w: BackwardPath,
             x0: float = 0.0, opts: DpOptions = DpOptions(),
             backend: str = "lattice") -> TbdsdeSolution:
    """Backward induction with a per-step, per-node supremum over volatilities."""
    if backend == "tree":
        return _solve_dp_tree(problem, grid, w, x0, opts)
    if backend != "lattice":
        raise InvalidArgumentError(f"unknown backend {backend!r}")

    a_vals = problem.finite_volatilities()
    n, dt = grid.n_steps, grid.dt
    xs = _build_lattice(grid, problem.volgrid, x0, opts)

    Y = [None] * (n + 1)
    Z = [None] * (n + 1)
    argmax = [None] * (n + 1)
    residual = np.zeros(n)

    Y[n] = np.asarray(problem.terminal(xs), dtype=float)
    phantom = {float(a): _phantom_z_lattice(problem, xs, float(a), dt) for a in a_vals}

    for i in range(n - 1, -1, -1):
        t_i, t_next = grid.time(i), grid.time(i + 1)
        wi = w.increments[i]
        cands = np.empty((len(a_vals), len(xs)))
        zs = np.empty_like(cands)
        worst_defect = 0.0
        for k, a in enumerate(a_vals):
            z_next = phantom[float(a)] if i == n - 1 else Z[i + 1]
            y_a, z_a, _, defect = _dp_candidates(
                problem, xs, t_i, t_next, wi, Y[i + 1], z_next, float(a), dt, opts)
            cands[k], zs[k] = y_a, z_a
            worst_defect = max(worst_defect, defect)
        best = np.argmax(cands, axis=0)  # first max = smallest volatility on ties
        cols = np.arange(len(xs))
        Y[i] = cands[best, cols]
        Z[i] = zs[best, cols]
        argmax[i] = a_vals[best]
        if i == n - 1:
            Z[n] = np.array([phantom[float(a_vals[b])][j] for j, b in enumerate(best)])
            argmax[n] = a_vals[best]
        residual[i] = worst_defect

    sol = TbdsdeSolution(Y=Y, Z=Z, argmax_a=argmax,
                         K=None, residual=residual, y0=float(linear_interp(np.array([x0]), xs, Y[0])[0]),
                         meta={"backend": "lattice", "lattice": xs, "x0": x0,
                               "grid": grid, "a_values": a_vals})
    sol.K = extract_k(sol, problem, w)
    return sol


def _solve_dp_tree(problem, grid, w, x0, opts):
    """Singleton-volatility exact backend; coincides with the classical solver."""
    a_vals = problem.finite_volatilities()
    if len(a_vals) != 1:
        raise UnsupportedBackendError("tree backend requires a singleton volatility grid")
    a = float(a_vals[0])
    tree = build_tree(grid, a, x0=x0)
    base = solve_tree(problem.classical_problem(a), tree, w, opts)
    n = grid.n_steps
    argmax = [np.full(tree.n_nodes(i), a) for i in range(n + 1)]
    sol = TbdsdeSolution(Y=base.y, Z=base.z, argmax_a=argmax, K=None,
                         residual=base.residual, y0=base.y0,
                         meta={"backend": "tree", "tree": tree, "x0": x0,
                               "grid": grid, "a_values": a_vals})
    sol.K = extract_k(sol, problem, w)
    return sol


def _value_at(sol: TbdsdeSolution, i: int, x: np.ndarray) -> np.ndarray:
    """Solution value Y_i evaluated at arbitrary states."""
    if sol.backend == "tree":
        tree = sol.meta["tree"]
        return linear_interp(x, tree.states(i), sol.Y[i]) if i > 0 else \
            np.full_like(np.asarray(x, dtype=float), sol.Y[0][0])
    return linear_interp(x, sol.meta["lattice"], sol.Y[i])


def _z_at(sol: TbdsdeSolution, i: int, x: np.ndarray) -> np.ndarray:
    if sol.backend == "tree":
        tree = sol.meta["tree"]
        return linear_interp(x, tree.states(i), sol.Z[i]) if i > 0 else \
            np.full_like(np.asarray(x, dtype=float), sol.Z[0][0])
    return linear_interp(x, sol.meta["lattice"], sol.Z[i])


def extract_k(sol: TbdsdeSolution, problem: TbdsdeProblem, w: BackwardPath,
              volatility: Optional[float] = None,
              opts: Optional[DpOptions] = None) -> KTrace:
    """Per-step defect of the value against a one-step operator.

    volatility None evaluates each node under its own argmax control (the
    solution's compensator, which vanishes up to fixed-point dust); a fixed
    volatility gives the compensator seen under that constant control, with
    the cumulative trace integrated against its forward law from x0.
    """
    grid = sol.meta["grid"]
    x0 = sol.meta["x0"]
    n, dt = grid.n_steps, grid.dt
    if opts is None:
        opts = DpOptions()

    if sol.backend == "tree":
        tree = sol.meta["tree"]
        a = float(sol.meta["a_values"][0]) if volatility is None else float(volatility)
        return _extract_k_tree(sol, problem, w, tree, a, opts)

    xs = sol.meta["lattice"]
    a_vals = sol.meta["a_values"]
    scale = 1.0 + max(abs(float(np.max(v))) for v in sol.Y)
    eps = 1e-9 * scale

    incs = np.zeros((n, len(xs)))
    clamped = 0
    for i in range(n - 1, -1, -1):
        t_i, t_next = grid.time(i), grid.time(i + 1)
        wi = w.increments[i]
        if volatility is None:
            a_node = np.asarray(sol.argmax_a[i], dtype=float)
            delta = np.zeros(len(xs))
            for a in np.unique(a_node):
                cand, _, _, _ = _dp_candidates(problem, xs, t_i, t_next, wi,
                                               sol.Y[i + 1], sol.Z[i + 1], float(a), dt, opts)
                mask = a_node == a
                delta[mask] = sol.Y[i][mask] - cand[mask]
        else:
            cand, _, _, _ = _dp_candidates(problem, xs, t_i, t_next, wi,
                                           sol.Y[i + 1], sol.Z[i + 1], float(volatility),
                                           dt, opts)
            delta = sol.Y[i] - cand
        if float(delta.min()) < -10 * eps:
            raise ConsistencyError(
                f"compensator increment {delta.min():.3e} below -10 eps at step {i}")
        clamped += int(np.sum(delta < 0))
        incs[i] = np.maximum(delta, 0.0)

    a_law = float(volatility) if volatility is not None else float(np.max(a_vals))
    cum = np.zeros(n + 1)
    for i in range(n):
        t_i = grid.time(i) - grid.t0
        if t_i <= 0:
            e_i = float(linear_interp(np.array([x0]), xs, incs[i])[0])
        else:
            e_i = float(pl_gauss_moments(xs, incs[i], np.array([x0]),
                                         math.sqrt(a_law * t_i))[0][0])
        cum[i + 1] = cum[i] + e_i
    return KTrace(increments=incs, expected_cumulative=cum, clamped=clamped,
                  volatility=volatility)


def _extract_k_tree(sol, problem, w, tree, a, opts):
    grid = tree.grid
    n, dt = grid.n_steps, grid.dt
    scale = 1.0 + max(abs(float(np.max(v))) for v in sol.Y)
    eps = 1e-9 * scale
    a_dt = a * dt
    incs = []
    clamped = 0
    for i in range(n):
        t_i, t_next = grid.time(i), grid.time(i + 1)
        wi = w.increments[i]
        x_i, x_next = tree.states(i), tree.states(i + 1)
        r = sol.Y[i + 1] + g_dot(problem.g(t_next, x_next, sol.Y[i + 1], sol.Z[i + 1]), wi)
        e_mean = tree.child_expectation(r)
        z_i = tree.child_cross(r) / a_dt

        def update(y):
            return e_mean + problem.F(t_i, x_i, y, z_i, a) * dt

        cand, _, _ = _fixed_point(update, e_mean, opts.fp_tol, opts.max_iters)
        delta = sol.Y[i] - cand
        if float(np.min(delta)) < -10 * eps:
            raise ConsistencyError(f"compensator increment below -10 eps at step {i}")
        clamped += int(np.sum(delta < 0))
        incs.append(np.maximum(delta, 0.0))

    probs = tree.level_probabilities()
    cum = np.zeros(n + 1)
    for i in range(n):
        cum[i + 1] = cum[i] + float(np.dot(probs[i], incs[i]))
    width = tree.n_nodes(n - 1) if n > 0 else 1
    padded = np.zeros((n, width))
    for i, v in enumerate(incs):
        padded[i, :len(v)] = v
    return KTrace(increments=padded, expected_cumulative=cum, clamped=clamped,
                  volatility=a)


def minimality_gap(problem: TbdsdeProblem, sol: TbdsdeSolution, w: BackwardPath,
                   opts: SolverOptions = SolverOptions()) -> np.ndarray:
    """Per-step min over constant controls of the expected remaining compensator.

    Under a constant control the remaining compensator from t_i is, through
    the equation itself, the gap between the value and the constant-control
    solution restarted from the terminal data; that solution is computed on
    the control's exact tree and the gap is integrated against the tree's
    forward law.  Vanishes at O(dt) for problems whose optimal control is a
    constant element of the grid.
    """
    grid = sol.meta["grid"]
    x0 = sol.meta["x0"]
    n = grid.n_steps
    a_vals = problem.finite_volatilities()

    gaps = np.full((len(a_vals), n + 1), np.inf)
    for k, a in enumerate(a_vals):
        tree = build_tree(grid, float(a), x0=x0)
        ya = solve_tree(problem.classical_problem(float(a)), tree, w, opts)
        probs = tree.level_probabilities()
        for i in range(n + 1):
            states = tree.states(i)
            diff = _value_at(sol, i, states) - ya.y[i]
            gaps[k, i] = float(np.dot(probs[i], diff))
    return np.min(gaps, axis=0)


@dataclass
class RepresentationReport:
    y0_dp: float
    best_constant: float
    best_a: float
    surplus: float
    per_a: dict


def representation_check(problem: TbdsdeProblem, grid: TimeGrid, w: BackwardPath,
                         x0: float = 0.0, opts: DpOptions = DpOptions(),
                         backend: str = "lattice",
                         eps: Optional[float] = None) -> RepresentationReport:
    """Value at the root dominates every constant-control value."""
    sol = solve_dp(problem, grid, w, x0=x0, opts=opts, backend=backend)
    per_a = {}
    for a in problem.finite_volatilities():
        tree = build_tree(grid, float(a), x0=x0)
        per_a[float(a)] = solve_tree(problem.classical_problem(float(a)), tree, w,
                                     opts).y0
    best_a = max(per_a, key=per_a.get)
    best = per_a[best_a]
    surplus = sol.y0 - best
    if eps is None:
        eps = 10.0 * grid.dt * (1.0 + abs(sol.y0))
    if surplus < -10 * eps:
        raise ConsistencyError(
            f"value {sol.y0} fell {-surplus:.3e} below the best constant control")
    return RepresentationReport(y0_dp=sol.y0, best_constant=best, best_a=best_a,
                                surplus=surplus, per_a=per_a)


@dataclass
class FeynmanKacReport:
    min_k: float
    mean_k: float
    frac_negative: float
    mean_abs_residual: float
    mean_residual: float


def feynman_kac_residual(u: Callable, du: Callable, d2u: Callable,
                         problem: TbdsdeProblem, ensemble: PathEnsemble,
                         w: BackwardPath, eps: float = 1e-8,
                         hhat: Optional[Callable] = None) -> FeynmanKacReport:
    """Verify a candidate classical solution along simulated paths.

    Along paths under the ensemble's constant control a, with Y = u, Z = Du
    and curvature G = D^2 u, the compensator rate

        k = hhat(., G) - a G / 2 + F(., a)

    must be nonnegative, and the discrete closed-loop defect of the value
    equation (with the backward integral at the midpoint) must vanish with
    the step size.  By conjugacy, k >= 0 holds automatically when hhat is
    the grid biconjugate of the problem's own generator (the default); a
    negative rate therefore flags an hhat supplied inconsistently with F,
    or a control outside the generator's domain.  A candidate u that fails
    to solve the equation shows up as a residual that does not vanish
    under step refinement.

    hhat: optional (t, x, y, z, gamma) -> array overriding the built-in
    grid biconjugate.
    """
    grid = ensemble.grid
    n, dt = grid.n_steps, grid.dt
    a = float(np.asarray(ensemble.control).reshape(-1)[0])
    X = ensemble.states[:, :, 0]
    a_vals = problem.finite_volatilities()

    min_k, mean_k, n_neg, total = math.inf, 0.0, 0, 0
    k_path = np.zeros((ensemble.n_paths, n + 1))
    f_path = np.zeros((ensemble.n_paths, n + 1))
    g_half = np.zeros(ensemble.n_paths)
    z_dx = np.zeros(ensemble.n_paths)

    uv = {}
    for i in range(n + 1):
        t, x = grid.time(i), X[:, i]
        yv, zv, gv = u(t, x), du(t, x), d2u(t, x)
        uv[i] = (yv, zv, gv)
        f_here = np.asarray(problem.F(t, x, yv, zv, a), dtype=float)
        if hhat is not None:
            hh = np.asarray(hhat(t, x, yv, zv, gv), dtype=float)
        else:
            hh = None
            for av in a_vals:
                cand = 0.5 * av * gv - np.asarray(problem.F(t, x, yv, zv, float(av)), dtype=float)
                hh = cand if hh is None else np.maximum(hh, cand)
        k = hh - 0.5 * a * gv + f_here
        k_path[:, i] = k
        f_path[:, i] = f_here
        min_k = min(min_k, float(k.min()))
        mean_k += float(k.sum())
        n_neg += int(np.sum(k < -eps))
        total += k.size

    if min_k < -10 * eps:
        raise VerificationError(
            f"compensator rate {min_k:.3e} < -10 eps: candidate is not a supersolution here")

    for i in range(n):
        t, t_next = grid.time(i), grid.time(i + 1)
        wi = w.increments[i]
        y_i, z_i, _ = uv[i]
        y_n, _, _ = uv[i + 1]
        g_i = g_dot(problem.g(t, X[:, i], y_i, z_i), wi)
        g_n = g_dot(problem.g(t_next, X[:, i + 1], y_n, uv[i + 1][1]), wi)
        g_half += 0.5 * (g_i + g_n)
        z_dx += z_i * ensemble.increments[:, i, 0]

    trap = 0.5 * dt * (f_path[:, 0] + f_path[:, -1] + 2 * f_path[:, 1:-1].sum(axis=1))
    trap_k = 0.5 * dt * (k_path[:, 0] + k_path[:, -1] + 2 * k_path[:, 1:-1].sum(axis=1))
    xi = np.asarray(problem.terminal(X[:, -1]), dtype=float)
    res = uv[0][0] - (xi - trap + g_half - z_dx + trap_k)
    return FeynmanKacReport(min_k=min_k, mean_k=mean_k / total,
                            frac_negative=n_neg / total,
                            mean_abs_residual=float(np.abs(res).mean()),
                            mean_residual=float(res.mean()))
