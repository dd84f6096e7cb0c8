"""Independent ground truth: closed forms, a finite-difference solver, and
a numerical witness of the mixed forward/backward product formula.

These never share code paths with the probabilistic solvers they check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import (
    InvalidArgumentError,
    StabilityError,
    UnsupportedOracleError,
)
from .grids import BackwardPath, PathEnsemble, TimeGrid

_DOUBLE_FACTORIAL = {0: 1.0, 2: 1.0, 4: 3.0, 6: 15.0, 8: 105.0}


def heat_semigroup(phi, a: float, tau: float, quad_nodes: int = 64) -> Callable:
    """x -> E[phi(x + sqrt(a tau) N)] with N standard normal.

    phi given as ascending polynomial coefficients uses exact Gaussian
    moments; a callable phi is integrated by Gauss-Hermite quadrature.
    """
    if tau < 0:
        raise InvalidArgumentError("tau must be nonnegative")
    sig2 = a * tau

    if not callable(phi):
        coeffs = np.asarray(phi, dtype=float)
        deg = len(coeffs) - 1
        out = np.zeros_like(coeffs)
        for k in range(deg + 1):
            for j in range(0, k + 1, 2):
                mom = _DOUBLE_FACTORIAL.get(j)
                if mom is None:
                    mom = float(np.prod(np.arange(j - 1, 0, -2)))
                out[k - j] += coeffs[k] * math.comb(k, j) * mom * sig2 ** (j // 2)

        def poly_value(x):
            return np.polynomial.polynomial.polyval(np.asarray(x, dtype=float), out)

        return poly_value

    nodes, weights = np.polynomial.hermite.hermgauss(quad_nodes)
    weights = weights / math.sqrt(math.pi)
    shift = math.sqrt(2.0 * sig2)

    def quad_value(x):
        x = np.asarray(x, dtype=float)
        return np.sum(weights * phi(x[..., None] + shift * nodes), axis=-1)

    return quad_value


def fit_quadratic(phi: Callable, center: float, half_width: float,
                  n_probe: int = 41, tol: float = 1e-9):
    """Exact quadratic coefficients of phi, or raise if phi is not quadratic.

    Mixed curvature signs on the probe grid also raise: the uncertain
    volatility value has no single-regime closed form there.
    """
    xs = np.linspace(center - half_width, center + half_width, n_probe)
    vals = np.asarray(phi(xs), dtype=float)
    scale = 1.0 + float(np.max(np.abs(vals)))
    d2 = np.diff(vals, 2)
    if np.any(d2 > tol * scale) and np.any(d2 < -tol * scale):
        raise UnsupportedOracleError("terminal data has mixed curvature; use the FD oracle")
    c = np.polynomial.polynomial.polyfit(xs, vals, 2)
    resid = np.max(np.abs(np.polynomial.polynomial.polyval(xs, c) - vals))
    if resid > 1e-8 * scale:
        raise UnsupportedOracleError("terminal data is not quadratic; use the FD oracle")
    return c  # ascending: c0 + c1 x + c2 x^2


def bsb_closed_form(phi: Callable, a_low: float, a_high: float, horizon: float,
                    t: float, x) -> np.ndarray:
    """Uncertain-volatility value for single-signed quadratic terminal data.

    Convex data propagates under the high volatility, concave under the low
    one; zero curvature makes the choice irrelevant.
    """
    half_width = 6.0 * math.sqrt(a_high * max(horizon, 1e-12)) + 1.0
    c0, c1, c2 = fit_quadratic(phi, float(np.mean(np.atleast_1d(x))), half_width)
    a_eff = a_high if c2 > 0 else a_low
    x = np.asarray(x, dtype=float)
    return c2 * (x**2 + a_eff * (horizon - t)) + c1 * x + c0


def linear_spde_closed_form(beta: float, phi, w: BackwardPath, t: float, x):
    """Value of the semilinear family with multiplicative backward noise.

    The noise-removing flow is the exponential scale exp(beta (W_T - W_t));
    what remains is the unit-volatility heat semigroup.
    """
    grid = w.grid
    i = int(round((t - grid.t0) / grid.dt))
    if abs(grid.time(i) - t) > 1e-9 * (1 + abs(t)):
        raise InvalidArgumentError("t must be a grid node of the frozen path")
    scale = math.exp(beta * float(w.tail_increment(i)[0]))
    return scale * heat_semigroup(phi, 1.0, grid.horizon - t)(x)


@dataclass(frozen=True)
class RandomPdeProblem:
    """Backward PDE with frozen-path coefficients, for the FD oracle."""

    hhat_tilde: Callable               # (t, x, y, z, gamma) -> array
    terminal: Callable
    x_domain: tuple
    w: Optional[BackwardPath] = None
    boundary: Optional[Callable] = None  # (t, x) -> value; None = linear extrapolation

    def parabolicity_report(self, n_samples: int = 100, seed: int = 0) -> float:
        """Worst decrease of hhat_tilde along sampled curvature lines (>= 0 wanted)."""
        rs = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(n_samples):
            t = rs.uniform(0, 1)
            x = rs.uniform(*self.x_domain)
            y, z = rs.normal(size=2)
            gam = np.sort(rs.normal(size=2) * 3)
            lo = float(np.asarray(self.hhat_tilde(t, np.atleast_1d(x), y, z, gam[0])).reshape(-1)[0])
            hi = float(np.asarray(self.hhat_tilde(t, np.atleast_1d(x), y, z, gam[1])).reshape(-1)[0])
            worst = min(worst, hi - lo)
        return worst


def fd_random_pde(problem: RandomPdeProblem, grid: TimeGrid, x_steps: int,
                  z_probe: float = 1e-6, gamma_probe: float = 1e-4):
    """Explicit backward finite differences, upwinded first derivative.

    Returns (xs, v) with v of shape (n_steps + 1, x_steps + 1).  The
    curvature sensitivity is probed on the terminal data to enforce the
    parabolic stability bound before stepping.
    """
    lo, hi = problem.x_domain
    xs = np.linspace(lo, hi, x_steps + 1)
    dx = xs[1] - xs[0]
    n, dt = grid.n_steps, grid.dt

    v = np.empty((n + 1, len(xs)))
    v[n] = np.asarray(problem.terminal(xs), dtype=float)

    # stability probe: dt * 2 * dh/dgamma <= dx^2
    vt = v[n]
    d2 = (vt[2:] - 2 * vt[1:-1] + vt[:-2]) / dx**2
    d1 = (vt[2:] - vt[:-2]) / (2 * dx)
    t_T = grid.horizon
    h_up = np.asarray(problem.hhat_tilde(t_T, xs[1:-1], vt[1:-1], d1, d2 + gamma_probe))
    h_dn = np.asarray(problem.hhat_tilde(t_T, xs[1:-1], vt[1:-1], d1, d2 - gamma_probe))
    diffusivity = float(np.max((h_up - h_dn) / (2 * gamma_probe)))
    if diffusivity > 0 and dt * 2.0 * diffusivity > dx**2:
        raise StabilityError(
            f"explicit step unstable: dt = {dt:.3g} exceeds dx^2 / (2 D) with D = {diffusivity:.3g}",
            suggested_dt=0.9 * dx**2 / (2.0 * diffusivity))

    for i in range(n - 1, -1, -1):
        t_next = grid.time(i + 1)
        cur = v[i + 1]
        inner = slice(1, -1)
        d2 = (cur[2:] - 2 * cur[1:-1] + cur[:-2]) / dx**2
        fwd = (cur[2:] - cur[1:-1]) / dx
        bwd = (cur[1:-1] - cur[:-2]) / dx
        ctr = 0.5 * (fwd + bwd)
        h_zp = np.asarray(problem.hhat_tilde(t_next, xs[inner], cur[inner], ctr + z_probe, d2))
        h_zm = np.asarray(problem.hhat_tilde(t_next, xs[inner], cur[inner], ctr - z_probe, d2))
        dz = np.where(h_zp - h_zm >= 0, fwd, bwd)  # monotone upwind choice
        v[i, inner] = cur[inner] + dt * np.asarray(
            problem.hhat_tilde(t_next, xs[inner], cur[inner], dz, d2), dtype=float)
        if problem.boundary is not None:
            t_i = grid.time(i)
            v[i, 0] = problem.boundary(t_i, xs[0])
            v[i, -1] = problem.boundary(t_i, xs[-1])
        else:
            v[i, 0] = 2 * v[i, 1] - v[i, 2]
            v[i, -1] = 2 * v[i, -2] - v[i, -3]
    return xs, v


@dataclass(frozen=True)
class ItoProcess:
    """Semimartingale components for the product-formula check.

    Callables take (t, b, w_val) with b the per-path forward states and
    w_val the frozen backward value at t; missing components are zero.
    k is a deterministic bounded-variation path sampled at grid nodes.
    """

    x0: float = 0.0
    alpha: Optional[Callable] = None
    beta: Optional[Callable] = None
    gamma: Optional[Callable] = None
    k: Optional[np.ndarray] = None

    def _eval(self, fn, t, b, w_val, n_paths):
        if fn is None:
            return np.zeros(n_paths)
        return np.broadcast_to(np.asarray(fn(t, b, w_val), dtype=float), (n_paths,)).copy()


@dataclass
class ItoProductReport:
    mean_abs_residual: float
    mean_residual: float
    bracket_sign: float


def ito_product_check(p1: ItoProcess, p2: ItoProcess, ensemble: PathEnsemble,
                      w: BackwardPath, flip_backward_bracket: bool = False) -> ItoProductReport:
    """Simulate both sides of the mixed product formula.

    The ds-bracket carries a^{1/2} beta^1 . a^{1/2} beta^2 from the forward
    driver and MINUS gamma^1 . gamma^2 from the backward one; flipping that
    sign (the control experiment) must break convergence.
    """
    grid = ensemble.grid
    n, dt = grid.n_steps, grid.dt
    N = ensemble.n_paths
    B = ensemble.states[:, :, 0]
    dB_raw = np.diff(B, axis=1)
    a_const = float(np.asarray(ensemble.control).reshape(-1)[0])
    sign = +1.0 if flip_backward_bracket else -1.0

    def build(p):
        X = np.empty((N, n + 1))
        X[:, 0] = p.x0
        for i in range(n):
            t_i, t_next = grid.time(i), grid.time(i + 1)
            al = p._eval(p.alpha, t_i, B[:, i], w.values[i, 0], N)
            be = p._eval(p.beta, t_i, B[:, i], w.values[i, 0], N)
            ga = p._eval(p.gamma, t_next, B[:, i + 1], w.values[i + 1, 0], N)
            dk = (p.k[i + 1] - p.k[i]) if p.k is not None else 0.0
            X[:, i + 1] = (X[:, i] + al * dt + be * dB_raw[:, i]
                           + ga * (w.values[i + 1, 0] - w.values[i, 0]) + dk)
        return X

    X1, X2 = build(p1), build(p2)
    lhs = X1[:, -1] * X2[:, -1] - X1[:, 0] * X2[:, 0]

    rhs = np.zeros(N)
    for i in range(n):
        t_i, t_next = grid.time(i), grid.time(i + 1)
        dw = w.values[i + 1, 0] - w.values[i, 0]
        al1 = p1._eval(p1.alpha, t_i, B[:, i], w.values[i, 0], N)
        al2 = p2._eval(p2.alpha, t_i, B[:, i], w.values[i, 0], N)
        be1 = p1._eval(p1.beta, t_i, B[:, i], w.values[i, 0], N)
        be2 = p2._eval(p2.beta, t_i, B[:, i], w.values[i, 0], N)
        ga1 = p1._eval(p1.gamma, t_next, B[:, i + 1], w.values[i + 1, 0], N)
        ga2 = p2._eval(p2.gamma, t_next, B[:, i + 1], w.values[i + 1, 0], N)
        rhs += (a_const * be1 * be2 + sign * ga1 * ga2
                + al1 * X2[:, i] + al2 * X1[:, i]) * dt
        rhs += (X2[:, i] * be1 + X1[:, i] * be2) * dB_raw[:, i]
        rhs += (X1[:, i + 1] * ga2 + X2[:, i + 1] * ga1) * dw
        if p2.k is not None:
            rhs += X1[:, i] * (p2.k[i + 1] - p2.k[i])
        if p1.k is not None:
            rhs += X2[:, i] * (p1.k[i + 1] - p1.k[i])

    res = lhs - rhs
    return ItoProductReport(mean_abs_residual=float(np.abs(res).mean()),
                            mean_residual=float(res.mean()),
                            bracket_sign=sign)
