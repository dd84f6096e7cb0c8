"""Nonlinearities: convex conjugation in the curvature slot and generator checks.

The Hamiltonian h(t, x, y, z, gamma) is conjugated over a finite curvature
grid to obtain F(t, x, y, z, a); conjugating back over a volatility grid
gives the effective (convex, nondecreasing) Hamiltonian actually solved.
A numeric code needs an explicit blow-up rule for the extended-real F: the
grid supremum is probed on geometrically extended curvature grids and a
+inf sentinel is returned once it keeps growing past a threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InvalidArgumentError
from .grids import VolatilityGrid

BLOWUP_THRESHOLD = 1.0e6
FD_STEP = 1.0e-5


@dataclass(frozen=True)
class HamiltonianSpec:
    """h(t, x, y, z, gamma) with a finite curvature grid (d = 1 scalars)."""

    h: Callable
    gamma_domain: np.ndarray
    monotone_convex: bool = True

    def __post_init__(self):
        dom = np.asarray(self.gamma_domain, dtype=float)
        if dom.size == 0:
            raise InvalidArgumentError("gamma_domain must be nonempty")
        if not np.any(np.isclose(dom, 0.0)):
            raise InvalidArgumentError("gamma_domain must contain 0")
        object.__setattr__(self, "gamma_domain", dom)


def fenchel_conjugate(spec: HamiltonianSpec, state, a: float,
                      blowup_threshold: float = BLOWUP_THRESHOLD) -> float:
    """sup over the curvature grid of (a*gamma/2 - h); +inf when unbounded.

    Unboundedness is detected by re-evaluating the supremum on curvature
    grids with geometrically extended span: if it keeps growing and exceeds
    the threshold on two successive extensions, the conjugate is treated as
    +inf at this (state, a).
    """
    if a <= 0:
        raise InvalidArgumentError("a must be positive definite")
    t, x, y, z = state
    gam = spec.gamma_domain
    vals = 0.5 * a * gam - spec.h(t, x, y, z, gam)
    best = float(np.max(vals))

    span = max(abs(gam[0]), abs(gam[-1]), 1.0)
    prev = best
    hits = 0
    for _ in range(12):
        span *= 4.0
        probe = np.linspace(-span, span, 129)
        v = float(np.max(0.5 * a * probe - spec.h(t, x, y, z, probe)))
        if v > blowup_threshold:
            hits += 1
            if hits >= 2:
                return math.inf
        if v <= prev * (1 + 1e-12) + 1e-12:
            break
        prev = v
    return best


def make_conjugate_map(spec: HamiltonianSpec,
                       blowup_threshold: float = BLOWUP_THRESHOLD) -> Callable:
    """Vectorized F(t, x, y, z, a) built by grid conjugation of h."""

    def F(t, x, y, z, a):
        x = np.asarray(x, dtype=float)
        y = np.broadcast_to(np.asarray(y, dtype=float), x.shape)
        z = np.broadcast_to(np.asarray(z, dtype=float), x.shape)
        out = np.empty(x.shape)
        for idx in np.ndindex(x.shape):
            out[idx] = fenchel_conjugate(
                spec, (t, x[idx], y[idx], z[idx]), a, blowup_threshold)
        return out

    return F


@dataclass(frozen=True)
class ConjugatePair:
    """Conjugate F and its a-grid biconjugate."""

    F: Callable
    domain: VolatilityGrid
    spec: Optional[HamiltonianSpec] = None

    def hhat(self, state, gamma):
        return biconjugate(self, state, gamma)


def biconjugate(pair: ConjugatePair, state, gamma) -> float:
    """sup over the volatility grid of (a*gamma/2 - F(state, a))."""
    if len(pair.domain) == 0:
        raise InvalidArgumentError("volatility grid must be nonempty")
    t, x, y, z = state
    best = -math.inf
    for a in pair.domain:
        fa = pair.F(t, np.atleast_1d(float(x)), float(y), float(z), float(a))
        fa = float(np.asarray(fa).reshape(-1)[0])
        if math.isinf(fa):
            continue
        best = max(best, 0.5 * float(a) * gamma - fa)
    if math.isinf(best):
        raise InvalidArgumentError("F is infinite on the entire volatility grid")
    return best


@dataclass(frozen=True)
class GeneratorConstants:
    C: float          # Lipschitz constant of F in (y, z)
    alpha: float      # z-contraction of g, in [0, 1)
    lam: float        # in [0, 1), pairs with alpha via (1 - lam) a >= alpha
    c: float = 1.0    # growth constant of g g^T
    beta: float = 0.0  # z z^T growth coefficient, in [0, 1)


@dataclass(frozen=True)
class GeneratorBundle:
    """The pair (g, f) actually fed to solvers, with declared constants."""

    g: Callable                      # (t, x, y, z) -> scalar or (..., l)
    constants: GeneratorConstants
    dy_g: Optional[Callable] = None  # analytic d/dy of g; finite differences otherwise
    fd_step: float = FD_STEP

    def dy_g_eval(self, t, x, y, z):
        if self.dy_g is not None:
            return np.asarray(self.dy_g(t, x, y, z), dtype=float)
        h = self.fd_step
        up = np.asarray(self.g(t, x, y + h, z), dtype=float)
        dn = np.asarray(self.g(t, x, y - h, z), dtype=float)
        return (up - dn) / (2.0 * h)


def g_dot(g_vals, w_inc):
    """Inner product of a generator value with a backward-driver increment.

    Scalar-valued g pairs with the first driver component; an explicit last
    axis of length l pairs componentwise.
    """
    g_vals = np.asarray(g_vals, dtype=float)
    w_inc = np.atleast_1d(np.asarray(w_inc, dtype=float))
    l = w_inc.shape[-1]
    if l == 1 or g_vals.ndim == 0 or g_vals.shape[-1] != l:
        return g_vals * w_inc[..., 0] if g_vals.ndim else float(g_vals) * w_inc[..., 0]
    return np.einsum("...l,l->...", g_vals, w_inc)


def stratonovich_correction(bundle: GeneratorBundle, F_val, t, x, y, z):
    """F + (1/2) sum_j g_j * d_y g_j at the given point."""
    gv = np.asarray(bundle.g(t, x, y, z), dtype=float)
    dgv = np.asarray(bundle.dy_g_eval(t, x, y, z), dtype=float)
    if gv.ndim and gv.shape == np.shape(x):
        corr = 0.5 * gv * dgv
    else:
        corr = 0.5 * np.sum(gv * dgv, axis=-1)
    return F_val + corr


@dataclass
class AssumptionCheck:
    name: str
    passed: bool
    worst_violation: float
    worst_sample: tuple = field(default=())


@dataclass
class AssumptionReport:
    checks: list[AssumptionCheck]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def validate_assumptions(bundle: GeneratorBundle, pair: Optional[ConjugatePair],
                         volgrid: VolatilityGrid, n_samples: int = 200,
                         seed: int = 0) -> AssumptionReport:
    """Sampled pass/fail report for the structural generator conditions.

    Report-only: each check carries the worst violating sample.  Sampling
    can refute but not certify the conditions.
    """
    if n_samples < 1:
        raise InvalidArgumentError("n_samples must be >= 1")
    rs = np.random.default_rng(seed)
    cst = bundle.constants
    checks = []

    # g contraction: ||g(y,z) - g(y',z')||^2 <= C|y-y'|^2 + alpha||z-z'||^2
    worst = -math.inf
    worst_at = ()
    for _ in range(n_samples):
        t = rs.uniform(0, 1)
        x = rs.normal()
        y1, y2 = rs.normal(size=2) * 2
        z1, z2 = rs.normal(size=2) * 2
        dg = np.asarray(bundle.g(t, x, y1, z1)) - np.asarray(bundle.g(t, x, y2, z2))
        lhs = float(np.sum(dg**2))
        rhs = cst.C * (y1 - y2) ** 2 + cst.alpha * (z1 - z2) ** 2
        v = lhs - rhs
        if v > worst:
            worst, worst_at = v, (t, x, y1, y2, z1, z2)
    checks.append(AssumptionCheck("g_contraction", worst <= 1e-10 * (1 + abs(cst.C)),
                                  worst, worst_at))

    # z-contraction coefficient must stay below 1 for the fixed point to close
    checks.append(AssumptionCheck("alpha_below_one", cst.alpha < 1.0,
                                  cst.alpha - 1.0, (cst.alpha,)))

    # (1 - lam) a >= alpha for every admissible volatility
    margin = (1.0 - cst.lam) * volgrid.a_low - cst.alpha
    checks.append(AssumptionCheck("ellipticity", margin >= 0.0, -margin,
                                  (volgrid.a_low,)))

    # growth: g g^T <= c (1 + y^2) + beta z z^T sampled pointwise
    worst = -math.inf
    worst_at = ()
    for _ in range(n_samples):
        t = rs.uniform(0, 1)
        x = rs.normal() * 2
        y = rs.normal() * 3
        z = rs.normal() * 3
        gv = np.asarray(bundle.g(t, x, y, z))
        v = float(np.sum(gv**2)) - (cst.c * (1 + y * y) + cst.beta * z * z)
        if v > worst:
            worst, worst_at = v, (t, x, y, z)
    checks.append(AssumptionCheck("g_growth", worst <= 1e-10 * (1 + cst.c),
                                  worst, worst_at))

    # F Lipschitz in (y, a^{1/2} z) when a conjugate map is supplied
    if pair is not None:
        worst = -math.inf
        worst_at = ()
        for _ in range(n_samples):
            t = rs.uniform(0, 1)
            x = rs.normal()
            y1, y2 = rs.normal(size=2) * 2
            z1, z2 = rs.normal(size=2) * 2
            a = float(rs.choice(volgrid.a_values))
            f1 = float(np.asarray(pair.F(t, np.atleast_1d(x), y1, z1, a)).reshape(-1)[0])
            f2 = float(np.asarray(pair.F(t, np.atleast_1d(x), y2, z2, a)).reshape(-1)[0])
            if math.isinf(f1) or math.isinf(f2):
                continue
            v = abs(f1 - f2) - cst.C * (abs(y1 - y2) + math.sqrt(a) * abs(z1 - z2))
            if v > worst:
                worst, worst_at = v, (t, x, y1, y2, z1, z2, a)
        checks.append(AssumptionCheck("F_lipschitz", worst <= 1e-8 * (1 + cst.C),
                                      worst, worst_at))

    return AssumptionReport(checks)
