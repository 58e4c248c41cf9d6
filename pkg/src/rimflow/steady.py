"""Steady-state profiles: the cubic-algebraic branch and the full capillary equation.

With surface tension neglected the steady balance is pointwise algebraic,

    h - (mu/3) h^3 cos x = q,

solved per grid point on the branch that stays below the fold.  With surface
tension the profile solves the periodic ODE

    h - (mu/3) h^3 cos x + (chi/3) h^3 (h_x + h_xxx) = q,

discretized with the centered grid operators and solved by damped Newton,
either at fixed flux q or at fixed mass with q as the extra unknown.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .grid import TWO_PI, Grid, PeriodicField, d1, d3, diff_matrix, integrate

FLUX_BOUND_RATIO = 8.0 / 27.0


class BranchLost(RuntimeError):
    """Newton iterate left the positive cone; the branch has no solution there."""

    def __init__(self, message: str, min_h: float):
        super().__init__(message)
        self.min_h = min_h


class NoConvergence(RuntimeError):
    """Newton failed to reach tolerance within the iteration budget."""

    def __init__(self, message: str, residual_sup: float, iterations: int):
        super().__init__(message)
        self.residual_sup = residual_sup
        self.iterations = iterations


@dataclass(frozen=True)
class SteadyProfile:
    h: PeriodicField
    q: float
    mu: float
    chi: float
    residual_sup: float
    mass: float


@dataclass(frozen=True)
class ContinuationStep:
    """One continuation target: mode is "fixed_flux" (target = q) or "fixed_mass"."""

    mode: str
    target: float
    max_newton: int = 30
    tol: float = 1e-10

    def __post_init__(self) -> None:
        if self.mode not in ("fixed_flux", "fixed_mass"):
            raise ValueError(f"unknown continuation mode {self.mode!r}")
        if not (self.target > 0.0):
            raise ValueError("continuation target must be positive")
        if self.max_newton < 1 or not (self.tol > 0.0):
            raise ValueError("invalid Newton budget or tolerance")


def critical_flux(mu: float) -> float:
    """Largest flux for which the surface-tension-free profile exists: 2/(3 sqrt(mu))."""
    if not (mu > 0.0):
        raise ValueError(f"mu must be positive, got {mu}")
    return 2.0 / (3.0 * math.sqrt(mu))


def nonexistence_threshold(mu: float) -> float:
    """No positive capillary steady state exists for q above (2/3) sqrt(2/mu)."""
    if not (mu > 0.0):
        raise ValueError(f"mu must be positive, got {mu}")
    return (2.0 / 3.0) * math.sqrt(2.0 / mu)


def pukhnachov_bound(mu: float) -> float:
    """Earlier, weaker nonexistence threshold 2 sqrt(3/mu), kept for comparison."""
    if not (mu > 0.0):
        raise ValueError(f"mu must be positive, got {mu}")
    return 2.0 * math.sqrt(3.0 / mu)


def _require_full_period(grid: Grid) -> None:
    if abs(grid.length - TWO_PI) > 1e-9:
        raise ValueError("steady profiles are defined on a full period of length 2*pi")


def moffatt_roots(mu: float, q: float, x: float) -> list[float]:
    """Positive real roots of h - (mu/3) h^3 cos(x) = q at one angle, ascending.

    Near-degenerate pairs (the fold point) collapse to a single root.
    """
    if not (mu > 0.0 and q > 0.0):
        raise ValueError("mu and q must be positive")
    c = math.cos(x)
    if abs(c) < 1e-14:
        return [q]
    coeffs = [mu * c / 3.0, 0.0, -1.0, q]
    roots = np.roots(coeffs)
    out = []
    for z in roots:
        if abs(z.imag) > 1e-8 * max(1.0, abs(z)):
            continue
        h = float(z.real)
        if h <= 0.0:
            continue
        # One Newton polish on the cubic for full precision.
        for _ in range(2):
            val = (mu * c / 3.0) * h**3 - h + q
            der = mu * c * h**2 - 1.0
            if der != 0.0:
                h -= val / der
        if h > 0.0:
            out.append(h)
    out.sort()
    dedup: list[float] = []
    for h in out:
        if dedup and abs(h - dedup[-1]) <= 1e-6 * max(1.0, h):
            continue
        dedup.append(h)
    return dedup


def moffatt_profile(mu: float, q: float, grid: Grid) -> Optional[SteadyProfile]:
    """Pointwise branch below the fold; None when the fold is crossed somewhere.

    On the half-domain where cos x > 0 the selected root must satisfy
    mu cos(x) h^2 < 1 strictly; a double root (the fold itself) does not
    count as existence.
    """
    if not (mu > 0.0 and q > 0.0):
        raise ValueError("mu and q must be positive")
    _require_full_period(grid)
    h = np.empty(grid.n)
    for i, xi in enumerate(grid.x):
        c = math.cos(xi)
        roots = moffatt_roots(mu, q, float(xi))
        if not roots:
            return None
        if c > 1e-14:
            sub = [r for r in roots if mu * c * r * r < 1.0]
            if not sub:
                return None
            h[i] = sub[0]
        else:
            h[i] = roots[0]
    prof = PeriodicField(grid, h)
    resid = h - (mu / 3.0) * h**3 * np.cos(grid.x) - q
    return SteadyProfile(
        h=prof,
        q=q,
        mu=mu,
        chi=0.0,
        residual_sup=float(np.max(np.abs(resid))),
        mass=integrate(prof),
    )


def asymptotic_guess(q: float, grid: Grid) -> PeriodicField:
    """Small-flux expansion h = q + (q^3/3) cos x, a Newton starter for small q."""
    if not (q > 0.0):
        raise ValueError("q must be positive")
    _require_full_period(grid)
    return PeriodicField(grid, q + (q**3 / 3.0) * np.cos(grid.x))


def capillary_residual(prof: SteadyProfile, grid: Optional[Grid] = None) -> PeriodicField:
    """Pointwise residual of the capillary steady equation under the grid operators."""
    g = grid if grid is not None else prof.h.grid
    if not g.compatible(prof.h.grid):
        raise ValueError("profile grid and requested grid differ")
    h = prof.h
    hv = h.values
    cosx = np.cos(g.x)
    third = d3(h).values
    first = d1(h).values
    res = hv - (prof.mu / 3.0) * hv**3 * cosx + (prof.chi / 3.0) * hv**3 * (first + third) - prof.q
    return PeriodicField(g, res)


def _capillary_system(grid: Grid):
    L = (diff_matrix(grid, 1) + diff_matrix(grid, 3)).tocsr()
    cosx = np.cos(grid.x)
    return L, cosx


def _capillary_newton(
    h_init: np.ndarray,
    q_init: float,
    mu: float,
    chi: float,
    grid: Grid,
    step: ContinuationStep,
) -> tuple[np.ndarray, float, float, int]:
    """Damped Newton; returns (h, q, residual_sup, iterations) or raises."""
    L, cosx = _capillary_system(grid)
    n = grid.n
    dx = grid.dx
    fixed_mass = step.mode == "fixed_mass"
    u = h_init.copy()
    q = q_init if fixed_mass else step.target

    def residual(u, q):
        Lu = L @ u
        r = u - (mu / 3.0) * u**3 * cosx + (chi / 3.0) * u**3 * Lu - q
        if fixed_mass:
            return r, dx * float(np.sum(u)) - step.target
        return r, 0.0

    def sup_res(r, rm):
        return max(float(np.max(np.abs(r))), abs(rm))

    r, rm = residual(u, q)
    res = sup_res(r, rm)
    last_iter = 0
    for it in range(step.max_newton):
        last_iter = it
        if not math.isfinite(res):
            raise NoConvergence("Newton iterate diverged", residual_sup=res, iterations=it)
        if res <= step.tol:
            return u, q, res, it
        Lu = L @ u
        diag = 1.0 - mu * cosx * u**2 + chi * u**2 * Lu
        J = sp.diags(diag) + sp.diags((chi / 3.0) * u**3) @ L
        if fixed_mass:
            Jb = sp.bmat(
                [[J, -np.ones((n, 1))], [dx * np.ones((1, n)), None]], format="csc"
            )
            rhs = np.concatenate([r, [rm]])
            try:
                delta = -splu(Jb).solve(rhs)
            except RuntimeError:
                raise NoConvergence("singular Jacobian", residual_sup=res, iterations=it)
            du, dq = delta[:n], float(delta[n])
        else:
            try:
                du = -splu(J.tocsc()).solve(r)
            except RuntimeError:
                raise NoConvergence("singular Jacobian", residual_sup=res, iterations=it)
            dq = 0.0
        if not np.all(np.isfinite(du)):
            raise NoConvergence("Newton direction not finite", residual_sup=res, iterations=it)
        lam = 1.0
        for _ in range(5):
            u_try = u + lam * du
            q_try = q + lam * dq
            r_try, rm_try = residual(u_try, q_try)
            res_try = sup_res(r_try, rm_try) if np.all(np.isfinite(r_try)) else math.inf
            if res_try < res:
                break
            lam *= 0.5
        u, q, r, rm, res = u_try, q_try, r_try, rm_try, res_try
        if float(np.min(u)) <= 0.0:
            raise BranchLost(
                f"iterate turned nonpositive (min {float(np.min(u)):.3e})",
                min_h=float(np.min(u)),
            )
    if res <= step.tol:
        return u, q, res, last_iter
    raise NoConvergence(
        f"no convergence after {step.max_newton} iterations (residual {res:.3e})",
        residual_sup=res,
        iterations=step.max_newton,
    )


def capillary_solve(init: SteadyProfile, step: ContinuationStep) -> SteadyProfile:
    """Solve the capillary steady equation starting from init's profile.

    mode "fixed_flux" solves for h at q = target; "fixed_mass" solves for
    (h, q) with the mass constraint integrate(h) = target.
    """
    if not (init.chi > 0.0):
        raise ValueError("capillary solve needs chi > 0")
    grid = init.h.grid
    _require_full_period(grid)
    u, q, res, _ = _capillary_newton(
        init.h.values, init.q, init.mu, init.chi, grid, step
    )
    prof = PeriodicField(grid, u)
    return SteadyProfile(
        h=prof, q=q, mu=init.mu, chi=init.chi, residual_sup=res, mass=integrate(prof)
    )


@dataclass(frozen=True)
class SolvabilityReport:
    r0: float
    r1: float
    beta: float
    nonexistence_violated: bool


def solvability_residuals(prof: SteadyProfile) -> SolvabilityReport:
    """Integral identities any positive steady profile must satisfy.

    With y = h/q: the mean of 1/y^2 - 1/y^3 vanishes (r0) and its cos-weighted
    mean equals pi * beta with beta = q^2 mu / 3 (r1).  beta beyond 8/27 is
    flagged: no positive profile can satisfy the identities there.
    """
    grid = prof.h.grid
    _require_full_period(grid)
    hv = prof.h.values
    if float(np.min(hv)) <= 0.0:
        raise ValueError("solvability residuals need a strictly positive profile")
    if not (prof.q > 0.0):
        raise ValueError("profile flux must be positive")
    y = hv / prof.q
    f = 1.0 / y**2 - 1.0 / y**3
    dx = grid.dx
    beta = prof.q**2 * prof.mu / 3.0
    r0 = float(dx * np.sum(f))
    r1 = float(dx * np.sum(f * np.cos(grid.x))) - math.pi * beta
    return SolvabilityReport(
        r0=r0,
        r1=r1,
        beta=beta,
        nonexistence_violated=bool(beta > FLUX_BOUND_RATIO + 1e-12),
    )


def continue_branch(
    start: SteadyProfile, schedule: Sequence[ContinuationStep]
) -> list[SteadyProfile]:
    """Walk a continuation schedule, bisecting into the last gap when the branch ends.

    Returns the profiles actually obtained, starting with start.  Failure on
    the very first step propagates; a later failure triggers bisection of the
    parameter interval down to a relative increment of 2^-12, after which the
    deepest reachable profile is the recorded branch endpoint.
    """
    profiles = [start]
    for i, st in enumerate(schedule):
        cur = profiles[-1]
        try:
            profiles.append(capillary_solve(cur, st))
            continue
        except (BranchLost, NoConvergence):
            if i == 0:
                raise
        lo = cur.q if st.mode == "fixed_flux" else cur.mass
        hi = st.target
        min_inc = abs(hi - lo) / 4096.0
        while abs(hi - lo) > min_inc:
            mid = 0.5 * (lo + hi)
            trial = ContinuationStep(st.mode, mid, st.max_newton, st.tol)
            try:
                profiles.append(capillary_solve(profiles[-1], trial))
                lo = mid
            except (BranchLost, NoConvergence):
                hi = mid
        break
    return profiles


def write_branch_csv(profiles: Sequence[SteadyProfile], path) -> None:
    cols = ("step", "q", "mass", "min_h", "max_h", "residual_sup", "beta")
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for i, pr in enumerate(profiles):
            beta = pr.q**2 * pr.mu / 3.0
            row = (
                i,
                pr.q,
                pr.mass,
                float(np.min(pr.h.values)),
                float(np.max(pr.h.values)),
                pr.residual_sup,
                beta,
            )
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
