"""A priori constants and runtime-checkable bound monitors.

Every quantity here is an explicit closed form evaluated from the run inputs,
so each monitor compares a measured functional of the discrete solution
against a bound that was computable before the run started.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .grid import PeriodicField, d1, integrate
from .model import Params, entropy_G


@dataclass(frozen=True)
class DiagnosticsRecord:
    """Per-snapshot scalar diagnostics of an evolution run."""

    t: float
    mass: float
    l2: float
    h1: float
    min_h: float
    energy: float
    entropy0: float
    entropy_eps: float
    gradient_sq: float
    dissipation_cum: float
    alpha_entropy: Optional[float] = None


DIAGNOSTICS_COLUMNS = (
    "t",
    "mass",
    "l2",
    "h1",
    "min_h",
    "energy",
    "entropy0",
    "entropy_eps",
    "gradient_sq",
    "dissipation_cum",
)


def write_diagnostics_csv(records: Sequence[DiagnosticsRecord], path) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(DIAGNOSTICS_COLUMNS) + "\n")
        for r in records:
            fh.write(",".join(f"{getattr(r, c):.17g}" for c in DIAGNOSTICS_COLUMNS) + "\n")


@dataclass(frozen=True)
class BoundReport:
    """Outcome of one monitored inequality lhs <= rhs (+ tolerance)."""

    name: str
    lhs: float
    rhs: float
    satisfied: bool
    slack: float

    @classmethod
    def check(cls, name: str, lhs: float, rhs: float, tolerance: float = 0.0) -> "BoundReport":
        lhs = float(lhs)
        rhs = float(rhs)
        ok = bool(lhs <= rhs + tolerance) or (math.isinf(rhs) and rhs > 0)
        return cls(name=name, lhs=lhs, rhs=rhs, satisfied=ok, slack=rhs - lhs)


def write_reports_json(reports: Sequence[BoundReport], path) -> None:
    payload = [asdict(r) for r in reports]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


class BConstants(NamedTuple):
    b1: float
    b2: float
    b3: float
    b4: float
    b5: float


class CConstants(NamedTuple):
    c1: float
    c2: float
    c3: float
    c4: float
    c5: float
    c6: float
    c7: float
    c8: float
    c9: float


def b_constants(p: float, r: float, omega_length: float) -> BConstants:
    """Constants of the interpolation inequality chain for exponent pair (p, r).

    Requires p >= r >= 1 and a positive domain length.
    """
    if not (r >= 1.0 and p >= r):
        raise ValueError(f"need p >= r >= 1, got p={p}, r={r}")
    if not (omega_length > 0.0):
        raise ValueError("domain length must be positive")
    L = float(omega_length)
    b1 = L**p / (p * 2.0 ** (p - 1.0))
    a = (1.0 / r - 1.0 / p) / (1.0 / r + 0.5)
    b2 = (1.0 + r / 2.0) ** (a * p)
    if p <= 2.0:
        b3 = b1 * L ** ((2.0 - p) / p)
    else:
        b3 = b1 ** ((p + 2.0) / 2.0) * b2
    b4 = 2.0 ** (p - 1.0) * b3
    b5 = (2.0 / L) ** (p - 1.0)
    return BConstants(b1, b2, b3, b4, b5)


def c_constants(p: Params, mass: float, delta: float) -> CConstants:
    """Coefficient chain for the local-in-time gradient/entropy bound.

    The cubic nonlinearity enters through the (p, r) = (6, 2), (4, 2) and
    (3, 2) instances of the interpolation constants; mass is the conserved
    integral of the solution.
    """
    L = p.grid.length
    bb6 = b_constants(6.0, 2.0, L)
    bb4 = b_constants(4.0, 2.0, L)
    bb3 = b_constants(3.0, 2.0, L)
    sup_wp = p.w.sup_wp
    l2_wp = p.w.l2_wp
    c1 = bb4.b2**2 / 8.0 + bb6.b4 / 2.0
    c2 = mass**6 * bb6.b5 / 2.0
    c3 = p.a1**2 / (2.0 * p.a0) + delta * abs(p.a1)
    c4 = (p.a1**2 / p.a0) * c1
    c5 = (p.a2**2 / p.a0) * sup_wp**2 * bb3.b4
    c6 = (
        (p.a1**2 / p.a0) * c2
        + (p.a2**2 / p.a0) * sup_wp**2 * bb3.b5 * mass**3
        + delta * (p.a2**2 / p.a0) * l2_wp**2
    )
    c7 = c4 + c5 + c6
    c8 = abs(p.a1) + abs(p.a2) * l2_wp
    c9 = 2.0 * c3 * c8 / p.a0 + 2.0 * c7
    return CConstants(c1, c2, c3, c4, c5, c6, c7, c8, c9)


def local_existence_time(h: PeriodicField, p: Params) -> float:
    """Guaranteed existence horizon T = 9/(40 c9) * min(1, v0^-2).

    Here v0 = integral of h_x^2 + 2 (c3/a0) / (2h), evaluated at delta = 0.
    Returns math.inf when c9 vanishes (the bound degenerates to no constraint)
    and 0.0 when the field touches zero, where the entropy term is infinite.
    """
    cc = c_constants(p, integrate(h), delta=0.0)
    if cc.c9 == 0.0:
        return math.inf
    if float(np.min(h.values)) <= 0.0:
        return 0.0
    hx = d1(h).values
    v0 = float(h.grid.dx * np.sum(hx**2)) + 2.0 * (cc.c3 / p.a0) * integrate(
        h.with_values(0.5 / h.values)
    )
    return 9.0 / (40.0 * cc.c9) * min(1.0, v0**-2)


def interpolation_check(h: PeriodicField) -> BoundReport:
    """||h||_2^2 <= 6^(2/3) M^(4/3) (int h_x^2)^(1/3) + M^2/|domain| for h >= 0."""
    if float(np.min(h.values)) < 0.0:
        raise ValueError("interpolation bound applies to nonnegative fields")
    L = h.grid.length
    mass = integrate(h)
    hx = d1(h).values
    grad_sq = float(h.grid.dx * np.sum(hx**2))
    lhs = float(h.grid.dx * np.sum(h.values**2))
    rhs = 6.0 ** (2.0 / 3.0) * mass ** (4.0 / 3.0) * grad_sq ** (1.0 / 3.0) + mass**2 / L
    return BoundReport.check("interpolation", lhs, rhs, tolerance=1e-12 * max(1.0, abs(rhs)))


def k_constant(p: Params, k1: float, mass: float) -> float:
    """Linear-in-time energy production rate K = |a2 a3| ||w'||_inf (|domain|^2 sqrt(K1) + 2M)."""
    if k1 < 0.0:
        raise ValueError("K1 must be nonnegative")
    L = p.grid.length
    return abs(p.a2 * p.a3) * p.w.sup_wp * (L**2 * math.sqrt(k1) + 2.0 * mass)


def k3_constant(p: Params, mass: float) -> float:
    """Additive constant of the H1 growth bound; case split on the sign of a0 + a1."""
    base = abs(p.a2) * p.w.sup_w * mass
    s = p.a0 + p.a1
    if s <= 0.0:
        return base
    L = p.grid.length
    return base + mass**2 * (
        2.0 * math.sqrt(6.0) * s**1.5 / (3.0 * math.sqrt(p.a0)) + s / (2.0 * L)
    )


def h1_growth_bound(e0_initial: float, mass: float, t_horizon: float, p: Params, k1: float) -> float:
    """Upper bound for ||h(T)||_{H1}^2: (4/a0) (E(0) + K T + K3)."""
    if t_horizon < 0.0:
        raise ValueError("time horizon must be nonnegative")
    K = k_constant(p, k1, mass)
    return (4.0 / p.a0) * (e0_initial + K * t_horizon + k3_constant(p, mass))


def dissipation_check(traj, p: Params) -> BoundReport:
    """Energy plus cumulative dissipation stays below E(0) + K T.

    K is evaluated with the run's observed K1 (the largest value of the
    gradient/entropy/dissipation functional along the trajectory), so the
    check closes without any input beyond the trajectory itself.  The
    tolerance allows the quadrature and Newton-residual slack of the scheme.
    """
    first = traj.records[0]
    last = traj.records[-1]
    T = last.t - first.t
    K = k_constant(p, traj.k1_observed, first.mass) if math.isfinite(traj.k1_observed) else (
        0.0 if p.a2 * p.a3 == 0.0 else math.inf
    )
    lhs = last.energy + last.dissipation_cum
    rhs = first.energy + K * T
    scale = abs(first.energy) + abs(last.energy) + last.dissipation_cum + abs(rhs)
    tol = 1e-6 * max(1.0, scale) + traj.step_count * traj.newton_tol_effective
    return BoundReport.check("dissipation", lhs, rhs, tolerance=tol)


def gradient_bound_check(traj, p: Params) -> BoundReport:
    """Exponential-in-time gradient bound, evaluated in log space.

    ln(int h_x^2 (T)) <= ln(max(||w'||_2^2, int h0_x^2)) + B(T) with
    B(T) = 2 (a1^2 + a2^2)/a0 * integral of sup|h|^3 dt.  Working with
    logarithms keeps the comparison finite when B(T) is large.
    """
    first = traj.records[0]
    last = traj.records[-1]
    B = 2.0 * (p.a1**2 + p.a2**2) / p.a0 * traj.supcube_time_integral
    base = max(p.w.l2_wp**2, first.gradient_sq)
    lhs = math.log(last.gradient_sq) if last.gradient_sq > 0.0 else -math.inf
    rhs = (math.log(base) if base > 0.0 else -math.inf) + B
    return BoundReport.check("gradient_growth", lhs, rhs, tolerance=1e-9 * max(1.0, abs(rhs)))


def positivity_monitor(traj, zeta: PeriodicField) -> list[float]:
    """Per-snapshot values of integral zeta^4 / h; +inf where h touches zero under the window."""
    if float(np.min(zeta.values)) < 0.0:
        raise ValueError("window function zeta must be nonnegative")
    xi = zeta.values**4
    out = []
    for snap in traj.snapshots:
        h = snap.field
        if not h.grid.compatible(zeta.grid):
            raise ValueError("window and snapshot grids differ")
        hv = h.values
        active = xi > 0.0
        if np.any(hv[active] <= 0.0):
            out.append(math.inf)
        else:
            vals = np.zeros_like(hv)
            vals[active] = xi[active] / hv[active]
            out.append(float(h.grid.dx * np.sum(vals)))
    return out


def detect_period(series, tol: float = 1e-3) -> Optional[float]:
    """Estimate the period of a uniformly sampled scalar time series.

    Uses the unbiased autocorrelation and picks its first interior local
    maximum, refined by parabolic interpolation.  Returns None when the
    series has no significant oscillation (relative amplitude below tol)
    or no convincing repeat (normalized correlation peak below 0.5).
    """
    arr = np.asarray(series, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("series must be a sequence of (t, value) pairs")
    t, v = arr[:, 0], arr[:, 1]
    m = len(v)
    if m < 16:
        return None
    dts = np.diff(t)
    dt = float(np.mean(dts))
    if dt <= 0.0 or np.max(np.abs(dts - dt)) > 1e-6 * dt:
        raise ValueError("series must be uniformly sampled in time")
    amp = 0.5 * (np.max(v) - np.min(v))
    scale = max(np.max(np.abs(v)), 1e-300)
    if amp <= tol * scale:
        return None
    z = v - np.mean(v)
    full = np.correlate(z, z, mode="full")[m - 1 :]
    lags = np.arange(m)
    norm = full / (m - lags)
    norm /= norm[0]
    kmax = m // 2
    ac = norm[: kmax + 1]
    for k in range(1, kmax):
        if ac[k] >= ac[k - 1] and ac[k] >= ac[k + 1] and ac[k] >= 0.5:
            # Parabolic refinement around the discrete peak.
            denom = ac[k - 1] - 2.0 * ac[k] + ac[k + 1]
            shift = 0.0 if denom == 0.0 else 0.5 * (ac[k - 1] - ac[k + 1]) / denom
            return (k + shift) * dt
    return None


def count_local_maxima(h: PeriodicField, rel_prominence: float = 1e-3) -> list[int]:
    """Indices of periodic local maxima with prominence above rel_prominence * range.

    The prominence filter reads the profile at the resolution of its own
    dynamic range, so round-off ripples on flat regions do not count.
    """
    v = h.values
    rng = float(np.max(v) - np.min(v))
    if rng == 0.0:
        return []
    up = np.roll(v, -1)
    dn = np.roll(v, 1)
    cand = np.where((v >= up) & (v >= dn) & ((v > up) | (v > dn)))[0]
    out = []
    floor = np.min(v)
    for i in cand:
        if v[i] - floor >= rel_prominence * rng:
            out.append(int(i))
    # Merge plateau twins: keep one index per connected run of equal values.
    merged = []
    for i in out:
        if merged and (i - merged[-1]) == 1 and v[i] == v[merged[-1]]:
            continue
        merged.append(i)
    return merged
