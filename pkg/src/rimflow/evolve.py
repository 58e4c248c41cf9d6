"""Conservative implicit time integrator for the regularized film equation.

Space is discretized in flux form on the periodic grid: the interface flux

    F_{i+1/2} = f_de(h_{i+1/2}) (a0 (h_xxx)_{i+1/2} + a1 (h_x)_{i+1/2}
                + a2 w'(x_{i+1/2})) + a3 h_{i+1/2}

uses the arithmetic interface mean for h_{i+1/2}, the compact difference
(h_{i+1} - h_i)/dx for the interface gradient, and the difference of the
centered second derivative for the interface third derivative.  The update
dh_i/dt = -(F_{i+1/2} - F_{i-1/2})/dx telescopes, so the discrete mass is
conserved identically.

Time stepping is backward Euler (L-stable, first order) with an analytic
pentadiagonal-plus-corners Jacobian solved by sparse LU, Newton damping on
residual growth, and adaptive step control: grow by 1.2x on success up to
dt_max, halve on failure, fail the run when dt underflows dt_min.  There is
no positivity clamp; a step whose minimum undershoots -10x the Newton
tolerance is rejected instead.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .bounds import DiagnosticsRecord
from .grid import Grid, PeriodicField
from .model import (
    Params,
    RegularizationKnobs,
    energy,
    entropy_G,
    mobility,
    mobility_derivative,
)

DT_GROWTH = 1.2
MAX_DAMPINGS = 4
STEADY_RATE = 1e-9
STEADY_RUN_LENGTH = 10
# No double-precision vector can push the residual of the implicit system
# below roughly ||J||_inf * machine_eps * ||u||: one ulp of u already moves
# the stiff flux divergence by that much.  The Newton tolerance is therefore
# floored at a small multiple of this representable limit; the configured
# tolerance applies whenever it is attainable.
NEWTON_FLOOR_SAFETY = 4.0
_MACH_EPS = float(np.finfo(float).eps)


@dataclass(frozen=True)
class EvolveConfig:
    t_end: float
    dt_init: float = 1e-6
    dt_min: float = 1e-13
    dt_max: float = 0.1
    newton_tol: float = 1e-10
    newton_max_iter: int = 12
    snapshot_times: Optional[Sequence[float]] = None
    knobs: RegularizationKnobs = field(default_factory=RegularizationKnobs)
    positivity_floor: float = 0.0
    alpha: Optional[float] = None

    def __post_init__(self) -> None:
        if not (self.t_end > 0.0):
            raise ValueError(f"t_end must be positive, got {self.t_end}")
        if not (0.0 < self.dt_min <= self.dt_init <= self.dt_max):
            raise ValueError(
                f"need 0 < dt_min <= dt_init <= dt_max, got "
                f"({self.dt_min}, {self.dt_init}, {self.dt_max})"
            )
        if not (self.newton_tol > 0.0):
            raise ValueError("newton_tol must be positive")
        if self.newton_max_iter < 1:
            raise ValueError("newton_max_iter must be at least 1")
        if self.positivity_floor < 0.0:
            raise ValueError("positivity_floor must be nonnegative")


@dataclass(frozen=True)
class EvolveState:
    t: float
    h: PeriodicField
    dt: float
    step_count: int = 0
    newton_iters_last: int = 0


class StepFailure(RuntimeError):
    """Raised when the step size underflows dt_min without Newton convergence."""

    def __init__(self, message: str, residual_sup: float, t: float, dt: float, diverged: bool = False):
        super().__init__(message)
        self.residual_sup = residual_sup
        self.t = t
        self.dt = dt
        self.diverged = diverged
        self.trajectory = None


@dataclass(frozen=True)
class Snapshot:
    t: float
    field: PeriodicField
    record: DiagnosticsRecord


@dataclass
class StepLog:
    """Per accepted step scalars, appended during the run."""

    t: list = field(default_factory=list)
    dt: list = field(default_factory=list)
    energy: list = field(default_factory=list)
    mass: list = field(default_factory=list)
    min_h: list = field(default_factory=list)
    sup_h: list = field(default_factory=list)
    sup_rate: list = field(default_factory=list)
    newton_iters: list = field(default_factory=list)

    def as_arrays(self) -> dict:
        return {k: np.asarray(getattr(self, k)) for k in
                ("t", "dt", "energy", "mass", "min_h", "sup_h", "sup_rate", "newton_iters")}


@dataclass
class Trajectory:
    snapshots: list
    termination: str
    config: EvolveConfig
    step_log: StepLog
    k1_observed: float
    supcube_time_integral: float
    dissipation3_cum: float
    undershoots: list
    floor_events: list
    final_state: Optional[EvolveState]

    @property
    def records(self) -> list:
        return [s.record for s in self.snapshots]

    @property
    def fields(self) -> list:
        return [s.field for s in self.snapshots]

    @property
    def step_count(self) -> int:
        return len(self.step_log.t)

    @property
    def newton_tol_effective(self) -> float:
        sup_h = max(self.step_log.sup_h, default=1.0)
        return self.config.newton_tol * max(1.0, sup_h)


def initial_lift(h0: PeriodicField, knobs: RegularizationKnobs) -> PeriodicField:
    """Shift nonnegative initial data up by eps^theta so the run starts strictly positive."""
    if float(np.min(h0.values)) < 0.0:
        raise ValueError("initial data must be nonnegative")
    lift = knobs.epsilon**knobs.theta if knobs.epsilon > 0.0 else 0.0
    return h0.with_values(h0.values + lift)


class _System:
    """Discrete flux, divergence, and Jacobian for a fixed (grid, params, knobs)."""

    def __init__(self, grid: Grid, params: Params, knobs: RegularizationKnobs):
        if not grid.compatible(params.grid):
            raise ValueError("state grid and forcing grid differ")
        self.grid = grid
        self.params = params
        self.knobs = knobs
        self.dx = grid.dx
        self.wp_mid = params.w.wp_mid()
        n = grid.n
        idx = np.arange(n)
        self._rows = np.tile(idx, 5)
        self._cols = np.concatenate([(idx + off) % n for off in (-2, -1, 0, 1, 2)])
        self._shape = (n, n)

    def interface_values(self, u: np.ndarray):
        dx = self.dx
        up1 = np.roll(u, -1)
        up2 = np.roll(u, -2)
        um1 = np.roll(u, 1)
        m = 0.5 * (u + up1)
        t1 = (up1 - u) / dx
        t3 = (up2 - 3.0 * up1 + 3.0 * u - um1) / dx**3
        return m, t1, t3

    def interface_flux(self, u: np.ndarray) -> np.ndarray:
        p = self.params
        m, t1, t3 = self.interface_values(u)
        g = p.a0 * t3 + p.a1 * t1 + p.a2 * self.wp_mid
        return mobility(m, self.knobs) * g + p.a3 * m

    def divergence(self, u: np.ndarray) -> np.ndarray:
        F = self.interface_flux(u)
        return (F - np.roll(F, 1)) / self.dx

    def residual(self, u: np.ndarray, hold: np.ndarray, dt: float) -> np.ndarray:
        return u - hold + dt * self.divergence(u)

    def jacobian(self, u: np.ndarray, dt: float) -> sp.csc_matrix:
        p = self.params
        dx = self.dx
        m, t1, t3 = self.interface_values(u)
        g = p.a0 * t3 + p.a1 * t1 + p.a2 * self.wp_mid
        f = mobility(m, self.knobs)
        fp = mobility_derivative(m, self.knobs)
        half_fp_g = 0.5 * fp * g
        A = f * (-p.a0 / dx**3)
        B = half_fp_g + f * (3.0 * p.a0 / dx**3 - p.a1 / dx) + 0.5 * p.a3
        C = half_fp_g + f * (-3.0 * p.a0 / dx**3 + p.a1 / dx) + 0.5 * p.a3
        D = f * (p.a0 / dx**3)
        s = dt / dx
        n = self.grid.n
        diag_m2 = -s * np.roll(A, 1)
        diag_m1 = s * (A - np.roll(B, 1))
        diag_0 = 1.0 + s * (B - np.roll(C, 1))
        diag_p1 = s * (C - np.roll(D, 1))
        diag_p2 = s * D
        data = np.concatenate([diag_m2, diag_m1, diag_0, diag_p1, diag_p2])
        return sp.csc_matrix((data, (self._rows, self._cols)), shape=self._shape)


def flux(h: PeriodicField, p: Params, knobs: RegularizationKnobs) -> PeriodicField:
    """Interface flux as a field on the half-shifted grid (entry k lives at x_{k+1/2})."""
    sysm = _System(h.grid, p, knobs)
    g = h.grid
    mid_grid = Grid(g.n, g.length, g.origin + 0.5 * g.dx)
    return PeriodicField(mid_grid, sysm.interface_flux(h.values))


def _newton(sysm: _System, hold: np.ndarray, dt: float, tol: float, max_iter: int):
    """Damped Newton for the backward Euler system.

    Returns (u, iters, ok, res_sup, diverged, tol_used) where tol_used is the
    configured tolerance raised, if necessary, to the representable residual
    floor of the current Jacobian.
    """
    n = hold.size
    u = hold.copy()
    r = sysm.residual(u, hold, dt)
    res = float(np.max(np.abs(r)))
    tol_used = tol
    for it in range(max_iter):
        if not math.isfinite(res):
            return u, it, False, res, True, tol_used
        if res <= tol_used:
            return u, it, True, res, False, tol_used
        J = sysm.jacobian(u, dt)
        row_norm = float(np.max(np.abs(J).sum(axis=1)))
        floor = NEWTON_FLOOR_SAFETY * _MACH_EPS * row_norm * max(1.0, float(np.max(np.abs(u))))
        tol_used = max(tol, floor)
        try:
            du = -splu(J).solve(r)
        except RuntimeError:
            return u, it, False, res, True, tol_used
        if not np.all(np.isfinite(du)):
            return u, it, False, res, True, tol_used
        # Project out the mass defect: the flux divergence has zero column
        # sums, so the exact Newton direction keeps sum(u + du - hold) at
        # zero; this removes the linear solver's rounding along that mode.
        du -= np.sum((u - hold) + du) / n
        lam = 1.0
        u_try = u + du
        r_try = sysm.residual(u_try, hold, dt)
        res_try = float(np.max(np.abs(r_try))) if np.all(np.isfinite(r_try)) else math.inf
        dampings = 0
        while res_try >= res and dampings < MAX_DAMPINGS:
            lam *= 0.5
            dampings += 1
            u_try = u + lam * du
            r_try = sysm.residual(u_try, hold, dt)
            res_try = float(np.max(np.abs(r_try))) if np.all(np.isfinite(r_try)) else math.inf
        u, r, res = u_try, r_try, res_try
    ok = res <= tol_used
    return u, max_iter, ok, res, False, tol_used


def step(state: EvolveState, p: Params, cfg: EvolveConfig, _system: Optional[_System] = None) -> EvolveState:
    """One adaptive backward Euler step from state.t using trial size state.dt.

    Halves dt on Newton failure or on a positivity undershoot beyond
    -10x the effective Newton tolerance; raises StepFailure when dt would
    drop below dt_min.  On success the returned state carries the grown
    trial size min(1.2 dt, dt_max) for the next attempt.
    """
    sysm = _system if _system is not None else _System(state.h.grid, p, cfg.knobs)
    hold = state.h.values
    tol = cfg.newton_tol * max(1.0, float(np.max(np.abs(hold))))
    dt = state.dt
    if not (dt > 0.0):
        raise ValueError("step size must be positive")
    last_res = math.nan
    diverged = False
    while True:
        u, iters, ok, res, diverged, tol_used = _newton(sysm, hold, dt, tol, cfg.newton_max_iter)
        if ok and float(np.min(u)) >= -10.0 * tol_used:
            break
        last_res = res
        dt *= 0.5
        if dt < cfg.dt_min:
            raise StepFailure(
                f"step size underflow below dt_min={cfg.dt_min} at t={state.t}"
                + (" (diverged Newton iterate)" if diverged else ""),
                residual_sup=last_res,
                t=state.t,
                dt=dt,
                diverged=diverged,
            )
    return EvolveState(
        t=state.t + dt,
        h=state.h.with_values(u),
        dt=min(dt * DT_GROWTH, cfg.dt_max),
        step_count=state.step_count + 1,
        newton_iters_last=iters,
    )


def _record(h: PeriodicField, t: float, p: Params, cfg: EvolveConfig, diss_cum: float) -> DiagnosticsRecord:
    from .grid import norms as field_norms
    from .model import alpha_entropy as alpha_density, entropy_integral

    nm = field_norms(h)
    dx = h.grid.dx
    hx = (np.roll(h.values, -1) - np.roll(h.values, 1)) / (2.0 * dx)
    grad_sq = float(dx * np.sum(hx**2))
    min_h = nm.min
    if min_h > 0.0:
        entropy0 = float(dx * np.sum(0.5 / h.values))
        entropy_eps = entropy0 + (
            float(dx * np.sum(cfg.knobs.epsilon / (6.0 * h.values**2)))
            if cfg.knobs.epsilon > 0.0
            else 0.0
        )
        alpha_val = (
            float(dx * np.sum(alpha_density(h.values, cfg.knobs.epsilon, cfg.alpha)))
            if cfg.alpha is not None
            else None
        )
    else:
        entropy0 = math.inf
        entropy_eps = math.inf
        alpha_val = math.inf if cfg.alpha is not None else None
    return DiagnosticsRecord(
        t=t,
        mass=float(dx * np.sum(h.values)),
        l2=nm.l2,
        h1=nm.h1,
        min_h=min_h,
        energy=energy(h, p),
        entropy0=entropy0,
        entropy_eps=entropy_eps,
        gradient_sq=grad_sq,
        dissipation_cum=diss_cum,
        alpha_entropy=alpha_val,
    )


def run(h0: PeriodicField, p: Params, cfg: EvolveConfig) -> Trajectory:
    """Integrate lifted initial data to t_end, recording snapshots and monitors.

    Stops early with termination "steady" once sup|dh/dt| stays below 1e-9
    for 10 consecutive accepted steps.  A StepFailure raised by the stepper
    propagates with the partial trajectory attached to the exception.
    """
    h = initial_lift(h0, cfg.knobs)
    sysm = _System(h.grid, p, cfg.knobs)
    dx = h.grid.dx
    a_ratio = p.a1 / p.a0

    if cfg.snapshot_times is None:
        snap_times = [cfg.t_end]
    else:
        snap_times = sorted({float(t) for t in cfg.snapshot_times if 0.0 < t <= cfg.t_end})
        if not snap_times or snap_times[-1] < cfg.t_end:
            snap_times.append(cfg.t_end)

    diss_cum = 0.0
    diss3_cum = 0.0
    supcube_int = 0.0
    k1_obs = -math.inf
    log = StepLog()
    undershoots: list = []
    floor_events: list = []
    snapshots = [Snapshot(0.0, h, _record(h, 0.0, p, cfg, diss_cum))]

    def k1_current(hv: np.ndarray) -> float:
        gx = (np.roll(hv, -1) - hv) / dx
        grad = float(dx * np.sum(gx**2))
        if float(np.min(hv)) <= 0.0:
            return math.inf
        ent = float(dx * np.sum(entropy_G(hv, cfg.knobs.epsilon)))
        return grad + a_ratio * (a_ratio + 2.0 * cfg.knobs.delta) * ent + p.a0 * diss3_cum

    k1_obs = max(k1_obs, k1_current(h.values))

    state = EvolveState(t=0.0, h=h, dt=cfg.dt_init)
    nominal_dt = cfg.dt_init
    pending = list(snap_times)
    steady_run = 0
    termination = "t_end"

    def build(final_state, term):
        traj = Trajectory(
            snapshots=snapshots,
            termination=term,
            config=cfg,
            step_log=log,
            k1_observed=k1_obs,
            supcube_time_integral=supcube_int,
            dissipation3_cum=diss3_cum,
            undershoots=undershoots,
            floor_events=floor_events,
            final_state=final_state,
        )
        return traj

    while pending:
        target = pending[0]
        remaining = target - state.t
        if remaining <= 1e-14 * max(1.0, target):
            snapshots.append(Snapshot(state.t, state.h, _record(state.h, state.t, p, cfg, diss_cum)))
            pending.pop(0)
            continue
        dt_try = min(nominal_dt, remaining)
        capped = dt_try < nominal_dt
        attempt = replace(state, dt=dt_try)
        try:
            new_state = step(attempt, p, cfg, _system=sysm)
        except StepFailure as exc:
            exc.trajectory = build(state, "failed")
            raise
        dt_used = new_state.t - state.t
        u = new_state.h.values

        # Monitor accumulators, evaluated at the accepted implicit state.
        m, t1, t3 = sysm.interface_values(u)
        fvals = mobility(m, cfg.knobs)
        g = p.a0 * t3 + p.a1 * t1 + p.a2 * sysm.wp_mid
        diss_cum += dt_used * float(dx * np.sum(fvals * g**2))
        diss3_cum += dt_used * float(dx * np.sum(fvals * t3**2))
        sup_h = float(np.max(np.abs(u)))
        supcube_int += dt_used * sup_h**3
        k1_obs = max(k1_obs, k1_current(u))

        min_h = float(np.min(u))
        if min_h < 0.0:
            undershoots.append((new_state.t, min_h))
        if cfg.positivity_floor > 0.0 and min_h < cfg.positivity_floor:
            floor_events.append((new_state.t, min_h))

        rate = float(np.max(np.abs(u - state.h.values))) / dt_used
        log.t.append(new_state.t)
        log.dt.append(dt_used)
        log.energy.append(energy(new_state.h, p))
        log.mass.append(float(dx * np.sum(u)))
        log.min_h.append(min_h)
        log.sup_h.append(sup_h)
        log.sup_rate.append(rate)
        log.newton_iters.append(new_state.newton_iters_last)

        if capped and abs(dt_used - dt_try) <= 1e-15 * max(1.0, dt_try):
            pass  # snapshot landing, keep the nominal step size
        else:
            nominal_dt = new_state.dt

        state = new_state
        if abs(state.t - target) <= 1e-12 * max(1.0, target):
            snapshots.append(Snapshot(state.t, state.h, _record(state.h, state.t, p, cfg, diss_cum)))
            pending.pop(0)

        steady_run = steady_run + 1 if rate < STEADY_RATE else 0
        if steady_run >= STEADY_RUN_LENGTH:
            termination = "steady"
            if abs(snapshots[-1].t - state.t) > 1e-12 * max(1.0, state.t):
                snapshots.append(Snapshot(state.t, state.h, _record(state.h, state.t, p, cfg, diss_cum)))
            break

    return build(state, termination)
