"""Equation coefficients, regularized mobility, entropies, and the energy functional.

The evolution law is

    h_t + ( f(h) (a0 h_xxx + a1 h_x + a2 w'(x)) )_x + a3 h_x = 0

on a periodic domain, with mobility f(h) = |h|^3.  The regularized mobility
replaces f by f_de(z) = |z|^4 / (|z| + eps) + delta, which restores uniform
parabolicity for delta > 0 and strengthens the degeneracy near zero for
eps > 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .grid import TWO_PI, Grid, PeriodicField, d1, d2, d3, integrate

ALPHA_RANGE = (-0.5, 1.0)
THETA_RANGE = (0.0, 0.4)


@dataclass(frozen=True)
class RegularizationKnobs:
    """Mobility regularization (delta, eps) and the initial-lift exponent theta."""

    delta: float = 0.0
    epsilon: float = 1e-8
    theta: float = 0.3

    def __post_init__(self) -> None:
        if self.delta < 0.0:
            raise ValueError(f"delta must be nonnegative, got {self.delta}")
        if self.epsilon < 0.0:
            raise ValueError(f"epsilon must be nonnegative, got {self.epsilon}")
        if not (THETA_RANGE[0] < self.theta < THETA_RANGE[1]):
            raise ValueError(
                f"theta must lie in ({THETA_RANGE[0]}, {THETA_RANGE[1]}), got {self.theta}"
            )


class Forcing:
    """Substrate forcing profile w with its first two derivatives on a grid.

    Two kinds are supported: "sine" samples w = sin(x) and its derivatives
    analytically (the domain must then be one full period long), and
    "tabulated" carries arbitrary samples, deriving w' and w'' with the grid
    operators when they are not supplied.
    """

    def __init__(self, kind: str, grid: Grid, w: np.ndarray, wp: np.ndarray, wpp: np.ndarray):
        self.kind = kind
        self.grid = grid
        self.w = np.asarray(w, dtype=float)
        self.wp = np.asarray(wp, dtype=float)
        self.wpp = np.asarray(wpp, dtype=float)
        for name, arr in (("w", self.w), ("w'", self.wp), ("w''", self.wpp)):
            if arr.shape != (grid.n,):
                raise ValueError(f"forcing {name} needs {grid.n} samples")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"forcing {name} must be finite")
        self.w.flags.writeable = False
        self.wp.flags.writeable = False
        self.wpp.flags.writeable = False

    @classmethod
    def sine(cls, grid: Grid) -> "Forcing":
        if abs(grid.length - TWO_PI) > 1e-9:
            raise ValueError(
                f"sine forcing needs a domain of length 2*pi, got {grid.length}"
            )
        x = grid.x
        return cls("sine", grid, np.sin(x), np.cos(x), -np.sin(x))

    @classmethod
    def tabulated(
        cls,
        grid: Grid,
        w,
        wp=None,
        wpp=None,
    ) -> "Forcing":
        wf = PeriodicField(grid, w)
        dwp = d1(wf).values
        dwpp = d2(wf).values
        if wp is None:
            wp = dwp
        if wpp is None:
            wpp = dwpp
        wp = np.asarray(wp, dtype=float)
        wpp = np.asarray(wpp, dtype=float)
        # Supplied derivatives must be consistent with the grid operators to
        # the scheme's (second) order of accuracy.
        dx2 = grid.dx**2
        curv3 = float(np.max(np.abs(d3(wf).values))) + 1.0
        curv4 = float(np.max(np.abs(d2(PeriodicField(grid, dwpp)).values))) + 1.0
        if float(np.max(np.abs(wp - dwp))) > dx2 * curv3 + 1e-10:
            raise ValueError("supplied w' is inconsistent with the discrete derivative of w")
        if float(np.max(np.abs(wpp - dwpp))) > dx2 * curv4 + 1e-10:
            raise ValueError("supplied w'' is inconsistent with the discrete derivative of w")
        return cls("tabulated", grid, wf.values, wp, wpp)

    @classmethod
    def constant(cls, grid: Grid, value: float = 0.0) -> "Forcing":
        zero = np.zeros(grid.n)
        return cls("tabulated", grid, np.full(grid.n, float(value)), zero, zero)

    def wp_mid(self) -> np.ndarray:
        """w' sampled at the cell interfaces x_{i+1/2}."""
        if self.kind == "sine":
            return np.cos(self.grid.x + 0.5 * self.grid.dx)
        return 0.5 * (self.wp + np.roll(self.wp, -1))

    # Norms used by the a priori constants.
    @property
    def sup_w(self) -> float:
        return float(np.max(np.abs(self.w)))

    @property
    def sup_wp(self) -> float:
        return float(np.max(np.abs(self.wp)))

    @property
    def l2_wp(self) -> float:
        return math.sqrt(self.grid.dx * float(np.sum(self.wp**2)))


@dataclass(frozen=True)
class Params:
    """Coefficients (a0, a1, a2, a3) and the forcing profile w."""

    a0: float
    a1: float
    a2: float
    a3: float
    w: Forcing

    def __post_init__(self) -> None:
        if not (self.a0 > 0.0):
            raise ValueError(f"a0 must be positive, got {self.a0}")
        for name in ("a0", "a1", "a2", "a3"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @property
    def grid(self) -> Grid:
        return self.w.grid


def from_physical(chi: float, mu: float, grid: Optional[Grid] = None) -> Params:
    """Coefficients for the rotating-cylinder film: a0 = a1 = chi/3, a2 = -mu/3, a3 = 1, w = sin."""
    if not (chi > 0.0):
        raise ValueError(f"chi must be positive, got {chi}")
    if mu < 0.0:
        raise ValueError(f"mu must be nonnegative, got {mu}")
    if grid is None:
        grid = Grid(n=256)
    return Params(a0=chi / 3.0, a1=chi / 3.0, a2=-mu / 3.0, a3=1.0, w=Forcing.sine(grid))


def mobility(z, knobs: RegularizationKnobs):
    """Regularized mobility |z|^4 / (|z| + eps) + delta (plain |z|^3 + delta when eps = 0)."""
    az = np.abs(z)
    if knobs.epsilon > 0.0:
        return az**4 / (az + knobs.epsilon) + knobs.delta
    return az**3 + knobs.delta


def mobility_derivative(z, knobs: RegularizationKnobs):
    """d/dz of mobility; used by the implicit solver's Jacobian."""
    az = np.abs(z)
    sz = np.sign(z)
    if knobs.epsilon > 0.0:
        return sz * az**3 * (3.0 * az + 4.0 * knobs.epsilon) / (az + knobs.epsilon) ** 2
    return 3.0 * sz * az**2


def entropy_G(z, epsilon: float):
    """Touchdown entropy density G(z) = 1/(2z) + eps/(6 z^2), defined for z > 0.

    Its second derivative is (z + eps)/z^4, the reciprocal of the eps-regularized
    mobility, which is what makes it the natural Lyapunov density for positivity.
    """
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0.0):
        raise ValueError("entropy density needs strictly positive arguments")
    if epsilon < 0.0:
        raise ValueError("epsilon must be nonnegative")
    out = 0.5 / z + epsilon / (6.0 * z**2)
    return float(out) if out.ndim == 0 else out


def alpha_entropy(z, epsilon: float, alpha: float):
    """Power-family entropy density with second derivative z^alpha / f_eps(z).

    Valid for alpha in (-1/2, 1) excluding 0; nonnegative throughout that range.
    """
    if not (ALPHA_RANGE[0] < alpha < ALPHA_RANGE[1]) or alpha == 0.0:
        raise ValueError(
            f"alpha must lie in ({ALPHA_RANGE[0]}, {ALPHA_RANGE[1]}) and be nonzero, got {alpha}"
        )
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0.0):
        raise ValueError("entropy density needs strictly positive arguments")
    if epsilon < 0.0:
        raise ValueError("epsilon must be nonnegative")
    lead = z ** (alpha - 1.0) / ((alpha - 1.0) * (alpha - 2.0))
    tail = epsilon * z ** (alpha - 2.0) / ((alpha - 3.0) * (alpha - 2.0))
    out = lead + tail
    return float(out) if out.ndim == 0 else out


def energy(h: PeriodicField, p: Params) -> float:
    """E(h) = 1/2 * integral of a0 h_x^2 - a1 h^2 - 2 a2 w h."""
    if not h.grid.compatible(p.grid):
        raise ValueError("field and forcing live on different grids")
    hx = d1(h).values
    dens = p.a0 * hx**2 - p.a1 * h.values**2 - 2.0 * p.a2 * p.w.w * h.values
    return 0.5 * float(h.grid.dx * np.sum(dens))


def entropy_integral(h: PeriodicField, epsilon: float) -> float:
    """Integral of the touchdown entropy; +inf once the field touches zero."""
    if float(np.min(h.values)) <= 0.0:
        return math.inf
    return integrate(h.with_values(entropy_G(h.values, epsilon)))
