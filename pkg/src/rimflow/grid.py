"""Uniform periodic grid and the discrete calculus built on it.

All spatial operators are second-order centered differences on a uniform
periodic grid; quadrature is the periodic rectangle rule, which is
spectrally accurate for smooth periodic integrands.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
import scipy.sparse as sp

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid with n cells covering [origin, origin + length)."""

    n: int
    length: float = TWO_PI
    origin: float = 0.0

    def __post_init__(self) -> None:
        if self.n < 8 or self.n % 2 != 0:
            raise ValueError(f"grid size must be even and at least 8, got n={self.n}")
        if not (self.length > 0.0 and math.isfinite(self.length)):
            raise ValueError(f"grid length must be positive and finite, got {self.length}")
        if not math.isfinite(self.origin):
            raise ValueError("grid origin must be finite")

    @property
    def dx(self) -> float:
        return self.length / self.n

    @property
    def x(self) -> np.ndarray:
        return self.origin + self.dx * np.arange(self.n)

    def field(self, values) -> "PeriodicField":
        return PeriodicField(self, values)

    def constant(self, c: float) -> "PeriodicField":
        return PeriodicField(self, np.full(self.n, float(c)))

    def sample(self, fn: Callable[[np.ndarray], np.ndarray]) -> "PeriodicField":
        return PeriodicField(self, np.asarray(fn(self.x), dtype=float))

    def compatible(self, other: "Grid", tol: float = 1e-12) -> bool:
        return (
            self.n == other.n
            and abs(self.length - other.length) <= tol * max(1.0, abs(self.length))
            and abs(self.origin - other.origin) <= tol * max(1.0, abs(self.length))
        )


@dataclass(frozen=True)
class PeriodicField:
    """Immutable sampled values on a periodic grid."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=float, copy=True)
        if v.shape != (self.grid.n,):
            raise ValueError(
                f"field needs {self.grid.n} values, got shape {v.shape}"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def with_values(self, values) -> "PeriodicField":
        return PeriodicField(self.grid, values)

    def shift(self, cells: int) -> "PeriodicField":
        """Translate by a whole number of cells (periodic roll)."""
        return PeriodicField(self.grid, np.roll(self.values, cells))


class FieldNorms(NamedTuple):
    l2: float
    h1: float
    sup: float
    min: float


def _as_values(f: PeriodicField) -> tuple[np.ndarray, float]:
    return f.values, f.grid.dx


def d1(f: PeriodicField) -> PeriodicField:
    """Centered first derivative, second order."""
    v, dx = _as_values(f)
    return f.with_values((np.roll(v, -1) - np.roll(v, 1)) / (2.0 * dx))


def d2(f: PeriodicField) -> PeriodicField:
    """Centered second derivative, second order."""
    v, dx = _as_values(f)
    return f.with_values((np.roll(v, -1) - 2.0 * v + np.roll(v, 1)) / dx**2)


def d3(f: PeriodicField) -> PeriodicField:
    """Centered third derivative, second order."""
    v, dx = _as_values(f)
    out = (np.roll(v, -2) - 2.0 * np.roll(v, -1) + 2.0 * np.roll(v, 1) - np.roll(v, 2))
    return f.with_values(out / (2.0 * dx**3))


def integrate(f: PeriodicField) -> float:
    """Periodic rectangle rule, exact for trigonometric polynomials below the grid cutoff."""
    return float(f.grid.dx * np.sum(f.values))


def norms(f: PeriodicField) -> FieldNorms:
    v, dx = _as_values(f)
    l2sq = dx * float(np.sum(v * v))
    gx = (np.roll(v, -1) - np.roll(v, 1)) / (2.0 * dx)
    h1sq = l2sq + dx * float(np.sum(gx * gx))
    return FieldNorms(
        l2=math.sqrt(l2sq),
        h1=math.sqrt(h1sq),
        sup=float(np.max(np.abs(v))),
        min=float(np.min(v)),
    )


def diff_matrix(grid: Grid, order: int) -> sp.csr_matrix:
    """Sparse periodic differentiation matrix matching d1/d2/d3."""
    n, dx = grid.n, grid.dx
    eye = np.ones(n)
    if order == 1:
        diags = {1: eye / (2 * dx), -1: -eye / (2 * dx)}
    elif order == 2:
        diags = {0: -2 * eye / dx**2, 1: eye / dx**2, -1: eye / dx**2}
    elif order == 3:
        c = 1.0 / (2 * dx**3)
        diags = {2: c * eye, 1: -2 * c * eye, -1: 2 * c * eye, -2: -c * eye}
    else:
        raise ValueError(f"unsupported derivative order {order}")
    mat = sp.lil_matrix((n, n))
    idx = np.arange(n)
    for off, vals in diags.items():
        mat[idx, (idx + off) % n] = vals
    return mat.tocsr()


def write_field_csv(f: PeriodicField, path, value_name: str = "value") -> None:
    """Serialize as CSV rows "x,value" with full (17 significant digit) precision."""
    x = f.grid.x
    with open(path, "w") as fh:
        fh.write(f"x,{value_name}\n")
        for xi, vi in zip(x, f.values):
            fh.write(f"{xi:.17g},{vi:.17g}\n")


def read_field_csv(path) -> PeriodicField:
    """Read a field written by write_field_csv, reconstructing the grid from the x column."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != 2:
        raise ValueError(f"expected two CSV columns (x,value) in {path}")
    x, v = data[:, 0], data[:, 1]
    n = len(x)
    if n < 8:
        raise ValueError(f"too few samples ({n}) in {path}")
    dx = x[1] - x[0]
    if not np.allclose(np.diff(x), dx, rtol=1e-9, atol=1e-12):
        raise ValueError(f"non-uniform x column in {path}")
    grid = Grid(n=n, length=float(n * dx), origin=float(x[0]))
    return PeriodicField(grid, v)
