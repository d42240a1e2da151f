"""Grids, signals, finite differences, quadrature and a banded SPD solver.

Everything here works on uniform grids. Arrays are treated as immutable once
wrapped in a :class:`Signal` or :class:`Field`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_solve_banded, cholesky_banded


class GridError(ValueError):
    """Raised when a grid is too small or malformed for an operation."""


class NotPositiveDefiniteError(LinAlgError):
    """Raised when a banded Cholesky factorisation hits a non-positive pivot."""

    def __init__(self, row: int):
        self.row = row
        super().__init__(f"matrix is not positive definite: pivot at row {row} is <= 0")


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Grid1D:
    """Uniform grid of ``n`` points on ``[a, b]``."""

    n: int
    a: float = 0.0
    b: float = 1.0

    min_points = 3

    def __post_init__(self):
        if int(self.n) != self.n or self.n < self.min_points:
            raise GridError(f"a grid needs at least {self.min_points} points, got n={self.n}")
        if not self.b > self.a:
            raise GridError(f"grid endpoints must satisfy b > a, got [{self.a}, {self.b}]")

    @property
    def h(self) -> float:
        return (self.b - self.a) / (self.n - 1)

    @property
    def points(self) -> np.ndarray:
        return np.linspace(self.a, self.b, self.n)

    def weights(self) -> np.ndarray:
        """Trapezoidal quadrature weights."""
        return trapezoid_weights(self.n, self.h)


@dataclass(frozen=True)
class TimeGrid(Grid1D):
    """Pseudo-time axis of a geodesic; two slices (the endpoints) are allowed."""

    min_points = 2


@dataclass(frozen=True)
class Signal:
    grid: Grid1D
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = _frozen(self.values)
        if values.shape != (self.grid.n,):
            raise GridError(f"signal has {values.shape} values for a grid of {self.grid.n} points")
        if not np.all(np.isfinite(values)):
            raise ValueError("signal values must be finite")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_function(cls, func, n: int, a: float = 0.0, b: float = 1.0) -> "Signal":
        grid = Grid1D(n, a, b)
        return cls(grid, func(grid.points))

    @property
    def x(self) -> np.ndarray:
        return self.grid.points


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Space grid on (0, 1) crossed with the geodesic pseudo-time grid on [0, 1]."""

    space: Grid1D
    time: Grid1D

    def __post_init__(self):
        if self.time.a != 0.0 or self.time.b != 1.0:
            raise GridError("geodesic time grid must span [0, 1]")

    @classmethod
    def unit(cls, n_space: int, n_time: int) -> "SpaceTimeGrid":
        return cls(Grid1D(n_space), TimeGrid(n_time))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.time.n, self.space.n)


@dataclass(frozen=True)
class Field:
    """Space-time array stored time-major: ``values[k, i]`` is the value at ``(x_i, t_k)``."""

    grid: SpaceTimeGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = _frozen(self.values)
        if values.shape != self.grid.shape:
            raise GridError(f"field shape {values.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("field values must be finite")
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, grid: SpaceTimeGrid) -> "Field":
        return cls(grid, np.zeros(grid.shape))


def trapezoid_weights(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    return w


# -- finite differences on arrays (last axis) ---------------------------------


def diff1(u: np.ndarray, h: float) -> np.ndarray:
    """First derivative, central inside, one-sided second order at the ends."""
    u = np.asarray(u, dtype=float)
    if u.shape[-1] < 3:
        raise GridError("first derivative needs at least 3 points")
    d = np.empty_like(u)
    d[..., 1:-1] = (u[..., 2:] - u[..., :-2]) / (2 * h)
    d[..., 0] = (-3 * u[..., 0] + 4 * u[..., 1] - u[..., 2]) / (2 * h)
    d[..., -1] = (3 * u[..., -1] - 4 * u[..., -2] + u[..., -3]) / (2 * h)
    return d


def diff2(u: np.ndarray, h: float) -> np.ndarray:
    """Second derivative, central inside, one-sided second order at the ends."""
    u = np.asarray(u, dtype=float)
    n = u.shape[-1]
    if n < 3:
        raise GridError("second derivative needs at least 3 points")
    d = np.empty_like(u)
    d[..., 1:-1] = (u[..., 2:] - 2 * u[..., 1:-1] + u[..., :-2]) / h**2
    if n >= 4:
        d[..., 0] = (2 * u[..., 0] - 5 * u[..., 1] + 4 * u[..., 2] - u[..., 3]) / h**2
        d[..., -1] = (2 * u[..., -1] - 5 * u[..., -2] + 4 * u[..., -3] - u[..., -4]) / h**2
    else:
        d[..., 0] = d[..., 1]
        d[..., -1] = d[..., -2]
    return d


def diff4_hinged(u: np.ndarray, h: float) -> np.ndarray:
    """Fourth derivative with hinged ghost points ``u(-h) = 2u(0) - u(h)``.

    The ghost values make ``u_xx`` vanish at both ends, so the boundary rows
    come out as zero and the first interior row uses ``-2u0 + 5u1 - 4u2 + u3``.
    """
    u = np.asarray(u, dtype=float)
    n = u.shape[-1]
    if n < 5:
        raise GridError("fourth derivative needs at least 5 points")
    left = 2 * u[..., :1] - u[..., 1:3][..., ::-1]  # u(-2h), u(-h)
    right = 2 * u[..., -1:] - u[..., -3:-1][..., ::-1]  # u(1+h), u(1+2h)
    ext = np.concatenate([left, u, right], axis=-1)
    return (ext[..., :-4] - 4 * ext[..., 1:-3] + 6 * ext[..., 2:-2] - 4 * ext[..., 3:-1] + ext[..., 4:]) / h**4


def derivative(s: Signal, order: int) -> Signal:
    """Finite-difference derivative of a signal; ``order`` is 1, 2 or 4."""
    if order not in (1, 2, 4):
        raise ValueError(f"unsupported derivative order {order}")
    if s.grid.n < order + 1:
        raise GridError(f"order-{order} derivative needs at least {order + 1} points, got {s.grid.n}")
    func = {1: diff1, 2: diff2, 4: diff4_hinged}[order]
    return Signal(s.grid, func(s.values, s.grid.h))


# -- quadrature and interpolation ---------------------------------------------


def integrate(s: Signal) -> float:
    return float(np.dot(s.grid.weights(), s.values))


def interp_linear(s: Signal, x) -> float | np.ndarray:
    """Piecewise-linear interpolation; queries outside the grid clamp to the end values."""
    out = np.interp(x, s.grid.points, s.values)
    return float(out) if np.ndim(out) == 0 else out


# -- banded symmetric positive definite systems -------------------------------


@dataclass(frozen=True)
class BandedSystem:
    """Symmetric banded matrix in LAPACK upper storage.

    ``bands[bandwidth + i - j, j] == A[i, j]`` for ``j - bandwidth <= i <= j``.
    """

    n: int
    bandwidth: int
    bands: np.ndarray = field(repr=False)
    symmetric: bool = True

    def __post_init__(self):
        bands = _frozen(self.bands)
        if bands.shape != (self.bandwidth + 1, self.n):
            raise ValueError(f"band storage must have shape {(self.bandwidth + 1, self.n)}, got {bands.shape}")
        object.__setattr__(self, "bands", bands)

    @classmethod
    def from_dense(cls, a: np.ndarray, bandwidth: int) -> "BandedSystem":
        a = np.asarray(a, dtype=float)
        n = a.shape[0]
        ab = np.zeros((bandwidth + 1, n))
        for k in range(bandwidth + 1):
            ab[bandwidth - k, k:] = np.diagonal(a, k)
        return cls(n, bandwidth, ab)

    def to_dense(self) -> np.ndarray:
        u = self.bandwidth
        a = np.zeros((self.n, self.n))
        for k in range(u + 1):
            d = self.bands[u - k, k:]
            a += np.diag(d, k)
            if k:
                a += np.diag(d, -k)
        return a

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = self.bandwidth
        y = self.bands[u] * x
        for k in range(1, u + 1):
            d = self.bands[u - k, k:]
            y[:-k] += d * x[k:]
            y[k:] += d * x[:-k]
        return y


def solve_banded_spd(sys: BandedSystem, rhs: np.ndarray) -> np.ndarray:
    """Solve ``A x = rhs`` by banded Cholesky (no pivoting)."""
    try:
        factor = cholesky_banded(sys.bands, lower=False, check_finite=True)
    except LinAlgError as exc:
        # LAPACK reports the order of the first non-positive leading minor.
        digits = "".join(ch if ch.isdigit() else " " for ch in str(exc)).split()
        row = int(digits[0]) - 1 if digits else -1
        raise NotPositiveDefiniteError(row) from exc
    rhs = np.asarray(rhs, dtype=float)
    x = cho_solve_banded((factor, False), rhs)
    # one refinement sweep keeps the residual near machine precision for stiff eps/h^4
    return x + cho_solve_banded((factor, False), rhs - sys.apply(x))


def hinged_operator(n: int, h: float, epsilon: float, lam: float, diag) -> BandedSystem:
    """Assemble ``epsilon*D4 - lam*D2 + diag(diag)`` on the ``n`` interior nodes.

    Dirichlet values are zero at both ends and the fourth-difference rows use the
    hinged ghost convention, which makes ``D4`` the square of the Dirichlet ``D2``.
    """
    diag = np.broadcast_to(np.asarray(diag, dtype=float), (n,))
    ab = np.zeros((3, n))
    main = np.full(n, 6.0 * epsilon / h**4 + 2.0 * lam / h**2)
    main[0] -= epsilon / h**4
    main[-1] -= epsilon / h**4
    ab[2] = main + diag
    ab[1, 1:] = -4.0 * epsilon / h**4 - lam / h**2
    ab[0, 2:] = epsilon / h**4
    return BandedSystem(n, 2, ab)
