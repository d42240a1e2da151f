"""Squared HV distance between two signed 1D signals and its minimising geodesic.

The distance is the minimum over paths ``(f, v, z)`` with ``f_t + f_x v = z``,
``f(., 0) = rho0`` and ``f(., 1) = rho1`` of the action

    1/2 * int int kappa v^2 + lam v_x^2 + epsilon v_xx^2 + z^2  dx dt.

It is computed by alternating two exact sub-minimisations: for fixed ``v`` the
pair ``(f, z)`` follows from characteristics, and for fixed ``f`` each time slice
of ``v`` solves a hinged fourth-order boundary value problem.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.signal import find_peaks

from .numerics import (
    Field,
    Signal,
    SpaceTimeGrid,
    diff1,
    hinged_operator,
    solve_banded_spd,
)

log = logging.getLogger(__name__)


class CharacteristicCrossingError(RuntimeError):
    """Characteristics of ``v`` crossed, so the transport map is not invertible."""

    def __init__(self, x: float, t: float):
        self.x, self.t = x, t
        super().__init__(f"characteristics cross near x={x:.4g}, t={t:.4g}")


class HVSolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class Zero:
    """Start the alternating scheme from ``v = 0``."""


@dataclass(frozen=True)
class PeakMatch:
    """Also try start velocities that move the ``k`` dominant peaks onto each other, k = 1..max_peaks."""

    max_peaks: int = 6

    def __post_init__(self):
        if self.max_peaks < 0:
            raise ValueError("max_peaks must be >= 0")


InitStrategy = Union[Zero, PeakMatch]


@dataclass(frozen=True)
class HVParams:
    kappa: float = 1.0
    lam: float = 1.0
    epsilon: float = 1.0
    n_space: int | None = None
    n_time: int = 16
    max_outer_iters: int = 15
    tol: float = 1e-8
    init: InitStrategy = field(default_factory=Zero)
    rk_substeps: int = 4

    def __post_init__(self):
        if not self.kappa > 0 or not self.epsilon > 0:
            raise ValueError("kappa and epsilon must be positive")
        if not self.lam >= 0:
            raise ValueError("lam must be non-negative")
        if self.n_time < 2:
            raise ValueError("n_time must be at least 2")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_outer_iters < 0 or self.rk_substeps < 1:
            raise ValueError("max_outer_iters must be >= 0 and rk_substeps >= 1")
        if not isinstance(self.init, (Zero, PeakMatch)):
            raise TypeError(f"unknown init strategy {self.init!r}")


@dataclass(frozen=True)
class GeodesicPath:
    f: Field
    v: Field
    z: Field

    def __post_init__(self):
        if not (self.f.grid == self.v.grid == self.z.grid):
            raise ValueError("path fields must share one grid")

    @property
    def grid(self) -> SpaceTimeGrid:
        return self.f.grid


@dataclass(frozen=True)
class HVResult:
    distance_sq: float
    path: GeodesicPath
    action_history: list[float]
    converged: bool
    candidate: str = "zero"


# -- action ---------------------------------------------------------------------


def _action(v: np.ndarray, z: np.ndarray, grid: SpaceTimeGrid, p: HVParams) -> float:
    h = grid.space.h
    wx = grid.space.weights()
    wt = grid.time.weights()
    # Derivative terms use the same stencils as the v sub-problem: one-sided
    # differences on cell edges and the hinged second difference (zero at the ends).
    vx_edges = np.diff(v, axis=1) / h
    vxx = np.zeros_like(v)
    vxx[:, 1:-1] = (v[:, 2:] - 2 * v[:, 1:-1] + v[:, :-2]) / h**2
    per_slice = (
        (p.kappa * v**2 + p.epsilon * vxx**2 + z**2) @ wx
        + p.lam * h * np.sum(vx_edges**2, axis=1)
    )
    return 0.5 * float(wt @ per_slice)


def action_value(path: GeodesicPath, p: HVParams) -> float:
    """Space-time quadrature of the HV action on a discrete path."""
    return _action(path.v.values, path.z.values, path.grid, p)


# -- fixed v: characteristics ----------------------------------------------------


def _flow(v: np.ndarray, grid: SpaceTimeGrid, substeps: int):
    """Integrate ``X' = v(X,t)``, ``J' = v_x(X,t) J`` and ``K' = 1/J`` from every node.

    Returns arrays of shape (n_time, n_space) sampled at the time slices.
    """
    x = grid.space.points
    nt = grid.time.n
    dt = grid.time.h
    # one not-a-knot spline per slice, evaluated by hand on the uniform grid
    coef = np.ascontiguousarray(CubicSpline(x, v.T, axis=0).c.transpose(2, 1, 0))  # (nt, n_space - 1, 4)
    h = grid.space.h
    last = x.size - 2

    def rates(X, J, t):
        k = min(int(t / dt), nt - 2)
        a = t / dt - k
        i = np.minimum(np.maximum(((X - x[0]) / h).astype(int), 0), last)
        d = X - x[i]
        c0 = coef[k][i]
        c = c0 + a * (coef[k + 1][i] - c0)  # linear in time, so blend the coefficients
        vel = ((c[:, 0] * d + c[:, 1]) * d + c[:, 2]) * d + c[:, 3]
        grow = (3 * c[:, 0] * d + 2 * c[:, 1]) * d + c[:, 2]
        return vel, grow * J, 1.0 / J

    X, J, K = x.copy(), np.ones_like(x), np.zeros_like(x)
    Xs, Js, Ks = [X], [J], [K]
    tau = dt / substeps
    for k in range(nt - 1):
        for j in range(substeps):
            t = k * dt + j * tau
            # Stage times are nudged inside the slice so the interpolation uses one segment.
            a1 = rates(X, J, t)
            mid = t + 0.5 * tau
            a2 = rates(X + 0.5 * tau * a1[0], J + 0.5 * tau * a1[1], mid)
            a3 = rates(X + 0.5 * tau * a2[0], J + 0.5 * tau * a2[1], mid)
            end = min(t + tau, (k + 1) * dt * (1 - 1e-15))
            a4 = rates(X + tau * a3[0], J + tau * a3[1], end)
            X = X + tau / 6 * (a1[0] + 2 * a2[0] + 2 * a3[0] + a4[0])
            J = J + tau / 6 * (a1[1] + 2 * a2[1] + 2 * a3[1] + a4[1])
            K = K + tau / 6 * (a1[2] + 2 * a2[2] + 2 * a3[2] + a4[2])
            bad = ~(J > 0)
            if bad.any():
                raise CharacteristicCrossingError(float(x[np.argmax(bad)]), t + tau)
        Xs.append(X)
        Js.append(J)
        Ks.append(K)
    return np.array(Xs), np.array(Js), np.array(Ks)


def _solve_fz(v: np.ndarray, rho0: np.ndarray, rho1: np.ndarray, grid: SpaceTimeGrid, substeps: int):
    x = grid.space.points
    X, J, K = _flow(v, grid, substeps)
    steps = np.diff(X, axis=1)
    if np.any(steps <= 0):
        k, i = np.unravel_index(np.argmin(steps), steps.shape)
        raise CharacteristicCrossingError(float(x[i]), float(grid.time.points[k]))
    c = (CubicSpline(x, rho1)(X[-1]) - rho0) / K[-1]
    f_lag = rho0 + c * K
    z_lag = c / J
    f = np.empty_like(f_lag)
    fx = np.empty_like(f_lag)
    z = np.empty_like(z_lag)
    for k in range(grid.time.n):
        spline = CubicSpline(X[k], np.stack([f_lag[k], z_lag[k]], axis=1))
        f[k], z[k] = spline(x).T
        fx[k] = spline(x, 1)[:, 0]
    f[0] = rho0
    f[-1] = rho1
    return f, z, fx


def solve_fz_subproblem(v: Field, rho0: Signal, rho1: Signal, substeps: int = 4) -> tuple[Field, Field]:
    """Optimal ``(f, z)`` for a fixed velocity field.

    Along each characteristic ``z`` equals ``c/J`` with ``c`` chosen so that the
    path reaches ``rho1``; ``f`` is recovered by integrating ``z`` along the
    characteristic and resampled to the grid.
    """
    grid = v.grid
    _check_signals(rho0, rho1, grid)
    vals = np.array(v.values)
    edge = np.abs(vals[:, [0, -1]]).max()
    if edge > 1e-12 * max(np.abs(vals).max(), 1.0):
        raise ValueError("velocity must vanish at both ends of the interval")
    vals[:, [0, -1]] = 0.0
    f, z, _ = _solve_fz(vals, rho0.values, rho1.values, grid, substeps)
    return Field(grid, f), Field(grid, z)


# -- fixed f: hinged boundary value problem -------------------------------------


def _solve_v(fx: np.ndarray, ft: np.ndarray, grid: SpaceTimeGrid, p: HVParams) -> np.ndarray:
    h = grid.space.h
    n = grid.space.n
    v = np.zeros_like(fx)
    for k in range(grid.time.n):
        a = fx[k, 1:-1]
        sys = hinged_operator(n - 2, h, p.epsilon, p.lam, p.kappa + a**2)
        v[k, 1:-1] = solve_banded_spd(sys, -ft[k, 1:-1] * a)
    return v


def solve_v_subproblem(f: Field, p: HVParams, z: Field | None = None, v: Field | None = None) -> Field:
    """Solve ``eps v'''' - lam v'' + (kappa + f_x^2) v = -f_t f_x`` on every time slice.

    ``f_t`` is a central time difference of ``f`` unless the current ``z`` and
    ``v`` are supplied, in which case ``f_t = z - v f_x`` is taken from the
    transport constraint.
    """
    grid = f.grid
    fx = diff1(f.values, grid.space.h)
    if z is not None and v is not None:
        ft = z.values - v.values * fx
    else:
        ft = np.gradient(f.values, grid.time.h, axis=0, edge_order=2)
    return Field(grid, _solve_v(fx, ft, grid, p))


# -- initialisation ---------------------------------------------------------------


def _dominant_peaks(rho: np.ndarray, x: np.ndarray, k: int) -> np.ndarray:
    idx, props = find_peaks(np.abs(rho), prominence=0)
    if k == 0 or idx.size == 0:
        return np.empty(0)
    top = idx[np.argsort(props["prominences"])[::-1][:k]]
    return np.sort(x[top])


def displacement_profile(rho0: Signal, rho1: Signal, k: int) -> np.ndarray:
    """Piecewise-linear displacement through the ``k`` paired peak offsets, pinned to zero at the ends."""
    x = rho0.x
    p0 = _dominant_peaks(rho0.values, x, k)
    p1 = _dominant_peaks(rho1.values, x, k)
    m = min(p0.size, p1.size)
    if m == 0:
        return np.zeros_like(x)
    if p0.size != m or p1.size != m:
        p0 = _dominant_peaks(rho0.values, x, m)
        p1 = _dominant_peaks(rho1.values, x, m)
    knots = np.concatenate([[x[0]], p0, [x[-1]]])
    vals = np.concatenate([[0.0], p1 - p0, [0.0]])
    knots, keep = np.unique(knots, return_index=True)
    return np.interp(x, knots, vals[keep])


def init_velocity(rho0: Signal, rho1: Signal, strategy: InitStrategy, n_time: int = 16) -> Field:
    """Time-independent starting velocity for the alternating scheme."""
    grid = SpaceTimeGrid(rho0.grid, SpaceTimeGrid.unit(3, n_time).time)
    if isinstance(strategy, Zero) or strategy.max_peaks == 0:
        return Field.zeros(grid)
    u = displacement_profile(rho0, rho1, strategy.max_peaks)
    return Field(grid, np.broadcast_to(u, grid.shape))


# -- driver -----------------------------------------------------------------------


def _check_signals(rho0: Signal, rho1: Signal, grid: SpaceTimeGrid | None = None):
    if rho0.grid != rho1.grid:
        raise ValueError("rho0 and rho1 must live on the same grid")
    if grid is not None and grid.space != rho0.grid:
        raise ValueError("signals and field live on different spatial grids")


def _anderson(vs: list, rs: list) -> np.ndarray:
    """Anderson-mixed iterate from past iterates ``vs`` and residuals ``rs``."""
    R = np.array([r.ravel() for r in rs])
    dR = np.diff(R, axis=0)
    gamma, *_ = np.linalg.lstsq(dR.T, R[-1], rcond=None)
    V = np.array([v.ravel() + r.ravel() for v, r in zip(vs, rs)])
    mixed = V[-1] - gamma @ np.diff(V, axis=0)
    return mixed.reshape(vs[-1].shape)


def _alternate(v0: np.ndarray, rho0, rho1, grid: SpaceTimeGrid, p: HVParams, memory: int = 5):
    """Run the alternating scheme from ``v0``; returns (f, v, z, history, converged).

    Each outer step first tries an Anderson-accelerated velocity, then the plain
    alternating update with damping. A step is only accepted if the action does
    not increase.
    """
    v = v0
    f, z, fx = _solve_fz(v, rho0, rho1, grid, p.rk_substeps)
    a = _action(v, z, grid, p)
    history = [a]
    converged = False
    vs: list[np.ndarray] = []
    rs: list[np.ndarray] = []
    for _ in range(p.max_outer_iters):
        target = _solve_v(fx, z - v * fx, grid, p)
        vs.append(v)
        rs.append(target - v)
        del vs[:-memory], rs[:-memory]
        trials = [target, v + 0.5 * (target - v), v + 0.25 * (target - v)]
        if len(vs) > 1:
            trials.insert(0, _anderson(vs, rs))
        accepted = None
        for trial in trials:
            trial[:, 0] = trial[:, -1] = 0.0
            try:
                f_t, z_t, fx_t = _solve_fz(trial, rho0, rho1, grid, p.rk_substeps)
            except CharacteristicCrossingError:
                continue
            a_t = _action(trial, z_t, grid, p)
            if a_t <= a:
                accepted = (trial, f_t, z_t, fx_t, a_t)
                break
        if accepted is None:
            converged = True  # no descent left at this resolution
            break
        v, f, z, fx, a_new = accepted
        decrease = (a - a_new) / max(a, np.finfo(float).tiny)
        a = a_new
        history.append(a)
        if decrease < p.tol:
            converged = True
            break
    return f, v, z, history, converged


def hv_distance(rho0: Signal, rho1: Signal, p: HVParams, warm_start: Field | None = None) -> HVResult:
    """Squared HV distance from ``rho0`` to ``rho1`` on the unit interval."""
    _check_signals(rho0, rho1)
    if p.n_space is not None and p.n_space != rho0.grid.n:
        raise ValueError(f"signals have {rho0.grid.n} points but n_space={p.n_space}")
    grid = SpaceTimeGrid(rho0.grid, SpaceTimeGrid.unit(3, p.n_time).time)
    r0, r1 = rho0.values, rho1.values

    if np.max(np.abs(r0 - r1)) < 1e-14:
        f = Field(grid, np.broadcast_to(r0, grid.shape))
        zero = Field.zeros(grid)
        return HVResult(0.0, GeodesicPath(f, zero, zero), [0.0], True, "identical")

    candidates: list[tuple[str, int, np.ndarray]] = [("zero", 0, np.zeros(grid.shape))]
    if isinstance(p.init, PeakMatch):
        seen = [np.zeros(grid.shape[1])]
        for k in range(1, p.init.max_peaks + 1):
            u = displacement_profile(rho0, rho1, k)
            if any(np.array_equal(u, s) for s in seen):
                continue
            seen.append(u)
            candidates.append((f"peaks={k}", k, np.broadcast_to(u, grid.shape).copy()))
    if warm_start is not None:
        if warm_start.grid.shape != grid.shape:
            raise ValueError("warm start field has the wrong shape")
        candidates.append(("warm", 0, np.array(warm_start.values)))

    best = None
    failures = []
    for name, peaks, v0 in candidates:
        try:
            f, v, z, history, converged = _alternate(v0, r0, r1, grid, p)
        except CharacteristicCrossingError as exc:
            failures.append(f"{name}: {exc}")
            log.debug("HV candidate %s failed: %s", name, exc)
            continue
        key = (history[-1], peaks)
        if best is None or key[0] < best[0][0] - 1e-12 * max(abs(best[0][0]), 1.0) or (
            abs(key[0] - best[0][0]) <= 1e-12 * max(abs(best[0][0]), 1.0) and peaks < best[0][1]
        ):
            best = (key, name, f, v, z, history, converged)
    if best is None:
        raise HVSolverError(
            "every initial velocity led to crossing characteristics ("
            + "; ".join(failures)
            + "); try a larger kappa or more time slices"
        )
    (_, _), name, f, v, z, history, converged = best
    path = GeodesicPath(Field(grid, f), Field(grid, v), Field(grid, z))
    return HVResult(history[-1], path, history, converged, name)
