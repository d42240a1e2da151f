"""First and second order calculus of ``rho0 -> d_HV^2(rho0, rho1)`` and landscape diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .hv_metric import HVParams, HVResult, hv_distance
from .misfits import SquareNormalize, w2_distance_sq
from .numerics import Field, Grid1D, Signal, diff1, hinged_operator, solve_banded_spd

MisfitName = Literal["l2", "hv", "w2"]

# Landscape presets: (kind, kappa, lambda, epsilon). "hv-l2" uses the large-parameter
# triple that makes HV indistinguishable from L2; "hv-l2-alt" is the alternative
# triple kappa=1e10, lambda=epsilon=1 for the same regime.
LANDSCAPE_PRESETS = {
    "l2": ("l2", None, None, None),
    "hv-l2": ("hv", 1e5, 1e5, 10.0),
    "hv-l2-alt": ("hv", 1e10, 1.0, 1.0),
    "hv-h1": ("hv", 1e-5, 10.0, 1e-5),
    "hv-h2": ("hv", 1e-5, 1e-5, 1e-5),
}


@dataclass(frozen=True)
class HessianAnalysisParams:
    """Hyperparameters plus a.e. bounds ``m_lower <= |rho_x| <= M_upper``."""

    p: HVParams
    m_lower: float
    M_upper: float

    def __post_init__(self):
        if self.m_lower < 0 or self.M_upper < self.m_lower:
            raise ValueError("need 0 <= m_lower <= M_upper")


@dataclass(frozen=True)
class LandscapeCurve:
    shifts: np.ndarray
    values: np.ndarray
    misfit_kind: str
    details: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        shifts = np.asarray(self.shifts, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if shifts.shape != values.shape:
            raise ValueError("shifts and values must have the same length")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError("landscape values must be finite and non-negative")
        object.__setattr__(self, "shifts", shifts)
        object.__setattr__(self, "values", values)


# -- derivatives ------------------------------------------------------------------


def hv_value_and_gradient(rho0: Signal, rho1: Signal, p: HVParams, warm_start: Field | None = None):
    """Return ``(d^2, gradient, result)``; the gradient is ``-z(., 0)`` of the geodesic."""
    res = hv_distance(rho0, rho1, p, warm_start=warm_start)
    return res.distance_sq, Signal(rho0.grid, -res.path.z.values[0]), res


def hv_gradient(rho0: Signal, rho1: Signal, p: HVParams) -> Signal:
    """Frechet derivative of ``d^2(rho0, rho1)`` in ``rho0`` (trapezoidal L2 pairing)."""
    return hv_value_and_gradient(rho0, rho1, p)[1]


def _interior_operator(rho: Signal, p: HVParams):
    rx = diff1(rho.values, rho.grid.h)
    a = rx[1:-1]
    return rx, hinged_operator(rho.grid.n - 2, rho.grid.h, p.epsilon, p.lam, p.kappa + a**2)


def hessian_apply(rho: Signal, theta: Signal, p: HVParams) -> Signal:
    """Apply ``I - rho_x L^{-1} rho_x`` with ``L = eps D4 - lam D2 + kappa + rho_x^2``.

    ``L`` acts on interior nodes with hinged ends, so the two boundary values of
    ``theta`` pass through unchanged.
    """
    if theta.grid != rho.grid:
        raise ValueError("rho and theta must share a grid")
    rx, L = _interior_operator(rho, p)
    out = np.array(theta.values)
    a = rx[1:-1]
    out[1:-1] -= a * solve_banded_spd(L, a * theta.values[1:-1])
    return Signal(rho.grid, out)


def l2_inner(a: Signal, b: Signal) -> float:
    return float(np.dot(a.grid.weights(), a.values * b.values))


def hessian_quadratic_form(rho: Signal, theta: Signal, p: HVParams) -> float:
    return l2_inner(theta, hessian_apply(rho, theta, p))


# -- Sobolev-type norms -----------------------------------------------------------

MAX_DENSE_N = 2000


def operator_eigenpairs(grid: Grid1D, epsilon: float, lam: float, shift: float):
    """Eigenpairs of the hinged ``eps D4 - lam D2 + shift`` on the interior nodes (ascending)."""
    if grid.n > MAX_DENSE_N:
        raise ValueError(f"dense eigendecomposition limited to n <= {MAX_DENSE_N}, got {grid.n}")
    dense = hinged_operator(grid.n - 2, grid.h, epsilon, lam, shift).to_dense()
    return np.linalg.eigh(dense)


def sobolev_norm(theta: Signal, s_order: float, kappa: float, lam: float, epsilon: float, M: float) -> float:
    """``||(eps D4 - lam D2 + (kappa + M^2))^{s/2} theta||`` in the trapezoidal L2 norm.

    Fractional powers come from a dense eigendecomposition of the hinged
    operator. The two boundary nodes, where the hinged operator has no rows,
    are scaled by the constant part ``(kappa + M^2)^{s/2}``.
    """
    if s_order not in (-1, -0.5, 0, 0.5, 1):
        raise ValueError("s_order must be one of -1, -1/2, 0, 1/2, 1")
    grid = theta.grid
    if s_order == 0:
        return float(np.sqrt(l2_inner(theta, theta)))
    shift = kappa + M**2
    vals, vecs = operator_eigenpairs(grid, epsilon, lam, shift)
    out = np.empty(grid.n)
    out[1:-1] = vecs @ (vals ** (s_order / 2) * (vecs.T @ theta.values[1:-1]))
    out[[0, -1]] = shift ** (s_order / 2) * theta.values[[0, -1]]
    return float(np.sqrt(np.dot(grid.weights(), out**2)))


# -- shift landscapes -------------------------------------------------------------


def shifted(f: Signal, s: float) -> Signal:
    """``f(x - s)`` by linear interpolation, zero outside the original support."""
    return Signal(f.grid, np.interp(f.x - s, f.x, f.values, left=0.0, right=0.0))


def shift_landscape(
    f: Signal,
    shifts: Sequence[float],
    p: HVParams | None = None,
    kind: MisfitName = "hv",
    warm_start: bool = True,
) -> LandscapeCurve:
    """Misfit ``J(s)`` between ``g_s = f(. - s)`` and ``f`` for each shift.

    ``kind`` is ``"l2"`` (half squared L2 distance), ``"hv"`` (squared HV
    distance with ``p``) or ``"w2"`` (squared 2-Wasserstein after square
    normalisation). HV sweeps are run in the given order and reuse the previous
    geodesic velocity as an extra starting candidate.
    """
    shifts = np.asarray(shifts, dtype=float)
    values = []
    details = []
    previous: HVResult | None = None
    for s in shifts:
        g = shifted(f, s)
        if kind == "l2":
            values.append(0.5 * l2_inner(Signal(f.grid, g.values - f.values), Signal(f.grid, g.values - f.values)))
        elif kind == "hv":
            if p is None:
                raise ValueError("HV landscape needs hyperparameters")
            start = previous.path.v if (warm_start and previous is not None) else None
            previous = hv_distance(g, f, p, warm_start=start)
            values.append(previous.distance_sq)
            details.append(previous.candidate)
        elif kind == "w2":
            if np.max(np.abs(g.values - f.values)) == 0:
                values.append(0.0)
            else:
                values.append(w2_distance_sq(g.values, f.values, f.grid.h, SquareNormalize()))
        else:
            raise ValueError(f"unknown misfit kind {kind!r}")
    return LandscapeCurve(shifts, np.array(values), kind, details)


def _flat_steps(v: np.ndarray, rtol: float) -> np.ndarray:
    thr = rtol * max(float(np.ptp(v)), np.finfo(float).tiny)
    return np.abs(np.diff(v)) <= thr


def strict_local_minima(values: Sequence[float], plateau_rtol: float = 1e-3) -> list[int]:
    """Indices of strict local minima of a sampled curve.

    A step between neighbouring samples is flat when it changes the value by at
    most ``plateau_rtol`` times the curve's range. Maximal chains of flat steps
    are collapsed into one level, so a flat tail is not a string of minima. A
    run (or endpoint) is a minimum when it is strictly below the runs on both
    sides; a missing side counts as higher.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return []
    flat = _flat_steps(v, plateau_rtol)
    runs = []
    start = 0
    for i in range(1, v.size + 1):
        if i == v.size or not flat[i - 1]:
            runs.append((start, i - 1))
            start = i
    if len(runs) < 2:
        return []
    minima = []
    for r, (a, b) in enumerate(runs):
        left = v[runs[r - 1][1]] if r > 0 else np.inf
        right = v[runs[r + 1][0]] if r + 1 < len(runs) else np.inf
        if v[a] < left and v[b] < right:
            minima.append(int(a + np.argmin(v[a : b + 1])))
    return minima


def plateau_onset(shifts: Sequence[float], values: Sequence[float], rtol: float = 1e-3) -> float | None:
    """Shift at which the trailing chain of flat steps starts, or ``None`` if the last step is not flat."""
    s = np.asarray(shifts, dtype=float)
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return None
    flat = _flat_steps(v, rtol)
    if not flat[-1]:
        return None
    idx = v.size - 2
    while idx > 0 and flat[idx - 1]:
        idx -= 1
    return float(s[idx])
