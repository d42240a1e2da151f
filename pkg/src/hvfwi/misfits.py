"""Trace misfits for FWI: L2, trace-wise 2-Wasserstein and trace-wise HV.

Every misfit returns its value and an adjoint source ``dD/df`` per trace. The
adjoint source is a density in time: a perturbation ``df`` changes the value by
``sum_k w_k * adj_k * df_k`` with trapezoid weights ``w_k``. That is the
pairing :func:`hvfwi.acoustic.simulate_adjoint` expects.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .acoustic import ShotRecord
from .hv_metric import CharacteristicCrossingError, HVParams, HVSolverError, hv_distance
from .numerics import Field, Grid1D, Signal, trapezoid_weights

log = logging.getLogger(__name__)

N_QUANTILES = 1024


# -- kinds --------------------------------------------------------------------------


@dataclass(frozen=True)
class SquareNormalize:
    """``p = f^2 / int f^2``."""


@dataclass(frozen=True)
class ShiftNormalize:
    """``p = (f + c) / int (f + c)``."""

    c: float = 0.0


Normalization = Union[SquareNormalize, ShiftNormalize]


@dataclass(frozen=True)
class L2Misfit:
    pass


@dataclass(frozen=True)
class W2Misfit:
    normalization: Normalization = SquareNormalize()


@dataclass(frozen=True)
class HVMisfit:
    """Trace-wise HV misfit.

    Time ``[0, T]`` maps to the unit interval and amplitudes are divided by
    ``amp_rescale`` (default: the shot-wide ``max|obs|``). ``time_rescale``
    defaults to the trace length ``(nt - 1) dt``.
    """

    params: HVParams = HVParams()
    time_rescale: float | None = None
    amp_rescale: float | None = None

    def __post_init__(self):
        if self.amp_rescale is not None and not self.amp_rescale > 0:
            raise ValueError("amp_rescale must be positive")
        if self.time_rescale is not None and not self.time_rescale > 0:
            raise ValueError("time_rescale must be positive")


MisfitKind = Union[L2Misfit, W2Misfit, HVMisfit]


@dataclass(frozen=True)
class MisfitEval:
    value: float
    adjoint_source: np.ndarray = field(repr=False)
    fallbacks: int = 0

    def __post_init__(self):
        if not self.value >= 0:
            raise ValueError(f"misfit value must be non-negative, got {self.value}")
        if not np.all(np.isfinite(self.adjoint_source)):
            raise ValueError("adjoint source must be finite")


def _check_pair(sim: ShotRecord, obs: ShotRecord):
    if sim.traces.shape != obs.traces.shape:
        raise ValueError(f"record shapes differ: {sim.traces.shape} vs {obs.traces.shape}")
    if not np.isclose(sim.dt, obs.dt, rtol=1e-6):
        raise ValueError(f"record time steps differ: {sim.dt} vs {obs.dt}")


# -- L2 -----------------------------------------------------------------------------


def l2_misfit(sim: ShotRecord, obs: ShotRecord) -> MisfitEval:
    _check_pair(sim, obs)
    r = sim.traces - obs.traces
    w = trapezoid_weights(sim.nt, sim.dt)
    return MisfitEval(0.5 * float(np.sum(r**2 @ w)), r)


# -- W2 -----------------------------------------------------------------------------


@dataclass(frozen=True)
class NormalizationRecord:
    method: Normalization
    trace: np.ndarray
    mass: float


def normalize_to_probability(trace, dt: float, method: Normalization = SquareNormalize()):
    """Turn a signed trace into a density with unit trapezoidal mass on ``[0, T]``."""
    f = np.asarray(trace, dtype=float)
    w = trapezoid_weights(f.size, dt)
    if isinstance(method, SquareNormalize):
        raw = f**2
        mass = float(raw @ w)
        if not mass > 0:
            raise ValueError("cannot square-normalise a zero-energy trace")
    elif isinstance(method, ShiftNormalize):
        raw = f + method.c
        if np.min(raw) <= 0:
            raise ValueError(f"shifted trace must be positive; min(trace) + c = {np.min(raw):.3g}")
        mass = float(raw @ w)
    else:
        raise TypeError(f"unknown normalisation {method!r}")
    return raw / mass, NormalizationRecord(method, f, mass)


def _normalization_vjp(rec: NormalizationRecord, a: np.ndarray, dt: float) -> np.ndarray:
    """Pull ``a = dW/dp`` (per sample) back to ``dW/df`` (per sample)."""
    w = trapezoid_weights(rec.trace.size, dt)
    f = rec.trace
    if isinstance(rec.method, SquareNormalize):
        raw = f**2
        return 2 * f * a / rec.mass - 2 * w * f * float(a @ raw) / rec.mass**2
    raw = f + rec.method.c
    return a / rec.mass - w * float(a @ raw) / rec.mass**2


def _cdf(p: np.ndarray, dt: float) -> np.ndarray:
    P = np.concatenate([[0.0], np.cumsum(0.5 * dt * (p[1:] + p[:-1]))])
    return P


def _quantiles(P: np.ndarray, dt: float, s: np.ndarray):
    """Invert the piecewise-linear CDF at levels ``s``. Returns ``(t, j, frac)``."""
    j = np.searchsorted(P, s, side="right") - 1
    j = np.clip(j, 0, P.size - 2)
    dP = P[j + 1] - P[j]
    frac = (s - P[j]) / dP
    return (j + frac) * dt, j, dP


def _quantile_vjp(P, j, dP, s, coef, dt):
    """Gradient of ``sum coef * t(s)`` with respect to the CDF nodes ``P``."""
    g = np.zeros(P.size)
    # t = (j + (s - P_j) / (P_{j+1} - P_j)) dt
    np.add.at(g, j, -coef * dt * (P[j + 1] - s) / dP**2)
    np.add.at(g, j + 1, -coef * dt * (s - P[j]) / dP**2)
    return g


def _cdf_vjp(gP: np.ndarray, dt: float) -> np.ndarray:
    """Pull back through ``P_j = sum_{i<j} dt (p_i + p_{i+1}) / 2``."""
    tail = np.cumsum(gP[::-1])[::-1]  # tail[j] = sum_{k>=j} gP_k
    n = gP.size
    out = np.zeros(n)
    out[:-1] += 0.5 * dt * tail[1:]
    out[1:] += 0.5 * dt * tail[1:]
    return out


def w2_distance_sq(sim_trace, obs_trace, dt: float, method: Normalization = SquareNormalize(), with_grad: bool = False):
    """Squared W2 between normalised traces on a midpoint quantile grid of ``N_QUANTILES`` levels."""
    p, rec = normalize_to_probability(sim_trace, dt, method)
    q, _ = normalize_to_probability(obs_trace, dt, method)
    s = (np.arange(N_QUANTILES) + 0.5) / N_QUANTILES
    P, Q = _cdf(p, dt), _cdf(q, dt)
    # normalisation makes P[-1] = 1 up to round-off; pin it so every level is bracketed
    P[-1] = Q[-1] = 1.0
    tp, j, dP = _quantiles(P, dt, s)
    tq, _, _ = _quantiles(Q, dt, s)
    value = float(np.mean((tp - tq) ** 2))
    if not with_grad:
        return value
    coef = 2 * (tp - tq) / N_QUANTILES
    gP = _quantile_vjp(P, j, dP, s, coef, dt)
    gP[-1] = 0.0  # pinned
    dW_dp = _cdf_vjp(gP, dt)
    return value, _normalization_vjp(rec, dW_dp, dt)


def w2_misfit_trace(sim_trace, obs_trace, dt: float, method: Normalization = SquareNormalize()):
    """``(value, adjoint trace)``; the adjoint is a density in time."""
    if np.array_equal(sim_trace, obs_trace):
        return 0.0, np.zeros(np.size(sim_trace))
    value, grad = w2_distance_sq(sim_trace, obs_trace, dt, method, with_grad=True)
    return value, grad / trapezoid_weights(np.size(sim_trace), dt)


# -- HV -----------------------------------------------------------------------------


@dataclass(frozen=True)
class HVRescale:
    time: float
    amplitude: float


def hv_misfit_trace(sim_trace, obs_trace, p: HVParams, rescale: HVRescale, warm_start: Field | None = None):
    """Return ``(value, adjoint trace, geodesic velocity)``.

    With ``rho = f / a`` on ``x = t / T`` the value is ``a^2 T d^2``, which makes
    the large-kappa limit coincide with the L2 misfit. The adjoint density is
    ``-a z(t/T, 0)``. Raises the solver's errors; callers decide on fallbacks.
    """
    f = np.asarray(sim_trace, dtype=float)
    g = np.asarray(obs_trace, dtype=float)
    a, T = rescale.amplitude, rescale.time
    scale = a * a * T  # the one constant mapping unit-square values back to trace units
    grid = Grid1D(f.size)
    res = hv_distance(Signal(grid, f / a), Signal(grid, g / a), p, warm_start=warm_start)
    adj = -a * res.path.z.values[0]
    return scale * res.distance_sq, adj, res.path.v


def _hv_rescale(kind: HVMisfit, obs: ShotRecord) -> HVRescale:
    T = kind.time_rescale or (obs.nt - 1) * obs.dt
    a = kind.amp_rescale or float(np.max(np.abs(obs.traces)))
    return HVRescale(T, a if a > 0 else 1.0)


# -- dispatch -----------------------------------------------------------------------


def evaluate_misfit(kind: MisfitKind, sim: ShotRecord, obs: ShotRecord, cache: dict | None = None) -> MisfitEval:
    """Sum of per-trace misfits with stacked adjoint sources (fixed trace order).

    ``cache`` (HV only) maps a trace index to the previous geodesic velocity,
    used as an extra warm start and updated in place.
    """
    _check_pair(sim, obs)
    if isinstance(kind, L2Misfit):
        return l2_misfit(sim, obs)
    nr, nt = sim.traces.shape
    adj = np.zeros((nr, nt))
    values = np.zeros(nr)
    fallbacks = 0
    if isinstance(kind, W2Misfit):
        for r in range(nr):
            values[r], adj[r] = w2_misfit_trace(sim.traces[r], obs.traces[r], sim.dt, kind.normalization)
    elif isinstance(kind, HVMisfit):
        rescale = _hv_rescale(kind, obs)
        tw = trapezoid_weights(nt, sim.dt)
        for r in range(nr):
            f, g = sim.traces[r], obs.traces[r]
            if np.array_equal(f, g):
                continue
            warm = cache.get(r) if cache is not None else None
            try:
                values[r], adj[r], v = hv_misfit_trace(f, g, kind.params, rescale, warm)
                if cache is not None:
                    cache[r] = v
            except (HVSolverError, CharacteristicCrossingError) as exc:
                log.warning("HV solver failed on trace %d (%s); using L2 for this trace", r, exc)
                fallbacks += 1
                values[r] = 0.5 * float((f - g) ** 2 @ tw)
                adj[r] = f - g
    else:
        raise TypeError(f"unknown misfit kind {kind!r}")
    return MisfitEval(float(np.sum(values)), adj, fallbacks)
