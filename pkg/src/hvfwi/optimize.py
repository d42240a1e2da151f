"""Projected L-BFGS with a strong-Wolfe line search on box constraints."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class OptimizerConfig:
    memory: int = 10
    max_iters: int = 30
    bounds: tuple[float, float] = (-np.inf, np.inf)
    c1: float = 1e-4
    c2: float = 0.9
    max_line_search: int = 20
    rtol: float = 1e-10
    gtol: float = 1e-12
    first_step: float | None = None  # max-abs model change of the first trial; None means 1/max(1, |d|_inf)

    def __post_init__(self):
        if self.memory < 1:
            raise ValueError("memory must be >= 1")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        lo, hi = self.bounds
        if not lo < hi:
            raise ValueError("bounds must satisfy lower < upper")
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("Wolfe constants need 0 < c1 < c2 < 1")


@dataclass
class InversionReport:
    objective_history: list = field(default_factory=list)
    gradient_norm_history: list = field(default_factory=list)
    model_rmse_history: list = field(default_factory=list)
    time_history: list = field(default_factory=list)
    final_model: np.ndarray | None = None
    wall_time: float = 0.0
    status: str = ""
    evaluations: int = 0
    fallbacks: int = 0  # HV trace solves that fell back to L2

    @property
    def iterations(self) -> int:
        return max(len(self.objective_history) - 1, 0)


Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


class _Counted:
    def __init__(self, fun: Objective):
        self.fun = fun
        self.calls = 0

    def __call__(self, x):
        self.calls += 1
        f, g = self.fun(x)
        return float(f), np.asarray(g, dtype=float)


def _two_loop(g: np.ndarray, s_list, y_list) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_list), reversed(y_list)):
        rho = 1.0 / np.vdot(y, s)
        a = rho * np.vdot(s, q)
        q -= a * y
        alphas.append((rho, a))
    if s_list:
        s, y = s_list[-1], y_list[-1]
        q *= np.vdot(s, y) / np.vdot(y, y)
    for (s, y), (rho, a) in zip(zip(s_list, y_list), reversed(alphas)):
        b = rho * np.vdot(y, q)
        q += (a - b) * s
    return -q


def _free(x, g, lo, hi):
    return ~(((x <= lo) & (g > 0)) | ((x >= hi) & (g < 0)))


def _line_search(fun, x, f0, g0, d, lo, hi, c1, c2, alpha0, max_evals):
    """Strong-Wolfe search along the projected path ``P(x + a d)`` (bracket, then zoom)."""

    def phi(a):
        xa = np.clip(x + a * d, lo, hi)
        fa, ga = fun(xa)
        inside = (xa > lo) & (xa < hi) | (d == 0)
        return xa, fa, ga, float(np.vdot(ga, np.where(inside, d, 0.0)))

    dphi0 = float(np.vdot(g0, d))
    evals = 0
    a_prev, f_prev, dphi_prev = 0.0, f0, dphi0
    a = alpha0
    best = None

    def zoom(a_lo, f_lo, dphi_lo, a_hi, f_hi, dphi_hi):
        nonlocal evals, best
        while evals < max_evals:
            # cubic interpolation with a bisection safeguard
            aj = _cubic_min(a_lo, f_lo, dphi_lo, a_hi, f_hi, dphi_hi)
            lo_b, hi_b = sorted((a_lo, a_hi))
            span = hi_b - lo_b
            if aj is None or not (lo_b + 0.1 * span <= aj <= hi_b - 0.1 * span):
                aj = 0.5 * (a_lo + a_hi)
            xj, fj, gj, dj = phi(aj)
            evals += 1
            if fj < f0 and (best is None or fj < best[1]):
                best = (xj, fj, gj)
            if fj > f0 + c1 * aj * dphi0 or fj >= f_lo:
                a_hi, f_hi, dphi_hi = aj, fj, dj
            else:
                if abs(dj) <= -c2 * dphi0:
                    return xj, fj, gj
                if dj * (a_hi - a_lo) >= 0:
                    a_hi, f_hi, dphi_hi = a_lo, f_lo, dphi_lo
                a_lo, f_lo, dphi_lo = aj, fj, dj
        return None

    while evals < max_evals:
        xa, fa, ga, da = phi(a)
        evals += 1
        if fa < f0 and (best is None or fa < best[1]):
            best = (xa, fa, ga)
        if fa > f0 + c1 * a * dphi0 or (evals > 1 and fa >= f_prev):
            out = zoom(a_prev, f_prev, dphi_prev, a, fa, da)
            return out, evals, best
        if abs(da) <= -c2 * dphi0:
            return (xa, fa, ga), evals, best
        if da >= 0:
            out = zoom(a, fa, da, a_prev, f_prev, dphi_prev)
            return out, evals, best
        a_prev, f_prev, dphi_prev = a, fa, da
        a *= 2.0
    return None, evals, best


def _cubic_min(a, fa, da, b, fb, db):
    if not np.all(np.isfinite([fa, da, fb, db])):
        return None
    d1 = da + db - 3 * (fa - fb) / (a - b)
    rad = d1 * d1 - da * db
    if rad < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(rad)
    denom = db - da + 2 * d2
    if denom == 0:
        return None
    return b - (b - a) * (db + d2 - d1) / denom


def lbfgs_minimize(
    fun: Objective,
    x0: np.ndarray,
    cfg: OptimizerConfig = OptimizerConfig(),
    monitor: Callable[[int, np.ndarray, float, np.ndarray], float | None] | None = None,
) -> InversionReport:
    """Minimise ``fun`` (returning value and gradient) over the box ``cfg.bounds``.

    ``monitor(iteration, x, f, g)`` runs after every accepted step (and at the
    start); a returned number is stored as that iteration's model RMSE.
    """
    start = time.perf_counter()
    lo, hi = cfg.bounds
    x = np.asarray(x0, dtype=float)
    if np.any(x < lo) or np.any(x > hi):
        raise ValueError("initial model violates the bounds")
    counted = _Counted(fun)
    f, g = counted(x)
    rep = InversionReport()

    def record(k):
        rep.objective_history.append(f)
        rep.gradient_norm_history.append(float(np.max(np.abs(g))) if g.size else 0.0)
        rep.time_history.append(time.perf_counter() - start)
        if monitor is not None:
            val = monitor(k, x, f, g)
            if val is not None:
                rep.model_rmse_history.append(float(val))

    record(0)
    s_list: list[np.ndarray] = []
    y_list: list[np.ndarray] = []
    status = "max_iters"
    k = 0
    restarted = False
    while k < cfg.max_iters:
        free = _free(x, g, lo, hi)
        gf = np.where(free, g, 0.0)
        if np.max(np.abs(gf), initial=0.0) < cfg.gtol:
            status = "gtol"
            break
        d = np.where(free, _two_loop(gf, s_list, y_list), 0.0)
        if np.vdot(d, g) >= 0:
            d = -gf
            s_list.clear()
            y_list.clear()
        dmax = float(np.max(np.abs(d)))
        if not s_list:
            alpha0 = (cfg.first_step / dmax) if cfg.first_step else 1.0 / max(1.0, dmax)
        else:
            alpha0 = 1.0
        found, _, best = _line_search(counted, x, f, g, d, lo, hi, cfg.c1, cfg.c2, alpha0, cfg.max_line_search)
        if found is None:
            if best is not None:
                # sufficient decrease without curvature; accept the best point but drop memory
                found = best
            elif not restarted and s_list:
                s_list.clear()
                y_list.clear()
                restarted = True
                continue
            else:
                status = "line_search_failed"
                break
        restarted = False
        x_new, f_new, g_new = found
        s, y = x_new - x, g_new - g
        if np.vdot(s, y) > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            s_list.append(s)
            y_list.append(y)
            del s_list[: -cfg.memory], y_list[: -cfg.memory]
        rel = (f - f_new) / abs(f) if f != 0 else np.inf
        x, f, g = x_new, f_new, g_new
        k += 1
        record(k)
        if rel < cfg.rtol:
            status = "rtol"
            break
    rep.final_model = x
    rep.wall_time = time.perf_counter() - start
    rep.status = status
    rep.evaluations = counted.calls
    return rep
