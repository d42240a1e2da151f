"""2D constant-density acoustic modelling: leapfrog forward, exact discrete adjoint.

Arrays are shaped ``(nz, nx)`` with z pointing down. The forward update is

    u[k+1] = g * (2 u[k] + dt^2/m * Lap u[k] - g * u[k-1] + s[k])

with ``g`` the sponge taper (1 in the interior) and ``s[k]`` the source term
``dt^2 / (m dx dz) * wavelet[k]`` at the source node. Receivers sample ``u[k]``
for ``k = 0 .. nt-1``. The adjoint sweep is the exact transpose of this map,
so the dot-product test holds to round-off with or without the sponge.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_SPONGE_WIDTH = 30
DEFAULT_SPONGE_STRENGTH = 0.004
CFL_SAFETY = 0.9
NAN_CHECK_EVERY = 25


class CFLError(ValueError):
    def __init__(self, dt: float, bound: float):
        self.dt = dt
        self.bound = bound
        super().__init__(f"time step dt={dt:.6g} s violates the CFL bound dt <= {bound:.6g} s")


class PropagationError(RuntimeError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"non-finite wavefield detected at or before step {step}")


@dataclass(frozen=True)
class VelocityModel:
    c: np.ndarray = field(repr=False)
    dx: float
    dz: float

    def __post_init__(self):
        c = np.array(self.c, dtype=float)
        if c.ndim != 2:
            raise ValueError("velocity must be a 2D (nz, nx) array")
        if not np.all(np.isfinite(c)) or np.any(c <= 0):
            raise ValueError("velocity must be finite and positive")
        if self.dx <= 0 or self.dz <= 0:
            raise ValueError("grid spacings must be positive")
        c.setflags(write=False)
        object.__setattr__(self, "c", c)

    @property
    def nz(self) -> int:
        return self.c.shape[0]

    @property
    def nx(self) -> int:
        return self.c.shape[1]

    @property
    def m(self) -> np.ndarray:
        """Squared slowness ``1/c^2``."""
        return 1.0 / self.c**2

    @classmethod
    def from_slowness_sq(cls, m: np.ndarray, dx: float, dz: float) -> "VelocityModel":
        return cls(1.0 / np.sqrt(m), dx, dz)

    def node(self, pos) -> tuple[int, int]:
        """Nearest ``(iz, ix)`` node of an ``(x, z)`` position in metres."""
        x, z = pos
        ix, iz = int(round(x / self.dx)), int(round(z / self.dz))
        if not (0 <= ix < self.nx and 0 <= iz < self.nz):
            raise ValueError(f"position {pos} lies outside the {self.nx}x{self.nz} grid")
        return iz, ix


@dataclass(frozen=True)
class Acquisition:
    sources: tuple
    wavelet: np.ndarray = field(repr=False)
    receivers: tuple
    dt: float
    nt: int
    sponge_width: int = DEFAULT_SPONGE_WIDTH
    sponge_strength: float = DEFAULT_SPONGE_STRENGTH
    free_surface: bool = False

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(tuple(map(float, s)) for s in self.sources))
        object.__setattr__(self, "receivers", tuple(tuple(map(float, r)) for r in self.receivers))
        w = np.array(self.wavelet, dtype=float)
        if w.shape != (self.nt,):
            raise ValueError(f"wavelet has {w.shape} samples, expected ({self.nt},)")
        if self.dt <= 0 or self.nt < 2:
            raise ValueError("need dt > 0 and nt >= 2")
        if not self.sources or not self.receivers:
            raise ValueError("need at least one source and one receiver")
        if self.sponge_width < 0 or self.sponge_strength < 0:
            raise ValueError("sponge width and strength must be non-negative")
        w.setflags(write=False)
        object.__setattr__(self, "wavelet", w)

    @property
    def n_receivers(self) -> int:
        return len(self.receivers)

    def check(self, model: VelocityModel) -> None:
        """Raise if the time step breaks the CFL bound or a position is off-grid."""
        bound = cfl_bound(model)
        if self.dt > bound * (1 + 1e-12):
            raise CFLError(self.dt, bound)
        for p in self.sources + self.receivers:
            model.node(p)

    def replace(self, **changes) -> "Acquisition":
        kw = {k: getattr(self, k) for k in self.__dataclass_fields__}
        kw.update(changes)
        return Acquisition(**kw)


@dataclass(frozen=True)
class ShotRecord:
    traces: np.ndarray = field(repr=False)
    dt: float

    def __post_init__(self):
        t = np.array(self.traces, dtype=float)
        if t.ndim != 2:
            raise ValueError("traces must be (n_receivers, nt)")
        if not np.all(np.isfinite(t)):
            raise ValueError("traces must be finite")
        object.__setattr__(self, "traces", t)

    @property
    def n_receivers(self) -> int:
        return self.traces.shape[0]

    @property
    def nt(self) -> int:
        return self.traces.shape[1]


@dataclass(frozen=True)
class Wavefield:
    """Snapshots ``u[k]`` for ``k = 0 .. nt-1``, shaped ``(nt, nz, nx)``."""

    u: np.ndarray = field(repr=False)
    dt: float

    def __post_init__(self):
        if np.ndim(self.u) != 3:
            raise ValueError("wavefield must be (nt, nz, nx)")

    @property
    def nt(self) -> int:
        return self.u.shape[0]


def cfl_bound(model: VelocityModel) -> float:
    return CFL_SAFETY * min(model.dx, model.dz) / (np.sqrt(2.0) * float(model.c.max()))


def ricker(peak_freq: float, t0: float, dt: float, nt: int) -> np.ndarray:
    """Ricker wavelet ``(1 - 2 a) exp(-a)``, ``a = (pi f (t - t0))^2``."""
    if peak_freq <= 0:
        raise ValueError("peak frequency must be positive")
    if t0 < 1.5 / peak_freq:
        raise ValueError(f"t0={t0} cuts off the wavelet; need t0 >= 1.5/peak_freq = {1.5 / peak_freq:.6g}")
    a = (np.pi * peak_freq * (np.arange(nt) * dt - t0)) ** 2
    return (1 - 2 * a) * np.exp(-a)


def sponge_profile(nz: int, nx: int, width: int, strength: float, free_surface: bool = False) -> np.ndarray:
    """Cerjan taper ``exp(-strength * d^2)`` with ``d`` the depth into the layer in cells.

    With ``free_surface`` the top row is pinned to zero instead of damped.
    """

    def one_d(n, taper_start=True, taper_end=True):
        d = np.zeros(n)
        i = np.arange(n)
        if taper_start:
            d = np.maximum(d, width - i)
        if taper_end:
            d = np.maximum(d, width - (n - 1 - i))
        return np.exp(-strength * np.clip(d, 0, None) ** 2)

    g = np.outer(one_d(nz, taper_start=not free_surface), one_d(nx))
    if free_surface:
        g[0, :] = 0.0
    return g


def laplacian(u: np.ndarray, dx: float, dz: float) -> np.ndarray:
    """5-point Laplacian with zero values outside the grid (symmetric operator)."""
    cx, cz = 1.0 / dx**2, 1.0 / dz**2
    out = (-2.0 * (cx + cz)) * u
    out[:, 1:] += cx * u[:, :-1]
    out[:, :-1] += cx * u[:, 1:]
    out[1:, :] += cz * u[:-1, :]
    out[:-1, :] += cz * u[1:, :]
    return out


def _taper(model: VelocityModel, acq: Acquisition, strength: float | None = None) -> np.ndarray:
    s = acq.sponge_strength if strength is None else strength
    return sponge_profile(model.nz, model.nx, acq.sponge_width, s, acq.free_surface)


def _receiver_index(model: VelocityModel, acq: Acquisition):
    nodes = np.array([model.node(r) for r in acq.receivers])
    return nodes[:, 0], nodes[:, 1]


def propagate(model: VelocityModel, acq: Acquisition, src_node, wavelet: np.ndarray, keep: bool = True):
    """Run the leapfrog with one point source. Returns ``(traces, snapshots or None)``."""
    acq.check(model)
    dt = acq.dt
    m = model.m
    coef = dt**2 / m
    g = _taper(model, acq)
    iz, ix = src_node
    src_scale = coef[iz, ix] / (model.dx * model.dz)
    traces = np.zeros((acq.n_receivers, acq.nt))
    snaps = np.zeros((acq.nt, model.nz, model.nx)) if keep else None
    with np.errstate(over="ignore", invalid="ignore"):
        _leapfrog(model, acq, coef, g, (iz, ix), src_scale, wavelet, traces, snaps)
    if not np.all(np.isfinite(traces)):
        raise PropagationError(acq.nt - 1)
    return traces, snaps


def _leapfrog(model, acq, coef, g, src, src_scale, wavelet, traces, snaps):
    iz, ix = src
    rz, rx = _receiver_index(model, acq)
    prev = np.zeros((model.nz, model.nx))
    cur = np.zeros_like(prev)
    for k in range(acq.nt):
        traces[:, k] = cur[rz, rx]
        if snaps is not None:
            snaps[k] = cur
        if k == acq.nt - 1:
            break
        nxt = 2.0 * cur + coef * laplacian(cur, model.dx, model.dz) - g * prev
        nxt[iz, ix] += src_scale * wavelet[k]
        nxt *= g
        prev, cur = cur, nxt
        if k % NAN_CHECK_EVERY == 0 and not np.all(np.isfinite(cur)):
            raise PropagationError(k + 1)


def simulate_forward(model: VelocityModel, acq: Acquisition, shot: int, keep: bool = True):
    """Forward-model one shot. Returns ``(ShotRecord, Wavefield)``; the wavefield is ``None`` if not kept."""
    if not 0 <= shot < len(acq.sources):
        raise IndexError(f"shot index {shot} out of range")
    traces, snaps = propagate(model, acq, model.node(acq.sources[shot]), acq.wavelet, keep)
    return ShotRecord(traces, acq.dt), (Wavefield(snaps, acq.dt) if keep else None)


def adjoint_states(model: VelocityModel, acq: Acquisition, forcing: np.ndarray, sponge_strength: float | None = None):
    """Backward sweep for ``lam[k] = dJ/du[k]`` given ``forcing[r, k] = dJ/d(trace[r, k])``.

    Yields ``(k, lam[k+1])`` for ``k = nt-2 .. 0``. ``lam[nt-1]`` only receives the
    direct forcing since no later state depends on it through a record.
    """
    acq.check(model)
    forcing = np.asarray(forcing, dtype=float)
    if forcing.shape != (acq.n_receivers, acq.nt):
        raise ValueError(f"adjoint sources have shape {forcing.shape}, expected {(acq.n_receivers, acq.nt)}")
    coef = acq.dt**2 / model.m
    g = _taper(model, acq, sponge_strength)
    g2 = g * g
    rz, rx = _receiver_index(model, acq)
    shape = (model.nz, model.nx)
    lam_next = np.zeros(shape)  # lam[k+1]
    lam_next2 = np.zeros(shape)  # lam[k+2]
    # lam[nt-1] is forced directly
    cur = np.zeros(shape)
    np.add.at(cur, (rz, rx), forcing[:, acq.nt - 1])
    lam_next = cur
    for k in range(acq.nt - 2, -1, -1):
        yield k, lam_next
        q = g * lam_next
        cur = 2.0 * q + laplacian(coef * q, model.dx, model.dz) - g2 * lam_next2
        np.add.at(cur, (rz, rx), forcing[:, k])
        lam_next2, lam_next = lam_next, cur
        if k % NAN_CHECK_EVERY == 0 and not np.all(np.isfinite(cur)):
            raise PropagationError(k)


def _time_weights(nt: int, dt: float) -> np.ndarray:
    w = np.full(nt, dt)
    w[[0, -1]] *= 0.5
    return w


def simulate_adjoint(model: VelocityModel, acq: Acquisition, adjoint_sources: ShotRecord) -> Wavefield:
    """Adjoint field for trace-density sources ``dD/df`` (trapezoid-in-time pairing).

    Returns ``w[k] = lam[k+1] * dt / m`` with ``w[nt-1] = 0``. With this scaling
    ``image_gradient(u, w, dt)`` is the exact derivative of the discrete
    objective with respect to ``m`` away from the sponge.
    """
    if adjoint_sources.traces.shape != (acq.n_receivers, acq.nt):
        raise ValueError("adjoint source dimensions do not match the acquisition")
    forcing = adjoint_sources.traces * _time_weights(acq.nt, acq.dt)
    w = np.zeros((acq.nt, model.nz, model.nx))
    scale = acq.dt / model.m
    for k, lam in adjoint_states(model, acq, forcing):
        w[k] = lam * scale
    return Wavefield(w, acq.dt)


def second_time_difference(u: np.ndarray, k: int, dt: float) -> np.ndarray:
    """``d2u/dt2`` at step ``k``; zero initial state before ``k = 0``, one-sided at the end."""
    nt = u.shape[0]
    if k == 0:
        return (u[1] - 2 * u[0]) / dt**2
    if k < nt - 1:
        return (u[k + 1] - 2 * u[k] + u[k - 1]) / dt**2
    if nt >= 4:
        return (2 * u[k] - 5 * u[k - 1] + 4 * u[k - 2] - u[k - 3]) / dt**2
    return (u[k] - 2 * u[k - 1] + u[k - 2]) / dt**2


def image_gradient(u: Wavefield, w: Wavefield, dt: float, mask: np.ndarray | None = None) -> np.ndarray:
    """``-sum_k d2u/dt2[k] * w[k] * dt``, zeroed where ``mask`` is False."""
    if u.u.shape != w.u.shape:
        raise ValueError(f"wavefields are misaligned: {u.u.shape} vs {w.u.shape}")
    grad = np.zeros(u.u.shape[1:])
    for k in range(u.nt):
        if np.any(w.u[k]):
            grad -= second_time_difference(u.u, k, dt) * w.u[k] * dt
    if mask is not None:
        grad = np.where(mask, grad, 0.0)
    return grad


def gradient_mask(model: VelocityModel, acq: Acquisition, collar: int = 2) -> np.ndarray:
    """True on cells that are inverted: outside the sponge and away from sources and receivers."""
    mask = _taper(model, acq) >= 1.0
    for p in acq.sources + acq.receivers:
        iz, ix = model.node(p)
        mask[max(iz - collar, 0) : iz + collar + 1, max(ix - collar, 0) : ix + collar + 1] = False
    return mask


def dot_product_test(
    model: VelocityModel,
    acq: Acquisition,
    seed: int = 0,
    adjoint_sponge_strength: float | None = None,
) -> float:
    """``|<F a, b> - <a, F* b>| / (||F a|| ||b||)`` for a random wavelet ``a`` and record ``b``.

    ``F`` maps the wavelet of source 0 to its record. Passing
    ``adjoint_sponge_strength`` damps the adjoint differently (a negative control).
    """
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(acq.nt)
    b = rng.standard_normal((acq.n_receivers, acq.nt))
    node = model.node(acq.sources[0])
    fa, _ = propagate(model, acq, node, a, keep=False)
    iz, ix = node
    src_scale = acq.dt**2 * model.c[iz, ix] ** 2 / (model.dx * model.dz)
    g = _taper(model, acq, adjoint_sponge_strength)[iz, ix]
    fstar_b = np.zeros(acq.nt)
    for k, lam in adjoint_states(model, acq, b, adjoint_sponge_strength):
        fstar_b[k] = src_scale * g * lam[iz, ix]
    lhs = float(np.sum(fa * b))
    rhs = float(np.dot(a, fstar_b))
    return abs(lhs - rhs) / (np.linalg.norm(fa) * np.linalg.norm(b))
