"""FWI driver: adjoint-state objective and gradient over shots, L-BFGS loop, run artefacts."""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import io
from .acoustic import (
    Acquisition,
    CFLError,
    PropagationError,
    ShotRecord,
    VelocityModel,
    adjoint_states,
    gradient_mask,
    ricker,
    second_time_difference,
    simulate_forward,
)
from .hv_metric import HVParams, PeakMatch, Zero
from .misfits import HVMisfit, L2Misfit, MisfitKind, ShiftNormalize, SquareNormalize, W2Misfit, evaluate_misfit
from .numerics import trapezoid_weights
from .optimize import InversionReport, OptimizerConfig, lbfgs_minimize

log = logging.getLogger(__name__)

SPEED_BOUNDS = (300.0, 6000.0)
DEFAULT_SIGMA_CELLS = float(np.sqrt(30.0))


class ConfigError(ValueError):
    pass


# -- configuration ------------------------------------------------------------------


def build_acquisition(d: dict) -> Acquisition:
    """Acquisition from a JSON-style dict.

    Keys: ``sources`` (list of [x, z]) or ``source_line`` ({z, x0, x1, n});
    ``receivers`` or ``receiver_line`` likewise; ``dt``, ``nt``;
    ``wavelet`` ({peak_freq, t0, amplitude}); optional ``sponge_width``,
    ``sponge_strength``, ``free_surface``.
    """

    def positions(key):
        if key + "s" in d:
            return [tuple(p) for p in d[key + "s"]]
        line = d.get(key + "_line")
        if line is None:
            raise ConfigError(f"acquisition needs '{key}s' or '{key}_line'")
        xs = np.linspace(line["x0"], line["x1"], int(line["n"]))
        return [(float(x), float(line["z"])) for x in xs]

    try:
        dt, nt = float(d["dt"]), int(d["nt"])
        wv = d.get("wavelet", {})
        f = float(wv.get("peak_freq", 15.0))
        t0 = float(wv.get("t0", 1.5 / f))
        wavelet = float(wv.get("amplitude", 1.0)) * ricker(f, t0, dt, nt)
        return Acquisition(
            positions("source"),
            wavelet,
            positions("receiver"),
            dt,
            nt,
            int(d.get("sponge_width", 30)),
            float(d.get("sponge_strength", 0.004)),
            bool(d.get("free_surface", False)),
        )
    except KeyError as exc:
        raise ConfigError(f"acquisition is missing {exc}") from None


def build_misfit(d: dict | None) -> MisfitKind:
    d = dict(d or {"kind": "l2"})
    kind = d.pop("kind", "l2").lower()
    if kind == "l2":
        return L2Misfit()
    if kind == "w2":
        norm = d.get("normalization", "square")
        if norm == "square":
            return W2Misfit(SquareNormalize())
        if norm == "shift":
            return W2Misfit(ShiftNormalize(float(d.get("shift", 0.0))))
        raise ConfigError(f"unknown W2 normalization {norm!r}")
    if kind == "hv":
        init = PeakMatch(int(d["peaks"])) if d.get("peaks") else Zero()
        p = HVParams(
            kappa=float(d.get("kappa", 1e-4)),
            lam=float(d.get("lambda", d.get("lam", 1e-4))),
            epsilon=float(d.get("epsilon", 1e-12)),
            n_time=int(d.get("slices", 16)),
            max_outer_iters=int(d.get("iters", 15)),
            tol=float(d.get("tol", 1e-8)),
            init=init,
        )
        return HVMisfit(p, d.get("time_rescale"), d.get("amp_rescale"))
    raise ConfigError(f"unknown misfit kind {kind!r}")


@dataclass
class FwiConfig:
    """Run configuration; JSON keys mirror the field names."""

    acquisition: dict
    output_dir: str = "fwi_out"
    model_file: str | None = None
    obs_data_files: list = field(default_factory=list)
    initial_model_source: dict = field(default_factory=lambda: {"gaussian_smooth": {"sigma_cells": DEFAULT_SIGMA_CELLS}})
    misfit_kind: dict = field(default_factory=lambda: {"kind": "l2"})
    optimizer: dict = field(default_factory=dict)
    snapshot_every: int = 0
    threads: int = 1

    def __post_init__(self):
        opt = self.optimizer_config()
        if opt.bounds[0] <= 0:
            raise ConfigError("m_min must be positive")
        if self.snapshot_every < 0:
            raise ConfigError("snapshot_every must be >= 0")

    @classmethod
    def from_json(cls, path) -> "FwiConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        base = path.parent

        def resolve(p):
            return None if p is None else str((base / p) if not os.path.isabs(p) else p)

        raw["model_file"] = resolve(raw.get("model_file"))
        raw["obs_data_files"] = [resolve(p) for p in raw.get("obs_data_files", [])]
        raw["output_dir"] = resolve(raw.get("output_dir", "fwi_out"))
        init = raw.get("initial_model_source")
        if isinstance(init, dict) and "file" in init:
            raw["initial_model_source"] = {"file": resolve(init["file"])}
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def optimizer_config(self) -> OptimizerConfig:
        o = dict(self.optimizer)
        if "bounds" in o:
            lo, hi = map(float, o.pop("bounds"))
        else:
            vmin, vmax = map(float, o.pop("speed_bounds", SPEED_BOUNDS))
            lo, hi = 1.0 / vmax**2, 1.0 / vmin**2
        known = {k: o[k] for k in ("memory", "max_iters", "c1", "c2", "max_line_search", "rtol", "gtol") if k in o}
        return OptimizerConfig(bounds=(lo, hi), **known)

    @property
    def first_step(self) -> float:
        """Largest relative change of m allowed in the first trial step."""
        return float(self.optimizer.get("first_step", 0.02))

    def to_dict(self) -> dict:
        return asdict(self)


# -- models -------------------------------------------------------------------------


def smooth_model_gaussian(model: VelocityModel, sigma_cells: float) -> VelocityModel:
    """Separable Gaussian blur of the speeds with reflective edges."""
    if not sigma_cells > 0:
        raise ValueError("sigma_cells must be positive")
    return VelocityModel(gaussian_filter(model.c, sigma_cells, mode="reflect"), model.dx, model.dz)


def two_layer_model(nx=60, nz=40, h=10.0, c_top=2000.0, c_bottom=2500.0, depth_cells=None) -> VelocityModel:
    depth_cells = nz // 2 if depth_cells is None else depth_cells
    c = np.full((nz, nx), c_top)
    c[depth_cells:] = c_bottom
    return VelocityModel(c, h, h)


def marmousi_like(nx: int = 575, nz: int = 188, h: float = 16.0, seed: int = 7) -> VelocityModel:
    """Procedural stand-in for a downsampled Marmousi section.

    Water layer on top, then folded sediment layers with speed increasing with
    depth, two normal faults and a high-velocity wedge. Speeds span roughly
    1500 to 4500 m/s. Deterministic in ``seed``.
    """
    rng = np.random.default_rng(seed)
    x = np.arange(nx)[None, :] * h
    z = np.arange(nz)[:, None] * h
    width, depth = nx * h, nz * h
    water = 0.12 * depth
    # folded horizons: depth shift as a function of x
    fold = 0.08 * depth * np.sin(2 * np.pi * x / (0.7 * width)) + 0.05 * depth * np.sin(2 * np.pi * x / (0.23 * width) + 1.0)
    zz = z - fold * (z / depth)
    # faults displace everything to their right downward
    for xf, throw, dip in ((0.35, 0.06, 0.3), (0.62, -0.05, -0.25)):
        pos = xf * width + dip * z
        zz = zz - np.where(x > pos, throw * depth, 0.0)
    n_layers = 14
    edges = np.sort(rng.uniform(water, depth, n_layers - 1))
    layer = np.searchsorted(edges, zz)
    base = np.linspace(1700.0, 4000.0, n_layers)
    jitter = rng.uniform(-150.0, 150.0, n_layers)
    c = base[layer] + jitter[layer]
    # high-velocity wedge
    wedge = (zz > 0.55 * depth) & (zz < 0.75 * depth) & (np.abs(x - 0.5 * width) < 0.15 * width + 0.4 * (zz - 0.55 * depth))
    c = np.where(wedge, 4500.0, c)
    c = np.where(z < water, 1500.0, c)
    return VelocityModel(np.clip(c, 1500.0, 4500.0), h, h)


def load_initial_model(cfg: FwiConfig, true_model: VelocityModel | None) -> VelocityModel:
    init = cfg.initial_model_source or {}
    if "file" in init:
        c, dx, dz = io.read_model(init["file"])
        return VelocityModel(c, dx, dz)
    if "gaussian_smooth" in init:
        if true_model is None:
            raise ConfigError("gaussian_smooth initial model needs model_file")
        opts = init["gaussian_smooth"] or {}
        sm = smooth_model_gaussian(true_model, float(opts.get("sigma_cells", DEFAULT_SIGMA_CELLS)))
        scale = float(opts.get("scale", 1.0))
        return VelocityModel(sm.c * scale, sm.dx, sm.dz)
    raise ConfigError("initial_model_source must be {'file': path} or {'gaussian_smooth': {...}}")


def model_rmse(a: VelocityModel | np.ndarray, b: VelocityModel | np.ndarray, mask: np.ndarray | None = None) -> float:
    ca = a.c if isinstance(a, VelocityModel) else np.asarray(a)
    cb = b.c if isinstance(b, VelocityModel) else np.asarray(b)
    d = (ca - cb) if mask is None else (ca - cb)[mask]
    return float(np.sqrt(np.mean(d**2)))


# -- objective ----------------------------------------------------------------------


def _shot_objective(m, dx, dz, acq, shot, obs, kind, cache, mask):
    model = VelocityModel.from_slowness_sq(m, dx, dz)
    rec, u = simulate_forward(model, acq, shot)
    ev = evaluate_misfit(kind, rec, obs, cache)
    forcing = ev.adjoint_source * trapezoid_weights(acq.nt, acq.dt)
    grad = np.zeros_like(m)
    dt = acq.dt
    for k, lam in adjoint_states(model, acq, forcing):
        # image condition -sum d2u/dt2 * w * dt with w = lam * dt / m
        grad -= second_time_difference(u.u, k, dt) * lam * (dt * dt / m)
    grad[~mask] = 0.0
    return ev.value, grad, cache, ev.fallbacks


class FwiProblem:
    """``m -> (J, dJ/dm)`` summed over shots in fixed order."""

    def __init__(self, acq: Acquisition, obs: list, kind: MisfitKind, dx: float, dz: float, mask: np.ndarray, threads: int = 1):
        if len(obs) != len(acq.sources):
            raise ConfigError(f"{len(obs)} observed records for {len(acq.sources)} sources")
        self.acq, self.obs, self.kind = acq, list(obs), kind
        self.dx, self.dz, self.mask = dx, dz, mask
        self.threads = max(1, int(threads))
        self.caches = [dict() for _ in obs] if isinstance(kind, HVMisfit) else [None] * len(obs)
        self.evaluations = 0
        self.fallbacks = 0
        self._pool = ProcessPoolExecutor(self.threads) if self.threads > 1 and len(obs) > 1 else None

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __call__(self, m: np.ndarray):
        self.evaluations += 1
        args = [(m, self.dx, self.dz, self.acq, s, self.obs[s], self.kind, self.caches[s], self.mask) for s in range(len(self.obs))]
        try:
            if self._pool is None:
                results = [_shot_objective(*a) for a in args]
            else:
                results = list(self._pool.map(_shot_objective, *zip(*args)))
        except (CFLError, PropagationError) as exc:
            # an unstable trial model; an infinite value makes the line search back off
            log.info("trial model rejected: %s", exc)
            return np.inf, np.zeros_like(m)
        total = 0.0
        grad = np.zeros_like(m)
        for s, (val, g, cache, fb) in enumerate(results):
            total += val
            grad += g
            self.caches[s] = cache
            self.fallbacks += fb
        return total, grad


def objective_and_gradient(m: np.ndarray, obs: list, cfg: FwiConfig, dx: float, dz: float):
    acq = build_acquisition(cfg.acquisition)
    model = VelocityModel.from_slowness_sq(m, dx, dz)
    with FwiProblem(acq, obs, build_misfit(cfg.misfit_kind), dx, dz, gradient_mask(model, acq), cfg.threads) as prob:
        return prob(m)


def synthesize(model: VelocityModel, acq: Acquisition) -> list[ShotRecord]:
    return [simulate_forward(model, acq, s, keep=False)[0] for s in range(len(acq.sources))]


def directional_check(problem: FwiProblem, m: np.ndarray, seed: int = 0, rel_step: float = 1e-3) -> float:
    """Relative mismatch between ``<g, dm>`` and a central difference of J along a random ``dm``.

    ``dm`` is smooth, supported on the inverted cells and scaled to ``rel_step * m``.
    """
    rng = np.random.default_rng(seed)
    dm = gaussian_filter(rng.standard_normal(m.shape), 1.5) * problem.mask
    dm *= rel_step * float(np.mean(m)) / max(float(np.max(np.abs(dm))), np.finfo(float).tiny)
    _, g = problem(m)
    jp, _ = problem(m + dm)
    jm, _ = problem(m - dm)
    fd = (jp - jm) / 2.0
    return abs(float(np.sum(g * dm)) - fd) / abs(fd)


# -- driver -------------------------------------------------------------------------


@dataclass
class RunInputs:
    acq: Acquisition
    obs: list
    initial: VelocityModel
    true_model: VelocityModel | None


def load_inputs(cfg: FwiConfig) -> RunInputs:
    acq = build_acquisition(cfg.acquisition)
    true_model = None
    if cfg.model_file:
        c, dx, dz = io.read_model(cfg.model_file)
        true_model = VelocityModel(c, dx, dz)
    initial = load_initial_model(cfg, true_model)
    if cfg.obs_data_files:
        obs = []
        for p in cfg.obs_data_files:
            tr, dt = io.read_record(p)
            obs.append(ShotRecord(tr, dt))
    elif true_model is not None:
        obs = synthesize(true_model, acq)
    else:
        raise ConfigError("need obs_data_files or a model_file to synthesise data from")
    return RunInputs(acq, obs, initial, true_model)


def invert(
    inputs: RunInputs,
    kind: MisfitKind,
    opt: OptimizerConfig,
    first_step: float = 0.02,
    threads: int = 1,
    on_iteration=None,
) -> InversionReport:
    """Run projected L-BFGS on ``m / mean(m0)`` (a well-scaled variable) and return the report.

    ``report.final_model`` holds speeds; RMSE (when a true model is known) is
    measured on the inverted cells.
    """
    model0 = inputs.initial
    mask = gradient_mask(model0, inputs.acq)
    m0 = model0.m
    scale = float(np.mean(m0))
    lo, hi = opt.bounds
    x0 = np.clip(m0 / scale, lo / scale, hi / scale)
    xopt = OptimizerConfig(
        memory=opt.memory,
        max_iters=opt.max_iters,
        bounds=(lo / scale, hi / scale),
        c1=opt.c1,
        c2=opt.c2,
        max_line_search=opt.max_line_search,
        rtol=opt.rtol,
        gtol=opt.gtol,
        first_step=first_step,
    )
    dx, dz = model0.dx, model0.dz

    with FwiProblem(inputs.acq, inputs.obs, kind, dx, dz, mask, threads) as prob:

        def fun(x):
            j, g = prob(x * scale)
            return j, g * scale

        def monitor(k, x, f, g):
            model = VelocityModel.from_slowness_sq(x * scale, dx, dz)
            if on_iteration is not None:
                on_iteration(k, model, f)
            if inputs.true_model is not None:
                return model_rmse(model, inputs.true_model, mask)
            return None

        rep = lbfgs_minimize(fun, x0, xopt, monitor)
        rep.fallbacks = prob.fallbacks
        if prob.fallbacks:
            log.warning("%d HV trace evaluations fell back to L2", prob.fallbacks)
    rep.final_model = VelocityModel.from_slowness_sq(rep.final_model * scale, dx, dz).c
    return rep


def fwi_run(cfg: FwiConfig) -> InversionReport:
    """Full run: inputs, inversion, snapshots, ``report.csv`` and ``final_model.fwim``."""
    inputs = load_inputs(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    def snapshot(k, model, f):
        if cfg.snapshot_every and k % cfg.snapshot_every == 0:
            io.write_model(out / f"model_{k:04d}.fwim", model.c, model.dx, model.dz)

    t0 = time.perf_counter()
    rep = invert(inputs, build_misfit(cfg.misfit_kind), cfg.optimizer_config(), cfg.first_step, cfg.threads, snapshot)
    write_report(out / "report.csv", rep)
    io.write_model(out / "final_model.fwim", rep.final_model, inputs.initial.dx, inputs.initial.dz)
    rep.wall_time = time.perf_counter() - t0
    return rep


def write_report(path, rep: InversionReport) -> None:
    rows = []
    for k, (j, gn, t) in enumerate(zip(rep.objective_history, rep.gradient_norm_history, rep.time_history)):
        rmse = rep.model_rmse_history[k] if k < len(rep.model_rmse_history) else ""
        rows.append([k, j, gn, rmse, t])
    io.write_csv(path, ["iter", "J", "grad_norm", "rmse", "seconds"], rows)
