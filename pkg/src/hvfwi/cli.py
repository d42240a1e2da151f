"""Command-line interface: ``hvfwi <group> <command> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import io
from .acoustic import VelocityModel, gradient_mask
from .calculus import LANDSCAPE_PRESETS, hessian_apply, l2_inner, plateau_onset, shift_landscape, strict_local_minima
from .hv_metric import CharacteristicCrossingError, HVParams, HVSolverError, PeakMatch, Zero, hv_distance
from .inversion import (
    ConfigError,
    FwiConfig,
    FwiProblem,
    build_acquisition,
    build_misfit,
    directional_check,
    fwi_run,
    load_inputs,
    marmousi_like,
    smooth_model_gaussian,
    synthesize,
    two_layer_model,
)
from .numerics import Signal

log = logging.getLogger("hvfwi")

GRAD_CHECK_TOL = 1e-2


class CliError(Exception):
    pass


def _positive(kind):
    def parse(text):
        try:
            val = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
        if not val > 0:
            raise argparse.ArgumentTypeError(f"must be positive: {text!r}")
        return val

    return parse


def _readable(text):
    if not Path(text).is_file():
        raise argparse.ArgumentTypeError(f"file not found: {text}")
    return text


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("FWI_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise CliError(f"FWI_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise CliError("FWI_THREADS must be >= 1")
        return n
    return 1


def _hv_params(args) -> HVParams:
    init = PeakMatch(args.peaks) if getattr(args, "peaks", 0) else Zero()
    return HVParams(args.kappa, args.lam, args.epsilon, n_time=args.slices, max_outer_iters=args.iters, init=init)


def _add_hv_flags(p, kappa=1.0, lam=1.0, eps=1.0):
    p.add_argument("--kappa", type=_positive(float), default=kappa)
    p.add_argument("--lambda", dest="lam", type=_positive(float), default=lam)
    p.add_argument("--epsilon", type=_positive(float), default=eps)
    p.add_argument("--slices", type=_positive(int), default=16, help="pseudo-time slices")
    p.add_argument("--iters", type=_positive(int), default=15, help="outer alternation iterations")


# -- hv ------------------------------------------------------------------------------


def cmd_hv_dist(args) -> int:
    a, b = io.read_signal_csv(args.a), io.read_signal_csv(args.b)
    if a.grid != b.grid:
        raise CliError(f"signals have {a.grid.n} and {b.grid.n} samples")
    res = hv_distance(a, b, _hv_params(args))
    print(repr(res.distance_sq))
    if args.out:
        path = res.path
        t = path.grid.time.points
        rows = [
            (t[k], a.x[i], path.f.values[k, i], path.v.values[k, i], path.z.values[k, i])
            for k in range(t.size)
            for i in range(a.grid.n)
        ]
        io.write_csv(args.out, ["t", "x", "f", "v", "z"], rows)
    return 0


def cmd_hv_landscape(args) -> int:
    f = io.read_signal_csv(args.signal)
    kind, kappa, lam, eps = LANDSCAPE_PRESETS[args.preset]
    p = None
    if kind == "hv":
        init = PeakMatch(args.peaks) if args.peaks else Zero()
        p = HVParams(kappa, lam, eps, n_time=args.slices, max_outer_iters=args.iters, init=init)
    # shifts snap to whole grid cells so every shifted signal is exact
    cells = np.rint(np.linspace(0.0, args.shift_max, args.shift_steps) / f.grid.h)
    shifts = np.unique(cells) * f.grid.h
    curve = shift_landscape(f, shifts, p, kind)
    io.write_csv(args.out, ["s", "J"], zip(curve.shifts, curve.values))
    minima = strict_local_minima(curve.values)
    onset = plateau_onset(curve.shifts, curve.values)
    print(f"strict local minima: {len(minima)}")
    print("minima at s = " + ", ".join(f"{curve.shifts[i]:.6g}" for i in minima))
    print("plateau onset: " + ("none" if onset is None else f"{onset:.6g}"))
    return 0


def cmd_hv_hessian_check(args) -> int:
    rho = io.read_signal_csv(args.signal)
    p = _hv_params(args)
    x = rho.x
    M = float(np.max(np.abs(np.gradient(rho.values, rho.grid.h))))
    lower = p.kappa / (M * M + p.kappa)
    modes = [Signal(rho.grid, np.sin(k * np.pi * x)) for k in range(1, args.modes + 1)]
    h = [hessian_apply(rho, th, p) for th in modes]
    worst_sym = 0.0
    for i in range(len(modes)):
        for j in range(i + 1, len(modes)):
            a, b = l2_inner(modes[i], h[j]), l2_inner(modes[j], h[i])
            # off-diagonal entries can vanish, so scale by the norms rather than the entries
            scale = np.sqrt(l2_inner(modes[i], modes[i]) * l2_inner(h[j], h[j]))
            worst_sym = max(worst_sym, abs(a - b) / scale)
    combo = Signal(rho.grid, 2.0 * modes[0].values - 3.0 * modes[-1].values)
    lin = hessian_apply(rho, combo, p).values - (2.0 * h[0].values - 3.0 * h[-1].values)
    lin_err = float(np.max(np.abs(lin)) / max(np.max(np.abs(combo.values)), 1e-300))
    ok = worst_sym <= 1e-10 and lin_err <= 1e-10
    print(f"symmetry rel err: {worst_sym:.3e}")
    print(f"linearity rel err: {lin_err:.3e}")
    print(f"lower bound kappa/(M^2+kappa) = {lower:.6g} (M = {M:.6g})")
    print("k,rayleigh,bound_ok")
    for k, (th, hth) in enumerate(zip(modes, h), start=1):
        q = l2_inner(th, hth) / l2_inner(th, th)
        good = lower - 1e-10 <= q <= 1 + 1e-10
        ok &= good
        print(f"{k},{q:.8g},{int(good)}")
    return 0 if ok else 1


# -- model ---------------------------------------------------------------------------


def _read_model(path) -> VelocityModel:
    c, dx, dz = io.read_model(path)
    return VelocityModel(c, dx, dz)


def cmd_model_smooth(args) -> int:
    m = smooth_model_gaussian(_read_model(args.model), args.sigma)
    io.write_model(args.out, m.c, m.dx, m.dz)
    return 0


def cmd_model_export_pgm(args) -> int:
    io.write_pgm(args.out, _read_model(args.model).c)
    return 0


def cmd_model_generate(args) -> int:
    if args.kind == "two-layer":
        m = two_layer_model(args.nx or 60, args.nz or 40, args.h or 10.0)
    else:
        m = marmousi_like(args.nx or 575, args.nz or 188, args.h or 16.0, args.seed)
    io.write_model(args.out, m.c, m.dx, m.dz)
    return 0


# -- data / fwi ----------------------------------------------------------------------


def _load_config(args) -> FwiConfig:
    if getattr(args, "fixture", None):
        ref = resources.files("hvfwi") / "data" / "fixture20" / f"config_{args.fixture}.json"
        with resources.as_file(ref) as path:
            cfg = FwiConfig.from_json(path)
    else:
        cfg = FwiConfig.from_json(args.config)
    cfg.threads = _threads(args)
    return cfg


def cmd_data_synthesize(args) -> int:
    cfg = _load_config(args)
    if not cfg.model_file:
        raise CliError("config needs model_file to synthesise data")
    c, dx, dz = io.read_model(cfg.model_file)
    acq = build_acquisition(cfg.acquisition)
    records = synthesize(VelocityModel(c, dx, dz), acq)
    out = Path(args.out)
    files = []
    for s, rec in enumerate(records):
        name = f"shot_{s:03d}.fwir"
        io.write_record(out / name, rec.traces, rec.dt)
        files.append(name)
    io.write_json(
        out / "manifest.json",
        {
            "model_file": str(cfg.model_file),
            "dt": acq.dt,
            "nt": acq.nt,
            "sources": [list(p) for p in acq.sources],
            "receivers": [list(p) for p in acq.receivers],
            "files": files,
        },
    )
    print(f"wrote {len(files)} shot records to {out}")
    return 0


def cmd_fwi_run(args) -> int:
    cfg = _load_config(args)
    if args.out:
        cfg.output_dir = args.out
    rep = fwi_run(cfg)
    j = rep.objective_history
    print(f"status: {rep.status}; iterations: {rep.iterations}; J: {j[0]:.6g} -> {j[-1]:.6g}")
    print(f"report: {Path(cfg.output_dir) / 'report.csv'}")
    return 0


def cmd_fwi_grad_check(args) -> int:
    cfg = _load_config(args)
    inputs = load_inputs(cfg)
    mask = gradient_mask(inputs.initial, inputs.acq)
    kind = build_misfit(cfg.misfit_kind)
    with FwiProblem(inputs.acq, inputs.obs, kind, inputs.initial.dx, inputs.initial.dz, mask, cfg.threads) as prob:
        err = directional_check(prob, inputs.initial.m, seed=args.seed, rel_step=args.step)
    print(f"relative error: {err:.3e}")
    return 0 if err <= GRAD_CHECK_TOL else 1


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hvfwi", description="HV metric tools and full waveform inversion.")
    parser.add_argument("--threads", type=_positive(int), default=None, help="worker processes (default: $FWI_THREADS or 1)")
    parser.add_argument("-v", "--verbose", action="store_true")
    groups = parser.add_subparsers(dest="group", required=True)

    hv = groups.add_parser("hv", help="HV distance tools").add_subparsers(dest="command", required=True)
    p = hv.add_parser("dist", help="squared HV distance between two CSV signals")
    p.add_argument("--a", type=_readable, required=True)
    p.add_argument("--b", type=_readable, required=True)
    _add_hv_flags(p)
    p.add_argument("--peaks", type=int, default=0, help="start from a k-peak matching velocity")
    p.add_argument("--out", help="CSV of the geodesic fields (t, x, f, v, z)")
    p.set_defaults(func=cmd_hv_dist)

    presets = "; ".join(
        f"{k}: L2" if v[0] == "l2" else f"{k}: kappa={v[1]:g}, lambda={v[2]:g}, epsilon={v[3]:g}" for k, v in LANDSCAPE_PRESETS.items()
    )
    p = hv.add_parser(
        "landscape",
        help="misfit of a signal against its shifted copies",
        description=f"Presets: {presets}. hv-l2 and hv-l2-alt are two settings for the L2-like regime.",
    )
    p.add_argument("--signal", type=_readable, required=True)
    p.add_argument("--shift-max", type=_positive(float), required=True)
    p.add_argument("--shift-steps", type=_positive(int), default=25)
    p.add_argument("--preset", choices=sorted(LANDSCAPE_PRESETS), default="hv-h2")
    p.add_argument("--slices", type=_positive(int), default=16)
    p.add_argument("--iters", type=_positive(int), default=60)
    p.add_argument("--peaks", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_hv_landscape)

    p = hv.add_parser("hessian-check", help="symmetry, linearity and spectral bounds of the Hessian at rho0 = rho1")
    p.add_argument("--signal", type=_readable, required=True)
    _add_hv_flags(p)
    p.add_argument("--modes", type=_positive(int), default=8)
    p.set_defaults(func=cmd_hv_hessian_check)

    model = groups.add_parser("model", help="velocity model utilities").add_subparsers(dest="command", required=True)
    p = model.add_parser("smooth", help="Gaussian smoothing")
    p.add_argument("--model", type=_readable, required=True)
    p.add_argument("--sigma", type=_positive(float), default=float(np.sqrt(30.0)), help="in cells")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_model_smooth)
    p = model.add_parser("export-pgm", help="8-bit grayscale image, z downward")
    p.add_argument("--model", type=_readable, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_model_export_pgm)
    p = model.add_parser("generate", help="synthetic test models")
    p.add_argument("--kind", choices=["two-layer", "marmousi-like"], required=True)
    p.add_argument("--nx", type=_positive(int))
    p.add_argument("--nz", type=_positive(int))
    p.add_argument("--h", type=_positive(float), help="grid spacing in metres")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_model_generate)

    data = groups.add_parser("data", help="synthetic data").add_subparsers(dest="command", required=True)
    p = data.add_parser("synthesize", help="shot records from the config's true model")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_data_synthesize)

    fwi = groups.add_parser("fwi", help="inversion").add_subparsers(dest="command", required=True)
    p = fwi.add_parser("run", help="run an inversion")
    _add_config_flags(p)
    p.add_argument("--out", help="override output_dir")
    p.set_defaults(func=cmd_fwi_run)
    p = fwi.add_parser("grad-check", help="directional finite-difference check of the FWI gradient")
    _add_config_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=_positive(float), default=1e-3, help="relative size of the model perturbation")
    p.set_defaults(func=cmd_fwi_grad_check)
    return parser


def _add_config_flags(p):
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", type=_readable, help="FwiConfig JSON")
    src.add_argument("--fixture", choices=["l2", "hv"], help="bundled 20x20 test fixture")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError, io.FormatError, HVSolverError, CharacteristicCrossingError, ValueError, OSError) as exc:
        print(f"hvfwi: error: {exc}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(f"hvfwi: error: invalid JSON: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
