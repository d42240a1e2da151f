"""Acceptance suite: one test group per criterion, each recording a PASS/FAIL verdict line.

Sub-checks that are known to be unattainable run their real assertion under a
strict xfail, so the verdict is printed as FAIL, the run stays green, and an
unexpected pass is reported.
"""

import time
from importlib import resources

import numpy as np
import pytest
import scipy.linalg as sl

from hvfwi.acoustic import Acquisition, VelocityModel, dot_product_test, gradient_mask, ricker, simulate_forward
from hvfwi.calculus import (
    hessian_apply,
    hessian_quadratic_form,
    l2_inner,
    plateau_onset,
    shift_landscape,
    sobolev_norm,
    strict_local_minima,
)
from hvfwi.hv_metric import HVParams, PeakMatch, hv_distance
from hvfwi.inversion import (
    DEFAULT_SIGMA_CELLS,
    FwiConfig,
    FwiProblem,
    RunInputs,
    build_acquisition,
    build_misfit,
    directional_check,
    invert,
    load_inputs,
    marmousi_like,
    smooth_model_gaussian,
    synthesize,
    two_layer_model,
)
from hvfwi.misfits import HVMisfit, L2Misfit, W2Misfit
from hvfwi.numerics import Grid1D, Signal
from hvfwi.optimize import OptimizerConfig


def bumps(x, rng, shift=None):
    m = rng.integers(1, 4)
    c = rng.uniform(0.3, 0.7, m)
    w = rng.uniform(0.07, 0.12, m)
    a = rng.uniform(-1, 1, m)
    return sum(ai * np.exp(-(((x - ci) / wi) ** 2)) for ci, wi, ai in zip(c, w, a)), (c, w, a)


def perturbed(x, rng, params):
    c, w, a = params
    m = len(c)
    c2 = c + rng.uniform(-0.05, 0.05, m)
    w2 = w * rng.uniform(0.9, 1.1, m)
    a2 = a * rng.uniform(0.8, 1.2, m)
    return sum(ai * np.exp(-(((x - ci) / wi) ** 2)) for ci, wi, ai in zip(c2, w2, a2))


# -- 1. metric axioms ---------------------------------------------------------------


def test_criterion_1_metric_axioms(acceptance):
    start = time.perf_counter()
    g = Grid1D(101)
    x = g.points
    rng = np.random.default_rng(1)
    triples = [(1.0, 1.0, 1.0), (0.1, 0.1, 1e-2), (1e-2, 1e-2, 1e-4)]
    worst_self, worst_excess, min_d, monotone = 0.0, -np.inf, np.inf, True
    for i in range(50):
        p = HVParams(*triples[i % 3])
        r0v, prm = bumps(x, rng)
        r0, r1 = Signal(g, r0v), Signal(g, perturbed(x, rng, prm))
        self_d = hv_distance(r0, r0, p)
        res = hv_distance(r0, r1, p)
        l2 = 0.5 * float(g.weights() @ (r1.values - r0.values) ** 2)
        worst_self = max(worst_self, self_d.distance_sq)
        worst_excess = max(worst_excess, (res.distance_sq - l2) / l2)
        min_d = min(min_d, res.distance_sq)
        for r in (self_d, res):
            monotone &= bool(np.all(np.diff(r.action_history) <= 0))
    elapsed = time.perf_counter() - start
    ok = worst_self <= 1e-12 and min_d >= 0 and worst_excess <= 1e-10 and monotone and elapsed < 60
    acceptance.record(
        "1", "", ok,
        f"max d(r,r)={worst_self:.1e}, min d={min_d:.2e}, max (d-L2/2)/(L2/2)={worst_excess:.2e}, monotone={monotone}, {elapsed:.0f}s",
    )
    assert ok


# -- 2. gradient lemma --------------------------------------------------------------


def test_criterion_2_gradient_lemma(acceptance):
    start = time.perf_counter()
    g = Grid1D(401)
    x = g.points
    w = g.weights()
    p = HVParams(0.1, 0.1, 1e-3, n_time=16, max_outer_iters=400, tol=1e-13)
    rng = np.random.default_rng(2)
    errs = []
    for _ in range(20):
        r0v, prm = bumps(x, rng)
        r1 = Signal(g, perturbed(x, rng, prm))
        th = np.sin(rng.integers(1, 5) * np.pi * x + rng.uniform(0, np.pi)) * np.exp(-(((x - 0.5) / 0.2) ** 2))
        res = hv_distance(Signal(g, r0v), r1, p)
        pred = float(w @ (-res.path.z.values[0] * th))
        s = 1e-4
        dp = hv_distance(Signal(g, r0v + s * th), r1, p).distance_sq
        dm = hv_distance(Signal(g, r0v - s * th), r1, p).distance_sq
        fd = (dp - dm) / (2 * s)
        errs.append(abs(pred - fd) / abs(fd))
    elapsed = time.perf_counter() - start
    ok = max(errs) <= 1e-3 and elapsed < 300
    acceptance.record("2", "", ok, f"max rel err {max(errs):.2e} over 20 triples (n=401, 16 slices), {elapsed:.0f}s")
    assert ok


# -- 3. Hessian operator ------------------------------------------------------------


def test_criterion_3_hessian_operator(acceptance):
    start = time.perf_counter()
    g = Grid1D(201)
    x = g.points
    rho = Signal(g, np.exp(-(((x - 0.5) / 0.12) ** 2)))
    p = HVParams(kappa=0.5, lam=0.1, epsilon=1e-3, n_time=16, max_outer_iters=400, tol=1e-14)
    rng = np.random.default_rng(3)
    a, b = (Signal(g, rng.standard_normal(g.n)) for _ in range(2))
    ha, hb = hessian_apply(rho, a, p), hessian_apply(rho, b, p)
    sym = abs(l2_inner(a, hb) - l2_inner(ha, b)) / abs(l2_inner(a, hb))
    lin_v = hessian_apply(rho, Signal(g, 2 * a.values - 3 * b.values), p).values - (2 * ha.values - 3 * hb.values)
    lin = float(np.max(np.abs(lin_v)) / np.max(np.abs(2 * a.values - 3 * b.values)))

    th = Signal(g, np.sin(2 * np.pi * x) * np.exp(-(((x - 0.5) / 0.25) ** 2)))
    s = 1e-2
    dp = hv_distance(Signal(g, rho.values + s * th.values), rho, p).distance_sq
    dm = hv_distance(Signal(g, rho.values - s * th.values), rho, p).distance_sq
    fd = (dp + dm) / s**2
    q = hessian_quadratic_form(rho, th, p)
    qerr = abs(q - fd) / fd

    M = float(np.max(np.abs(np.gradient(rho.values, g.h))))
    lower = p.kappa / (M * M + p.kappa)
    bound_ok = True
    for k in range(1, 21):
        mode = Signal(g, np.sin(k * np.pi * x))
        ray = hessian_quadratic_form(rho, mode, p) / l2_inner(mode, mode)
        bound_ok &= lower * (1 - 1e-10) <= ray <= 1 + 1e-10
    elapsed = time.perf_counter() - start
    ok = sym <= 1e-10 and lin <= 1e-10 and qerr <= 0.05 and bound_ok and elapsed < 300
    acceptance.record(
        "3", "", ok,
        f"symmetry {sym:.1e}, linearity {lin:.1e}, quad form vs FD {qerr:.2%}, spectral bound k=1..20 {bound_ok}, {elapsed:.0f}s",
    )
    assert ok


# -- 4. regime interpolation --------------------------------------------------------


def test_criterion_4a_large_kappa_is_identity(acceptance):
    g = Grid1D(201)
    x = g.points
    rho = Signal(g, 3.0 * np.exp(-(((x - 0.5) / 0.1) ** 2)))
    worst = 0.0
    for k in (1, 4, 12):
        th = Signal(g, np.sin(k * np.pi * x))
        d = Signal(g, hessian_apply(rho, th, HVParams(kappa=1e10)).values - th.values)
        worst = max(worst, np.sqrt(l2_inner(d, d) / l2_inner(th, th)))
    ok = worst <= 1e-3
    acceptance.record("4", "a", ok, f"kappa=1e10 ||H t - t||/||t|| = {worst:.1e}")
    assert ok


def _sandwich_constants(n, a, p, K=20):
    """Extreme generalised eigenvalues of <t, H t> against ||t||^2_{H^-2} on span{sin(k pi x), k <= K}."""
    g = Grid1D(n)
    x = g.points
    w = g.weights()
    rho = Signal(g, a * x)
    Q = np.array([np.sin(k * np.pi * x) for k in range(1, K + 1)]).T
    HQ = np.array([hessian_apply(rho, Signal(g, Q[:, j]), p).values for j in range(K)]).T
    A = Q.T @ (w[:, None] * HQ)
    A = 0.5 * (A + A.T)

    def h2(v):
        return sobolev_norm(Signal(g, v), -1, p.kappa, p.lam, p.epsilon, a) ** 2

    B = np.empty((K, K))
    for i in range(K):
        for j in range(i, K):
            B[i, j] = B[j, i] = 0.25 * (h2(Q[:, i] + Q[:, j]) - h2(Q[:, i] - Q[:, j]))
    ev = sl.eigh(A, B, eigvals_only=True)
    return ev[0], ev[-1], rho, Q, h2


def test_criterion_4b_h_minus_2_sandwich(acceptance):
    start = time.perf_counter()
    a = 0.01
    p = HVParams(1e-3, 1e-3, 1e-3)  # kappa > a^2 as the sandwich requires
    c1, c2, rho, Q, h2 = _sandwich_constants(201, a, p)
    c1f, c2f, *_ = _sandwich_constants(401, a, p)
    # held-out band-limited perturbations at three scales must respect the fitted constants
    rng = np.random.default_rng(4)
    inside, scale_drift = True, 0.0
    for _ in range(10):
        v = Q @ rng.standard_normal(Q.shape[1])
        ratios = []
        for scale in (1e-2, 1.0, 1e2):
            th = Signal(rho.grid, scale * v)
            ratios.append(hessian_quadratic_form(rho, th, p) / h2(th.values))
        inside &= all(c1 * (1 - 1e-8) <= r <= c2 * (1 + 1e-8) for r in ratios)
        scale_drift = max(scale_drift, (max(ratios) - min(ratios)) / ratios[1])
    grid_drift = max(abs(c1f - c1) / c1, abs(c2f - c2) / c2)
    ok = c1 > 0 and np.isfinite(c2) and inside and scale_drift <= 1e-8 and grid_drift <= 0.05
    acceptance.record(
        "4", "b", ok,
        f"c1={c1:.4g}, c2={c2:.4g} (n=201); n=401 drift {grid_drift:.1%}; held-out inside={inside}; scale drift {scale_drift:.1e}; {time.perf_counter() - start:.0f}s",
    )
    assert ok


EPS_SWEEP = (1e-1, 1e-5, 1e-7, 1e-9)
SLOPE_KS = np.array([2, 3, 4, 6, 8, 11, 16])


@pytest.fixture(scope="module")
def slope_sweep():
    g = Grid1D(401)
    x = g.points
    rho = Signal(g, 0.1 * x)
    out = []
    for eps in EPS_SWEEP:
        p = HVParams(1e-5, 1e-5, eps)
        q, r = [], []
        for k in SLOPE_KS:
            th = Signal(g, np.sin(k * np.pi * x))
            hq = hessian_quadratic_form(rho, th, p)
            q.append(hq)
            r.append(l2_inner(th, th) - hq)
        out.append((np.polyfit(np.log(SLOPE_KS), np.log(q), 1)[0], np.polyfit(np.log(SLOPE_KS), np.log(r), 1)[0]))
    return out


@pytest.mark.xfail(strict=True, reason="<t,Ht> is bounded below by kappa/(kappa+M^2)||t||^2, so it cannot decay like k^-4; see the decisions ledger")
def test_criterion_4c_flattening_slopes(acceptance, slope_sweep):
    h_slopes = [s[0] for s in slope_sweep]
    ih_slopes = [s[1] for s in slope_sweep]
    ok = h_slopes[0] <= -3 and h_slopes[1] >= -2.5 and h_slopes[-1] >= -1.5
    acceptance.record(
        "4", "c", ok,
        "log-log slopes of <t_k,H t_k> for eps="
        + ", ".join(f"{e:g}: {s:+.2f}" for e, s in zip(EPS_SWEEP, h_slopes))
        + " | informational <t_k,(I-H) t_k>: "
        + ", ".join(f"{s:+.2f}" for s in ih_slopes),
    )
    assert ok


# -- 5. landscape -------------------------------------------------------------------

LANDSCAPE_N = 181
LANDSCAPE_AMP = 0.02


@pytest.fixture(scope="module")
def landscapes():
    g = Grid1D(LANDSCAPE_N)
    x = g.points
    u = (np.pi * 15 * (x - 0.3)) ** 2
    f = Signal(g, LANDSCAPE_AMP * (1 - 2 * u) * np.exp(-u))
    shifts = np.arange(25) * 2 * g.h  # four wavelengths, exact grid shifts
    curves = {"l2": shift_landscape(f, shifts, kind="l2")}
    timings = {}
    for name, (k, lam, eps) in {"hv-h2": (1e-5, 1e-5, 1e-5), "hv-h1": (1e-5, 10.0, 1e-5)}.items():
        t = time.perf_counter()
        p = HVParams(k, lam, eps, n_time=16, max_outer_iters=60, init=PeakMatch(1))
        curves[name] = shift_landscape(f, shifts, p, "hv")
        timings[name] = time.perf_counter() - t
    return shifts, curves, timings


def _describe(shifts, curve):
    mins = strict_local_minima(curve.values)
    onset = plateau_onset(shifts, curve.values)
    return mins, onset, f"minima at s={[round(float(shifts[i]), 4) for i in mins]}, plateau from {onset if onset is None else round(onset, 4)}"


def test_criterion_5_l2_and_h2(acceptance, landscapes):
    shifts, curves, timings = landscapes
    l2_mins, _, l2_txt = _describe(shifts, curves["l2"])
    h2_mins, h2_onset, h2_txt = _describe(shifts, curves["hv-h2"])
    ok_l2 = len(l2_mins) >= 2
    ok_h2 = h2_mins == [0] and h2_onset is not None
    acceptance.record("5", "l2", ok_l2, l2_txt)
    acceptance.record("5", "hv-h2", ok_h2, h2_txt + f", {timings['hv-h2']:.0f}s")
    assert ok_l2 and ok_h2


@pytest.mark.xfail(
    strict=True,
    reason="no amplitude makes both HV presets flatten inside four wavelengths: h1 weights transport gradients 1e6 times more than h2; see the decisions ledger",
)
def test_criterion_5_h1(acceptance, landscapes):
    shifts, curves, timings = landscapes
    h1_mins, h1_onset, h1_txt = _describe(shifts, curves["hv-h1"])
    h2_onset = plateau_onset(shifts, curves["hv-h2"].values)
    single = h1_mins == [0] and h1_onset is not None
    earlier = h1_onset is not None and h2_onset is not None and h1_onset < h2_onset
    acceptance.record("5", "hv-h1", single and earlier, h1_txt + f" (single minimum {single}, earlier plateau than h2 {earlier}), {timings['hv-h1']:.0f}s")
    assert single and earlier


# -- 6. wave operator ---------------------------------------------------------------


def test_criterion_6_wave_operator(acceptance):
    start = time.perf_counter()
    layered = VelocityModel(np.where(np.arange(50)[:, None] < 25, 2000.0, 2600.0) * np.ones((1, 50)), 10.0, 10.0)
    dt, nt = 1e-3, 300

    def acq(sponge_width):
        return Acquisition([(150.0, 150.0)], ricker(20.0, 0.08, dt, nt), [(350.0, 200.0), (250.0, 350.0)], dt, nt, sponge_width, 0.01)

    refl = dot_product_test(layered, acq(0))
    sponge = dot_product_test(layered, acq(12))

    h = 5.0
    model = VelocityModel(np.full((201, 201), 2000.0), h, h)
    w = ricker(15.0, 0.1, dt, 450)
    rec, _ = simulate_forward(model, Acquisition([(300.0, 500.0)], w, [(700.0, 500.0)], dt, 450, 30, 0.004), 0, keep=False)
    onset_src = np.argmax(np.abs(w) > 0.01 * np.abs(w).max())
    onset_rec = np.argmax(np.abs(rec.traces[0]) > 0.01 * np.abs(rec.traces[0]).max())
    fb_err = abs((onset_rec - onset_src) * dt - 400.0 / 2000.0)
    elapsed = time.perf_counter() - start
    ok = refl <= 1e-10 and sponge <= 1e-6 and fb_err <= 2 * dt and elapsed < 60
    acceptance.record("6", "", ok, f"dot product reflecting {refl:.1e}, sponge {sponge:.1e}; first break error {fb_err / dt:.1f} dt; {elapsed:.0f}s")
    assert ok


# -- 7. end-to-end gradient ---------------------------------------------------------


def test_criterion_7_fwi_gradient(acceptance):
    start = time.perf_counter()
    base = resources.files("hvfwi") / "data" / "fixture20"
    errs = {}
    with resources.as_file(base / "config_l2.json") as l2_path, resources.as_file(base / "config_hv.json") as hv_path:
        inputs = load_inputs(FwiConfig.from_json(l2_path))
        mask = gradient_mask(inputs.initial, inputs.acq)
        hv_kind = build_misfit(FwiConfig.from_json(hv_path).misfit_kind)
        # squared-amplitude W2 is only piecewise smooth, so it gets a smaller model step
        for name, kind, step in (("L2", L2Misfit(), 1e-3), ("W2", W2Misfit(), 1e-6), ("HV", hv_kind, 1e-3)):
            with FwiProblem(inputs.acq, inputs.obs, kind, 10.0, 10.0, mask) as prob:
                errs[name] = directional_check(prob, inputs.initial.m, rel_step=step)
    elapsed = time.perf_counter() - start
    ok = all(e <= 1e-2 for e in errs.values()) and elapsed < 600
    acceptance.record("7", "", ok, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f"; {elapsed:.0f}s")
    assert ok


# -- 8. toy inversion ---------------------------------------------------------------


def toy_acquisition(freq, n_receivers):
    """Sources on the first row below the top sponge, receivers on the last row above the bottom one."""
    return build_acquisition(
        {
            "source_line": {"z": 100.0, "x0": 150.0, "x1": 450.0, "n": 3},
            "receiver_line": {"z": 290.0, "x0": 100.0, "x1": 500.0, "n": n_receivers},
            "dt": 0.002,
            "nt": 400,
            "wavelet": {"peak_freq": freq, "t0": 1.5 / freq},
            "sponge_width": 10,
            "sponge_strength": 0.02,
        }
    )


TOY_BOUNDS = OptimizerConfig(max_iters=30, bounds=(1 / 6000**2, 1 / 300**2))


def test_criterion_8_toy_inversion(acceptance):
    start = time.perf_counter()
    true = two_layer_model()
    smooth = smooth_model_gaussian(true, DEFAULT_SIGMA_CELLS)

    acq = toy_acquisition(15.0, 10)
    rep = invert(RunInputs(acq, synthesize(true, acq), smooth, true), L2Misfit(), TOY_BOUNDS)
    j_drop = 1 - rep.objective_history[-1] / rep.objective_history[0]
    r_drop = 1 - rep.model_rmse_history[-1] / rep.model_rmse_history[0]
    ok_l2 = j_drop >= 0.9 and r_drop >= 0.3
    acceptance.record("8", "L2 toy", ok_l2, f"J drop {j_drop:.1%}, RMSE {rep.model_rmse_history[0]:.0f} -> {rep.model_rmse_history[-1]:.0f} m/s ({r_drop:.1%}), {rep.iterations} it")

    # cycle-skip probe: 15% slow start on the inverted cells, at a frequency where far traces skip
    acq = toy_acquisition(40.0, 10)
    obs = synthesize(true, acq)
    mask = gradient_mask(smooth, acq)
    slow = VelocityModel(np.where(mask, 0.85 * smooth.c, smooth.c), smooth.dx, smooth.dz)
    finals = {}
    for name, kind in (("L2", L2Misfit()), ("HV", HVMisfit(HVParams(1e-4, 1e-4, 1e-12, max_outer_iters=15)))):
        r = invert(RunInputs(acq, obs, slow, true), kind, TOY_BOUNDS)
        finals[name] = (r.model_rmse_history[-1], r.iterations, r.status)
    ok_probe = finals["HV"][0] < finals["L2"][0]
    elapsed = time.perf_counter() - start
    acceptance.record(
        "8", "cycle-skip probe", ok_probe and elapsed < 1800,
        f"start RMSE {r.model_rmse_history[0]:.0f}; final L2 {finals['L2'][0]:.0f} ({finals['L2'][1]} it, {finals['L2'][2]}), "
        f"HV {finals['HV'][0]:.0f} ({finals['HV'][1]} it, {finals['HV'][2]}); {elapsed:.0f}s",
    )
    assert ok_l2 and ok_probe and elapsed < 1800


# -- 9. Marmousi-like smoke test ----------------------------------------------------


@pytest.mark.slow
def test_criterion_9_marmousi_smoke(acceptance):
    start = time.perf_counter()
    full = marmousi_like()  # 575 x 188 cells at 16 m
    nx, nz, x0, h, sw = 200, 94, 180, 16.0, 15
    true = VelocityModel(full.c[:nz, x0 : x0 + nx], h, h)
    width = nx * h
    acq = build_acquisition(
        {
            "source_line": {"z": (sw + 1) * h, "x0": (sw + 5) * h, "x1": width - (sw + 6) * h, "n": 4},
            "receiver_line": {"z": (sw + 1) * h, "x0": (sw + 2) * h, "x1": width - (sw + 3) * h, "n": 20},
            "dt": 0.002,
            "nt": 600,
            "wavelet": {"peak_freq": 8.0, "t0": 0.2},
            "sponge_width": sw,
            "sponge_strength": 0.01,
        }
    )
    initial = smooth_model_gaussian(true, DEFAULT_SIGMA_CELLS)
    kind = HVMisfit(HVParams(1e-4, 1e-4, 1e-12, max_outer_iters=15))
    rep = invert(RunInputs(acq, synthesize(true, acq), initial, true), kind, TOY_BOUNDS)
    j = np.array(rep.objective_history)
    drop = 1 - j[-1] / j[0]
    monotone = bool(np.all(np.diff(j) < 0))
    elapsed = time.perf_counter() - start
    ok = rep.fallbacks == 0 and monotone and drop >= 0.5 and elapsed < 7200
    acceptance.record(
        "9", "", ok,
        f"{rep.iterations} it ({rep.status}), J drop {drop:.1%}, monotone {monotone}, solver fallbacks {rep.fallbacks}, "
        f"RMSE {rep.model_rmse_history[0]:.0f} -> {rep.model_rmse_history[-1]:.0f} m/s, {elapsed / 60:.0f} min",
    )
    assert ok
