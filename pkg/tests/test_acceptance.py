"""Acceptance criteria, one test each.

Every test prints a single PASS/FAIL line with the measured value and the
tolerance, then asserts. The lines are repeated in the pytest terminal summary.
"""

import json
import math
import time
import warnings

import numpy as np
import pytest

from oracles import heat_kernel_1d
from ssep_lab.bg import BGContext, eta_pair, gamma_spec, gaussian_test_function, bg_run, product_spec
from ssep_lab.bounds import (ConvergenceWarning, davies_integrals, fitted_gaussian_bound,
                             gaussian_mask, legendre_phi, tail_fit)
from ssep_lab.cli import main
from ssep_lab.correlations import (CorrelationContext, cosine_profile, decay_fit, two_time_bracket,
                                   sup_abs_vfunction, two_time_table)
from ssep_lab.forward import solve_forward, solve_forward_infinite
from ssep_lab.generator import build_generator, lump_labels
from ssep_lab.lattice import (Box, LabeledConfig, UnlabeledConfig, enumerate_states,
                              nearest_neighbor_kernel)
from ssep_lab.lsi import build_path, cube_space, lsi_ratio_max, random_path_pairs
from ssep_lab.simulate import (OccupationField, RngStream, estimate_transition, simulate_ssep)

K1 = nearest_neighbor_kernel(1)
DECAY_TIMES = [4.0, 8.0, 16.0, 32.0]


def _fmt(x: float) -> str:
    return f"{x:.4g}"


@pytest.fixture(scope="module")
def decay_series():
    """Unlabeled n = 1, 2 solutions from z = {0} and {0, 1} on self-sizing boxes."""
    t0 = time.perf_counter()
    out = {}
    for z in ([(0,)], [(0,), (1,)]):
        series, _ = solve_forward_infinite(K1, z, DECAY_TIMES, labeled=False)
        out[len(z)] = (z, series)
    return out, time.perf_counter() - t0


def test_c01_bessel_oracle(report):
    t0 = time.perf_counter()
    space = enumerate_states(Box(1, 60), 1)
    op = build_generator(space, K1)
    s = solve_forward(op, space.index(UnlabeledConfig([0])), [1.0, 4.0, 8.0])
    xs = space.coords()[:, 0, 0]
    err = 0.0
    for t, row in zip(s.times, s.values):
        ref = np.array([heat_kernel_1d(int(x), t) for x in xs])
        err = max(err, float(np.abs(row - ref).max()))
    dt = time.perf_counter() - t0
    ok = report(1, "Bessel oracle", err <= 1e-8 and dt < 5.0,
                f"max abs error {_fmt(err)} (tol 1e-8), runtime {dt:.2f}s (limit 5s)")
    assert ok


def test_c02_reversibility(report):
    space = enumerate_states(Box(1, 10), 2)
    op = build_generator(space, K1)
    P = np.array([solve_forward(op, i, [1.0]).values[0] for i in range(space.size)])
    diff = float(np.abs(P - P.T).max())
    ok = report(2, "reversibility", diff <= 1e-10,
                f"max |f(A|A0) - f(A0|A)| = {_fmt(diff)} over {space.size}^2 pairs (tol 1e-10)")
    assert ok


def test_c03_label_lumping(report):
    box = Box(1, 15)
    lab = enumerate_states(box, 2, labeled=True)
    unl = enumerate_states(box, 2)
    fl = solve_forward(build_generator(lab, K1), lab.index(LabeledConfig([0, 1])), [4.0]).values[0]
    fu = solve_forward(build_generator(unl, K1), unl.index(UnlabeledConfig([0, 1])), [4.0]).values[0]
    diff = float(np.abs(lump_labels(fl, lab, unl) - fu).max())
    ok = report(3, "label lumping", diff <= 1e-10, f"max diff {_fmt(diff)} (tol 1e-10)")
    assert ok


def test_c04_diagonal_decay(report, decay_series):
    series, dt = decay_series
    parts, ok = [], dt < 120.0
    for n, (z, s) in series.items():
        bm = float(s.boundary_mass.max())
        scaled = [float(s.values[i].max()) * (1 + T) ** (n / 2) for i, T in enumerate(DECAY_TIMES)]
        spread = max(scaled) / min(scaled)
        ok &= bm < 1e-6 and spread < 3.0
        parts.append(f"n={n}: spread {_fmt(spread)} (limit 3), boundary {_fmt(bm)} (limit 1e-6)")
    ok = report(4, "diagonal decay", ok, "; ".join(parts) + f"; runtime {dt:.1f}s (limit 120s)")
    assert ok


def test_c05_gaussian_regime(report, decay_series):
    series, _ = decay_series
    parts, ok = [], True
    for n, (z, s) in series.items():
        slopes, worst = [], np.inf
        for i, T in enumerate(DECAY_TIMES):
            fit = tail_fit(s, z, T)
            slopes.append(fit.slope)
            f = s.values[i]
            m = gaussian_mask(s.space, z, T, 2.0)
            b = fitted_gaussian_bound(s.space, z, T, fit)
            # C2_hat is the smallest constant that works, so the bound touches f
            # at one state up to rounding
            worst = min(worst, float(np.min(b[m] - f[m] * (1 - 1e-12))))
        drift = max(slopes) / min(slopes) - 1
        ok &= min(slopes) > 0 and drift <= 0.25 and worst >= 0
        parts.append(f"n={n}: slopes {', '.join(_fmt(v) for v in slopes)}, drift {drift:.1%} "
                     f"(limit 25%), min(bound - f) {_fmt(worst)} (need >= 0)")
    ok = report(5, "Gaussian regime", ok, "; ".join(parts))
    assert ok


def _grid_phi(u: float, step: float = 1e-7) -> float:
    w = np.arange(0.0, 1.0, step)
    return float(np.max(u * w - w * w * np.cosh(w)))


def test_c06_phi_properties(report):
    t0 = time.perf_counter()
    u = np.linspace(0.0, 1000.0, 1000)
    phi = np.array([legendre_phi(x) for x in u])
    second = phi[2:] - 2 * phi[1:-1] + phi[:-2]
    convex = float(second.min())
    v = np.geomspace(0.1, 1000.0, 1000)
    gap = float(min(legendre_phi(x) - 0.5 * x * math.log(x / (4 * math.e)) for x in v))
    small = legendre_phi(0.01) * 4 / 0.01 ** 2
    dt = time.perf_counter() - t0
    oracle = abs(legendre_phi(0.01) - _grid_phi(0.01))
    ok = convex >= -1e-9 and gap >= 0 and abs(small - 1) <= 0.02 and oracle <= 1e-12 and dt < 1.0
    ok = report(6, "Phi properties", ok,
                f"min second difference {_fmt(convex)} (tol -1e-9), min Phi - lower bound {_fmt(gap)}, "
                f"4Phi(0.01)/0.01^2 = {small:.6f} (within 2%), grid-search gap {_fmt(oracle)}, "
                f"runtime {dt:.2f}s (limit 1s)")
    assert ok


def test_c07_davies_integrals(report):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        i1, i2 = davies_integrals(0.25, mesh=6)
        i1b, _ = davies_integrals(0.25, mesh=7)
    rel = abs(i1 - i1b) / abs(i1b)
    ok = report(7, "Davies integrals", abs(i2 - 2.0) <= 1e-12 and rel <= 1e-6,
                f"I2 = {i2!r} (exact 2), I1 = {i1:.12g}, mesh-doubling change {_fmt(rel)} (tol 1e-6)")
    assert ok


@pytest.mark.slow
def test_c08_vfunction_scaling(report):
    t0 = time.perf_counter()
    T = 0.05
    recs = []
    for N in (32, 64, 128, 256):
        prof = cosine_profile(0.5, 0.25, period=(2 * N + 1) / N)
        ctx = CorrelationContext(K1, N, prof, np.linspace(T / 10, T, 10), L=N, max_card=2).solve()
        recs.append((N, sup_abs_vfunction(ctx)))
    slope = decay_fit(recs).slope
    dt = time.perf_counter() - t0
    ok = report(8, "v-function scaling", -1.15 <= slope <= -0.85 and dt < 600,
                f"slope {slope:.4f} (range [-1.15, -0.85]), sup|phi| "
                + ", ".join(f"N={n}: {_fmt(v)}" for n, v in recs) + f"; runtime {dt:.0f}s (limit 600s)")
    assert ok


@pytest.mark.slow
def test_c09_two_time_shape(report):
    s = 0.02
    c_hat = {}
    for N in (32, 64, 128):
        L = N // 2
        prof = cosine_profile(0.5, 0.25, period=(2 * L + 1) / N)
        ctx = CorrelationContext(K1, N, prof, [s], L=L, max_card=3).solve()
        rs = sorted({0.0, N ** -2, 10 * N ** -2, 0.1, 0.5})
        tab = two_time_table(s, [(0,), (1,)], rs, 2, ctx)
        c_hat[N] = max(float(np.abs(R).max()) / two_time_bracket(r, N) for r, R in zip(rs, tab.R))
    spread = max(c_hat.values()) / min(c_hat.values())
    ok = report(9, "two-time bound shape", spread <= 3.0,
                "c_hat " + ", ".join(f"N={n}: {_fmt(v)}" for n, v in c_hat.items())
                + f"; spread {_fmt(spread)} (limit 3)")
    assert ok


def test_c10_mc_cross_validation(report):
    T, reps = 2.0, 100_000
    z = LabeledConfig([0, 1])
    est = estimate_transition(K1, z, T, reps, RngStream(10, (1,)))
    series, _ = solve_forward_infinite(K1, z, [T])
    space, f = series.space, series.values[0]
    worst, cells = 0.0, 0
    for key, count in est.labeled.counts.items():
        if count < 50:
            continue
        p = f[space.index(LabeledConfig(key))]
        worst = max(worst, abs(count / reps - p) / math.sqrt(p * (1 - p) / reps))
        cells += 1

    alpha, eq_reps = 0.3, 4000
    box = Box(1, 20, "torus")
    site0, means = [], []
    for i in range(eq_reps):
        gen = RngStream(10, (2, i)).generator()
        eta = OccupationField(box, (gen.random(box.n_sites) < alpha).astype(np.uint8))
        out = simulate_ssep(eta, K1, 1.0, T, gen).eta
        site0.append(out[box.site_index(np.array([[0]]))[0]])
        means.append(out.mean())
    sd0 = math.sqrt(alpha * (1 - alpha) / eq_reps)
    z0 = abs(np.mean(site0) - alpha) / sd0
    zbar = abs(np.mean(means) - alpha) / (sd0 / math.sqrt(box.n_sites))
    ok = worst <= 4 and z0 <= 3 and zbar <= 3
    ok = report(10, "MC/exact cross-validation", ok,
                f"worst cell {worst:.2f} sigma over {cells} cells with >= 50 hits (limit 4); "
                f"equilibrium site 0 {z0:.2f} sigma, site average {zbar:.2f} sigma (limit 3)")
    assert ok


@pytest.mark.slow
def test_c11_boltzmann_gibbs_decay(report):
    t0 = time.perf_counter()
    T, reps = 0.1, 20_000
    H = gaussian_test_function(0.125)
    recs = {"A": [], "cyl": []}
    for N in (16, 32, 64, 128):
        ctx = BGContext(K1, N, cosine_profile(0.5, 0.25, period=(N + 1) / N), L=N // 2)
        a3, cyl = bg_run(H, [product_spec((0, 1, 2)), gamma_spec(eta_pair())], T, N, ctx, reps,
                         RngStream(1, (N,)))
        recs["A"].append((N, a3.estimate))
        recs["cyl"].append((N, cyl.estimate))
    sa, sc = decay_fit(recs["A"]).slope, decay_fit(recs["cyl"]).slope
    dt = time.perf_counter() - t0
    ok = report(11, "Boltzmann-Gibbs decay", sa <= -0.8 and sc <= -0.8 and dt < 1800,
                f"|A|=3 slope {sa:.3f}, eta(0)eta(1) slope {sc:.3f} (limit -0.8); "
                f"runtime {dt:.0f}s (limit 1800s)")
    assert ok


@pytest.mark.slow
def test_c12_lsi_scaling(report):
    band = {}
    for m, ells in ((1, range(3, 13)), (2, range(3, 9))):
        vals = [lsi_ratio_max(cube_space(ell, m), rng=np.random.default_rng(ell)).c_hat / ell ** 2
                for ell in ells]
        band[m] = max(vals) / min(vals)
    rng = np.random.default_rng(12)
    count, valid, longest = 0, True, 0.0
    for m in (2, 3):
        for ell in range(max(3, m), 9):
            for x, y in random_path_pairs(ell, m, 40, rng):
                rec = build_path(x, y)
                valid &= rec.validate(K1)
                longest = max(longest, rec.length / (3 * m * ell))
                count += 1
    ok = band[1] <= 2 and band[2] <= 2 and valid and longest <= 1
    ok = report(12, "LSI scaling", ok,
                f"c_hat/ell^2 band walker {band[1]:.3f}, two particles {band[2]:.3f} (limit 2); "
                f"{count} paths valid={valid}, max length/(3 m ell d) {longest:.3f} (limit 1)")
    assert ok


def test_c13_determinism(report, tmp_path):
    z = tmp_path / "z.json"
    z.write_text("[0, 1]")
    runs = {
        "simulate": ["simulate", "--config", str(z), "--T", "1", "--replicas", "2000"],
        "vfunctions": ["vfunctions", "--Ns", "8,16", "--times", "0.02,0.05", "--replicas", "200"],
        "bg": ["bg", "--Ns", "8,16", "--T", "0.05", "--A", "0,1,2", "--replicas", "200"],
        "lsi": ["lsi", "--ells", "3,4", "--m", "2"],
    }
    mismatched, files = [], 0
    for name, argv in runs.items():
        first, again = tmp_path / name, tmp_path / (name + "_again")
        assert main(argv + ["--seed", "5", "--out", str(first)]) == 0
        assert main(["run", "--manifest", str(first / "manifest.json"), "--out", str(again)]) == 0
        outputs = json.loads((first / "manifest.json").read_text())["outputs"]
        for fname in outputs:
            files += 1
            if (first / fname).read_bytes() != (again / fname).read_bytes():
                mismatched.append(f"{name}/{fname}")
    ok = report(13, "determinism", not mismatched and files > 0,
                f"{files} output files rerun from manifests, {len(mismatched)} differ (need 0)")
    assert ok
