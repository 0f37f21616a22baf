import math
import warnings

import numpy as np
import pytest

from oracles import heat_kernel_1d
from ssep_lab.bounds import (BoundParams, ConvergenceWarning, M_const, PhiEvaluator, bound_value,
                             bound_value_split, davies_integrals, exponential_action,
                             fit_gaussian_tail, fitted_gaussian_bound, legendre_argmax, legendre_phi,
                             minimal_a0, rate_R, regime_classify, tail_fit)
from ssep_lab.forward import solve_forward_infinite
from ssep_lab.lattice import LabeledConfig, UnlabeledConfig, nearest_neighbor_kernel

K1 = nearest_neighbor_kernel(1)


def _grid_phi(u, lo=0.0, hi=1.0, step=1e-7):
    w = np.arange(lo, hi, step)
    return float(np.max(u * w - w * w * np.cosh(w)))


def test_phi_small_u_against_grid_search():
    assert legendre_phi(0.0) == 0.0
    ref = _grid_phi(0.01)
    assert abs(legendre_phi(0.01) - ref) <= 1e-12
    assert abs(legendre_phi(0.01) * 4 / 1e-4 - 1) <= 0.02


def test_phi_stationarity_and_symmetry():
    for u in [0.3, 2.0, 40.0, 900.0]:
        w = legendre_argmax(u)
        assert abs(2 * w * math.cosh(w) + w * w * math.sinh(w) - u) <= 1e-9 * max(1, u)
        assert legendre_phi(-u) == legendre_phi(u)


def test_phi_lower_bound_and_convexity():
    u = np.linspace(0.1, 1000.0, 1000)
    phi = np.array([legendre_phi(x) for x in u])
    assert np.all(phi >= u / 2 * np.log(u / (4 * math.e)) - 1e-9)
    assert np.all(phi[:-2] - 2 * phi[1:-1] + phi[2:] >= -1e-9)
    assert np.all(np.diff(phi) >= 0)
    assert legendre_phi(100.0) >= 50 * math.log(100 / (4 * math.e))


def test_phi_evaluator_matches_direct():
    ev = PhiEvaluator(u_max=50.0, points=801)
    u = np.array([0.05, 0.7, 3.3, 17.0, 49.0, 70.0])
    ref = np.array([legendre_phi(x) for x in u])
    assert np.abs(ev(u) - ref).max() <= 1e-6 * max(1.0, ref.max())
    uu, phi, w = ev.table()
    assert np.all(np.diff(w) >= 0)


def test_rate_R():
    assert rate_R(np.zeros((2, 1)), 1.3) == 0.0
    assert rate_R([[0.7]], 1.5) == pytest.approx(1.5 * (math.cosh(1.05) - 1))
    assert rate_R([[-0.7]], 1.5) == rate_R([[0.7]], 1.5)
    assert rate_R([[0.9], [0.1]], 1.0) > rate_R([[0.8], [0.1]], 1.0)
    th = np.array([[0.01], [-0.02]])
    assert rate_R(th, 1.2) >= 1.2 ** 3 * np.sum(th ** 2) / 2
    assert M_const(0.0) == 0.5 and M_const(2.0) <= math.cosh(2.0)


def test_bound_value_examples():
    p = BoundParams(C2=1.0, n=2)
    z = LabeledConfig([0, 1])
    T = 10.0
    assert bound_value(z, z, T, p) == pytest.approx(1.0 / (1 + T))
    vals = [bound_value(LabeledConfig([0, 1 + k]), z, T, p) for k in range(8)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        bound_value(z, z, 0.5, p)
    with pytest.raises(ValueError):
        BoundParams(C2=1.0, a1=2.0)


def test_phi_superadditivity_split():
    rng = np.random.default_rng(5)
    p = BoundParams(C2=1.0, n=3)
    for _ in range(50):
        x = LabeledConfig(rng.choice(np.arange(-30, 30), 3, replace=False))
        z = LabeledConfig([0, 1, 2])
        assert bound_value(x, z, 12.0, p) <= bound_value_split(x, z, 12.0, p) * (1 + 1e-9)


def test_unlabeled_bound_sums_permutations():
    p = BoundParams(C2=1.0, n=2)
    x, z = UnlabeledConfig([3, -2]), LabeledConfig([0, 1])
    lab = bound_value(LabeledConfig([-2, 3]), z, 9.0, p) + bound_value(LabeledConfig([3, -2]), z, 9.0, p)
    assert bound_value(x, z, 9.0, p) == pytest.approx(lab)


def test_regime_classify():
    T, g = 20.0, 1.5
    thr = g * T / math.log(T)
    z = LabeledConfig([0])
    assert regime_classify(z, z, T, g) == "gaussian"
    assert regime_classify(LabeledConfig([math.ceil(2 * thr)]), z, T, g) == "poissonian"
    far = LabeledConfig([math.ceil(thr) + 1])
    assert regime_classify(far, z, T, g) == "poissonian"
    assert regime_classify(far, z, T, 2 * g) == "gaussian"


def test_davies_integrals():
    with warnings.catch_warnings():
        warnings.simplefilter("error", ConvergenceWarning)
        i1, i2 = davies_integrals(0.25)
        i1b, _ = davies_integrals(0.25, mesh=7)
    assert i2 == pytest.approx(2.0, abs=1e-12)
    assert math.isfinite(i1) and abs(i1 - i1b) <= 1e-6 * abs(i1b)
    for a in (0.1, 0.3, 0.45):
        assert davies_integrals(a)[1] == pytest.approx(1 / (1 - 2 * a), rel=1e-9)
    with pytest.raises(ValueError):
        davies_integrals(0.5)


def test_tail_fit_single_walker_against_bessel_fit():
    times = [8.0, 16.0, 32.0]
    series, _ = solve_forward_infinite(K1, [(0,)], times)
    z = UnlabeledConfig([0])
    for T in times:
        fit = tail_fit(series, z, T)
        assert 1.8 <= fit.a1_hat <= 2.3
        xs = np.arange(-int(2 * T / math.log(T)), int(2 * T / math.log(T)) + 1)
        f = np.array([heat_kernel_1d(int(x), T) for x in xs])
        ref = fit_gaussian_tail(xs ** 2 / T, -np.log(f * math.sqrt(1 + T)), T=T)
        assert fit.a1_hat == pytest.approx(ref.a1_hat, rel=1e-6)
        dom = fitted_gaussian_bound(series.space, z, T, fit)
        mask = np.abs(series.space.coords()[:, 0, 0]) <= 2 * T / math.log(T)
        assert np.all(dom[mask] >= series.at(T)[mask] * (1 - 1e-9))


def test_tail_fit_on_bound_recovers_quadratic_regime():
    a0, T = 1.0, 1000.0
    p = BoundParams(C2=1.0, a0=a0)
    z = LabeledConfig([0])
    d = np.arange(0, 21)
    y = np.array([-math.log(bound_value(LabeledConfig([int(k)]), z, T, p) * math.sqrt(1 + T)) for k in d])
    fit = fit_gaussian_tail(d ** 2 / T, y, T=T)
    assert fit.slope == pytest.approx(1 / (8 * a0 ** 3), rel=0.05)


def test_tail_fit_rejects_small_samples():
    with pytest.raises(ValueError):
        fit_gaussian_tail([1.0, 2.0], [1.0, 2.0])


def test_exponential_action_bounded_by_R():
    rng = np.random.default_rng(2)
    configs = [LabeledConfig([0]), LabeledConfig([0, 1]), LabeledConfig([0, 3, 4])]
    for x in configs:
        thetas = [rng.uniform(-2, 2, size=(len(x), 1)) for _ in range(20)]
        a0 = minimal_a0(K1, [x], thetas)
        assert math.isfinite(a0) and a0 > 0
        for th in thetas:
            g, s = exponential_action(K1, x, th)
            r = rate_R(th, a0 * (1 + 1e-5))
            assert g <= r + 1e-12 and s <= r + 1e-12
