import math

import numpy as np
import pytest

from ssep_lab.forward import solve_forward, solve_forward_infinite
from ssep_lab.generator import build_generator
from ssep_lab.lattice import Box, LabeledConfig, UnlabeledConfig, enumerate_states, nearest_neighbor_kernel
from ssep_lab.simulate import (EventBudgetExceeded, Histogram, LocalStatistic, OccupationField,
                               RngStream, estimate_transition, histogram_to_csv, integrate_statistics,
                               labeled_endpoints, sample_product_measure, simulate_labeled,
                               simulate_ssep)

K1 = nearest_neighbor_kernel(1)


def test_rng_streams():
    a = RngStream(7, (1, 2)).generator().random(4)
    b = RngStream(7, (1, 2)).generator().random(4)
    c = RngStream(7, (1, 3)).generator().random(4)
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert RngStream(7, 1).child(3) == RngStream(7, (1, 3))


def test_zero_time_and_recording():
    z = LabeledConfig([0, 1])
    s = simulate_labeled(K1, z, 0.0, RngStream(1))
    assert s.endpoint == z and s.events == 0
    s = simulate_labeled(K1, z, 3.0, RngStream(1), record=True)
    assert np.all(np.diff(s.times) > 0) and s.times[-1] < 3.0
    assert all(len(set(map(tuple, c))) == 2 for c in s.configs)
    with pytest.raises(EventBudgetExceeded):
        simulate_labeled(K1, z, 1000.0, RngStream(1), max_events=10)


def test_single_walker_second_moment():
    T, reps = 3.0, 40_000
    ends = labeled_endpoints(K1, LabeledConfig([0]), T, reps, RngStream(3))
    x2 = ends[:, 0, 0].astype(float) ** 2
    se = x2.std(ddof=1) / math.sqrt(reps)
    assert abs(x2.mean() - T) <= 3 * se


def test_two_particle_histogram_against_exact():
    T, reps = 2.0, 40_000
    z = LabeledConfig([0, 1])
    est = estimate_transition(K1, z, T, reps, RngStream(5))
    series, _ = solve_forward_infinite(K1, z, [T])
    space, f = series.space, series.values[0]
    for key, count in est.labeled.counts.items():
        if count < 50:
            continue
        p = f[space.index(LabeledConfig(key))]
        sigma = math.sqrt(p * (1 - p) / reps)
        assert abs(count / reps - p) <= 4 * sigma
    assert sum(est.labeled.counts.values()) == reps
    assert sum(est.unlabeled.counts.values()) == reps


def test_replicas_one_and_merge(tmp_path):
    est = estimate_transition(K1, LabeledConfig([0]), 1.0, 1, RngStream(2))
    assert len(est.labeled.counts) == 1 and est.labeled.total == 1
    h = est.labeled.merge(est.labeled)
    assert h.total == 2 and sum(h.counts.values()) == 2
    histogram_to_csv(h, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "state,count,phat,ci_lo,ci_hi"
    assert float(lines[1].split(",")[2]) == 1.0


def test_endpoints_independent_of_chunking():
    a = labeled_endpoints(K1, LabeledConfig([0, 2]), 1.0, 2500, RngStream(9))
    b = labeled_endpoints(K1, LabeledConfig([0, 2]), 1.0, 2500, RngStream(9))
    assert np.array_equal(a, b)
    assert np.array_equal(a[:1000], labeled_endpoints(K1, LabeledConfig([0, 2]), 1.0, 1000, RngStream(9)))


def test_product_measure_samples():
    box = Box(1, 10, "torus")
    ones = sample_product_measure(lambda u: np.ones_like(u), 10, box, RngStream(1))
    zeros = sample_product_measure(lambda u: np.zeros_like(u), 10, box, RngStream(1))
    assert ones.eta.all() and not zeros.eta.any()
    gen = RngStream(4).generator()
    samples = np.array([sample_product_measure(lambda u: np.full_like(u, 0.5), 10, box, gen).eta
                        for _ in range(10_000)])
    se = math.sqrt(0.25 / 10_000)
    assert np.all(np.abs(samples.mean(axis=0) - 0.5) <= 4 * se)


def test_ssep_conserves_particles_and_equilibrium():
    box = Box(1, 8, "torus")
    gen = RngStream(6).generator()
    alpha, reps = 0.3, 4000
    means = np.zeros(box.n_sites)
    for _ in range(reps):
        f = sample_product_measure(lambda u: np.full_like(u, alpha), 8, box, gen)
        g = simulate_ssep(f, K1, 64.0, 0.1, gen)
        assert g.particles == f.particles
        means += g.eta
    means /= reps
    se = math.sqrt(alpha * (1 - alpha) / reps)
    assert np.abs(means - alpha).max() <= 4 * se


def test_ssep_tagged_particle_matches_walker():
    L, T, reps = 6, 0.8, 20_000
    box = Box(1, L, "torus")
    space = enumerate_states(box, 1)
    exact = solve_forward(build_generator(space, K1), space.index(UnlabeledConfig([0])), [T]).values[0]
    eta0 = np.zeros(box.n_sites, dtype=np.uint8)
    eta0[L] = 1
    gen = RngStream(8).generator()
    counts = np.zeros(box.n_sites)
    for _ in range(reps):
        counts += simulate_ssep(OccupationField(box, eta0), K1, 1.0, T, gen).eta
    phat = counts / reps
    tv = 0.5 * np.abs(phat - exact).sum()
    mc_error = 0.5 * np.sqrt(exact * (1 - exact) / reps).sum()
    assert tv <= 3 * mc_error


def test_occupation_integrals_are_exact():
    box = Box(1, 5, "torus")
    S, T, cells = box.n_sites, 0.7, 4
    eta0 = (np.arange(S) % 3 == 0).astype(np.uint8)
    occupied = LocalStatistic(np.array([[0]]), np.tile([0.0, 1.0], (cells, S, 1)))
    everything = LocalStatistic(np.array([[0], [1]]), np.ones((cells, S, 4)))
    end, acc = integrate_statistics(OccupationField(box, eta0), K1, 10.0, T,
                                    [occupied, everything], RngStream(3))
    assert acc[0] == pytest.approx(eta0.sum() * T, rel=1e-12)
    assert acc[1] == pytest.approx(S * T, rel=1e-12)
    assert end.particles == eta0.sum()


def test_histogram_wilson_rows():
    h = Histogram({(1,): 3, (2,): 7}, 10)
    rows = list(h.rows())
    assert [r[1] for r in rows] == [3, 7]
    for _, c, p, lo, hi in rows:
        assert lo <= p <= hi
