import math

import numpy as np
import pytest

from ssep_lab.lattice import LabeledConfig, nearest_neighbor_kernel
from ssep_lab.lsi import (brute_force_two_state, build_path, cube_space, dirichlet, entropy,
                          entropy_sum, lsi_ratio, lsi_ratio_max, normalize, random_path_pairs,
                          sym_group_dirichlet, sym_group_lsi)

K1 = nearest_neighbor_kernel(1)


def test_entropy_examples():
    assert entropy(np.ones(5)) == 0.0
    for m in (2, 7, 40):
        f = np.zeros(m)
        f[0] = m
        assert entropy(f) == pytest.approx(math.log(m))
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert entropy(normalize(rng.random(9))) >= 0.0
    with pytest.raises(ValueError):
        entropy(np.array([2.0, -0.5, 0.5]))


def test_entropy_near_constant_is_stable():
    f = 1 + 1e-6 * np.array([1.0, -1.0])
    assert entropy(f) == pytest.approx(1e-12 / 2, rel=1e-6)


def test_dirichlet_examples():
    e = [(0, 1)]
    assert dirichlet(np.ones(2), e) == 0.0
    assert dirichlet(np.array([2.0, 0.0]), e) == pytest.approx(2.0)
    sp = cube_space(5)
    f = normalize(np.random.default_rng(1).random(sp.size))
    assert dirichlet(f, sp.edges, psi=np.ones(len(sp.edges))) == pytest.approx(0.5 * dirichlet(f, sp.edges))


def test_dirichlet_relabeling_invariance():
    sp = cube_space(4, m=2)
    rng = np.random.default_rng(2)
    f = normalize(rng.random(sp.size))
    perm = rng.permutation(sp.size)
    inv = np.argsort(perm)
    g = f[perm]
    edges = inv[sp.edges]
    assert dirichlet(g, edges) == pytest.approx(dirichlet(f, sp.edges), rel=1e-12)


def test_cube_space_counts():
    sp = cube_space(4)
    assert sp.size == 4 and len(sp.edges) == 3
    sp2 = cube_space(3, m=2)
    assert sp2.size == 6
    assert len({tuple(e) for e in sp2.edges}) == len(sp2.edges)
    with pytest.raises(ValueError):
        cube_space(20, m=5)


def test_two_state_against_grid():
    sp = cube_space(2)
    res = lsi_ratio_max(sp, rng=np.random.default_rng(3), random_starts=8, iterations=500)
    ref = brute_force_two_state(20001)
    assert abs(res.c_hat - ref) <= 0.1 * ref
    assert res.c_hat <= ref * (1 + 1e-6) + 1e-9 or res.c_hat == pytest.approx(ref, rel=1e-3)


def test_ratio_bounds_every_tested_density():
    sp = cube_space(5)
    res = lsi_ratio_max(sp, rng=np.random.default_rng(4), random_starts=8, iterations=500)
    rng = np.random.default_rng(5)
    for _ in range(50):
        f = normalize(rng.random(sp.size) ** 3)
        assert entropy_sum(f) <= res.c_hat * dirichlet(f, sp.edges) * (1 + 1e-9)
    assert lsi_ratio(res.density, sp.edges) == pytest.approx(res.c_hat, rel=1e-9)


def test_walker_scaling_small():
    vals = []
    for ell in (3, 4, 5, 6):
        res = lsi_ratio_max(cube_space(ell), rng=np.random.default_rng(ell),
                            random_starts=8, iterations=800)
        vals.append(res.c_hat / ell ** 2)
    assert max(vals) / min(vals) <= 2.0


def test_sym_group():
    assert sym_group_dirichlet(np.ones(6), 3) == 0.0
    assert sym_group_dirichlet(np.array([2.0, 0.0]), 2) == 8.0
    with pytest.raises(ValueError):
        sym_group_dirichlet(np.ones(40320), 8)
    res = sym_group_lsi(3, rng=np.random.default_rng(6), iterations=300)
    assert math.isfinite(res.c_hat) and res.c_hat > 0


def test_path_examples():
    x = LabeledConfig([0, 2])
    p = build_path(x, x)
    assert p.length == 0 and p.validate(K1)
    y = LabeledConfig([2, 0])
    p = build_path(x, y)
    assert p.validate(K1) and p.length <= 2 * 3
    with pytest.raises(ValueError):
        build_path(x, LabeledConfig([0, 1]))


def test_random_paths_valid():
    rng = np.random.default_rng(7)
    for ell, m in [(4, 3), (6, 2), (8, 4)]:
        for x, y in random_path_pairs(ell, m, 40, rng):
            p = build_path(x, y)
            assert p.validate(K1)
            assert p.length <= 3 * m * ell
            assert 0.0 <= p.coordinate_property() <= 1.0
