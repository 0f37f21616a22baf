import numpy as np
import pytest

from ssep_lab.forward import solve_forward
from ssep_lab.generator import build_generator, lump_labels
from ssep_lab.lattice import Box, LabeledConfig, UnlabeledConfig, enumerate_states, nearest_neighbor_kernel

K1 = nearest_neighbor_kernel(1)


def _row(op, config):
    i = op.space.index(config)
    row = op.matrix.getrow(i).toarray().ravel()
    return i, {op.space.config(j): row[j] for j in np.flatnonzero(row) if j != i}, row[i]


def test_single_walker_rates():
    op = build_generator(enumerate_states(Box(1, 4), 1), K1)
    _, off, diag = _row(op, UnlabeledConfig([0]))
    assert off == {UnlabeledConfig([-1]): 0.5, UnlabeledConfig([1]): 0.5}
    assert diag == -1.0


def test_unlabeled_pair_blocks_internal_bond():
    op = build_generator(enumerate_states(Box(1, 4), 2), K1)
    _, off, diag = _row(op, UnlabeledConfig([0, 1]))
    assert off == {UnlabeledConfig([-1, 1]): 0.5, UnlabeledConfig([0, 2]): 0.5}
    assert diag == -1.0


def test_labeled_pair_swaps():
    op = build_generator(enumerate_states(Box(1, 4), 2, labeled=True), K1)
    _, off, diag = _row(op, LabeledConfig([0, 1]))
    assert off == {LabeledConfig([1, 0]): 0.5, LabeledConfig([-1, 1]): 0.5,
                   LabeledConfig([0, 2]): 0.5}
    assert diag == -1.5


@pytest.mark.parametrize("labeled", [False, True])
@pytest.mark.parametrize("d,L,n", [(1, 5, 2), (2, 2, 2), (1, 4, 3)])
def test_structural_invariants(labeled, d, L, n):
    op = build_generator(enumerate_states(Box(d, L), n, labeled), nearest_neighbor_kernel(d))
    op.check()
    assert op.symmetric
    assert abs(op.matrix - op.matrix.T).max() == 0.0
    assert (-op.diagonal()).max() <= n + 1e-12


def test_one_particle_labeled_equals_unlabeled():
    box = Box(1, 5)
    a = build_generator(enumerate_states(box, 1, True), K1).matrix.toarray()
    b = build_generator(enumerate_states(box, 1, False), K1).matrix.toarray()
    assert np.array_equal(a, b)


def test_lump_examples():
    box = Box(1, 2)
    lab, unl = enumerate_states(box, 2, True), enumerate_states(box, 2, False)
    u = lump_labels(np.full(lab.size, 1.0 / lab.size), lab, unl)
    assert np.allclose(u, 1.0 / unl.size)
    p = np.zeros(lab.size)
    p[lab.index(LabeledConfig([0, 1]))] = 1.0
    q = lump_labels(p, lab, unl)
    assert q[unl.index(UnlabeledConfig([0, 1]))] == 1.0 and q.sum() == 1.0
    with pytest.raises(ValueError):
        lump_labels(-p, lab, unl)


def test_lumping_commutes_with_evolution():
    box = Box(1, 6)
    lab, unl = enumerate_states(box, 2, True), enumerate_states(box, 2, False)
    z = LabeledConfig([0, 1])
    fl = solve_forward(build_generator(lab, K1), lab.index(z), [1.5]).values[0]
    fu = solve_forward(build_generator(unl, K1), unl.index(z.forget()), [1.5]).values[0]
    assert np.abs(lump_labels(fl, lab, unl) - fu).max() <= 1e-10


def test_coo_export(tmp_path):
    op = build_generator(enumerate_states(Box(1, 2), 1), K1)
    op.to_coo_text(tmp_path / "op.txt")
    rows = [line.split() for line in (tmp_path / "op.txt").read_text().splitlines()]
    assert len(rows) == op.matrix.nnz
    assert sum(float(r[2]) for r in rows) == pytest.approx(0.0, abs=1e-12)
