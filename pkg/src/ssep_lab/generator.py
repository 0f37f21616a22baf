"""Sparse generators of the exclusion (unlabeled) and stirring (labeled) processes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .lattice import Kernel, StateSpace

ROW_TOL = 1e-12


@dataclass(eq=False)
class SparseOperator:
    """Generator restricted to an enumerated state space (CSR layout)."""

    space: StateSpace
    matrix: sp.csr_matrix
    symmetric: bool

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def row_offsets(self) -> np.ndarray:
        return self.matrix.indptr

    @property
    def column_ids(self) -> np.ndarray:
        return self.matrix.indices

    @property
    def values(self) -> np.ndarray:
        return self.matrix.data

    def diagonal(self) -> np.ndarray:
        return self.matrix.diagonal()

    def check(self) -> None:
        """Raise ``AssertionError`` if a structural invariant fails."""
        m = self.matrix
        rs = np.asarray(m.sum(axis=1)).ravel()
        assert np.abs(rs).max(initial=0.0) <= ROW_TOL, "row sums not zero"
        off = m - sp.diags(m.diagonal())
        assert off.data.min(initial=0.0) >= 0.0, "negative off-diagonal rate"
        assert m.diagonal().max(initial=0.0) <= 0.0, "positive diagonal"
        diff = abs(m - m.T)
        if self.symmetric:
            assert diff.max() <= ROW_TOL if diff.nnz else True, "not symmetric"

    def to_coo_text(self, path) -> None:
        """Write ``row col value`` lines (full round-trip precision)."""
        c = self.matrix.tocoo()
        order = np.lexsort((c.col, c.row))
        with open(path, "w") as fh:
            for r, k, v in zip(c.row[order], c.col[order], c.data[order]):
                fh.write(f"{r} {k} {float(v)!r}\n")


def _assemble(space: StateSpace, rows, cols, rates) -> sp.csr_matrix:
    m = space.size
    off = sp.csr_matrix((rates, (rows, cols)), shape=(m, m))
    off.sum_duplicates()
    out = np.asarray(off.sum(axis=1)).ravel()
    mat = (off - sp.diags(out)).tocsr()
    mat.sort_indices()
    return mat


def build_unlabeled_generator(space: StateSpace, kernel: Kernel) -> SparseOperator:
    """Exclusion generator: each bond with exactly one occupied end moves that particle."""
    if space.labeled:
        raise ValueError("build_unlabeled_generator needs an unlabeled space")
    nbr = space.box.neighbor_table(kernel)
    probs = kernel.probs
    st = space.states.astype(np.int64)
    ids = np.arange(space.size, dtype=np.int64)
    rows, cols, rates = [], [], []
    for i in range(space.n):
        for k in range(len(probs)):
            tgt = nbr[st[:, i], k]
            ok = tgt >= 0
            ok &= ~(st == tgt[:, None]).any(axis=1)
            if not ok.any():
                continue
            new = st[ok].copy()
            new[:, i] = tgt[ok]
            rows.append(ids[ok])
            cols.append(space.rank(new))
            rates.append(np.full(int(ok.sum()), probs[k]))
    if rows:
        mat = _assemble(space, np.concatenate(rows), np.concatenate(cols), np.concatenate(rates))
    else:
        mat = sp.csr_matrix((space.size, space.size))
    return SparseOperator(space=space, matrix=mat, symmetric=True)


def build_labeled_generator(space: StateSpace, kernel: Kernel) -> SparseOperator:
    """Stirring generator: a bond between two occupied sites swaps the labels."""
    if not space.labeled:
        raise ValueError("build_labeled_generator needs a labeled space")
    nbr = space.box.neighbor_table(kernel)
    probs = kernel.probs
    st = space.states.astype(np.int64)
    ids = np.arange(space.size, dtype=np.int64)
    rows, cols, rates = [], [], []
    n = space.n
    for i in range(n):
        for k in range(len(probs)):
            tgt = nbr[st[:, i], k]
            valid = tgt >= 0
            hit = st == tgt[:, None]
            occupied = hit.any(axis=1)
            # jump to an empty site
            ok = valid & ~occupied
            if ok.any():
                new = st[ok].copy()
                new[:, i] = tgt[ok]
                rows.append(ids[ok])
                cols.append(space.rank(new))
                rates.append(np.full(int(ok.sum()), probs[k]))
            # swap with particle j; counted from the smaller label only
            for j in range(i + 1, n):
                ok = valid & hit[:, j]
                if not ok.any():
                    continue
                new = st[ok].copy()
                new[:, i], new[:, j] = st[ok, j], st[ok, i]
                rows.append(ids[ok])
                cols.append(space.rank(new))
                rates.append(np.full(int(ok.sum()), probs[k]))
    if rows:
        mat = _assemble(space, np.concatenate(rows), np.concatenate(cols), np.concatenate(rates))
    else:
        mat = sp.csr_matrix((space.size, space.size))
    return SparseOperator(space=space, matrix=mat, symmetric=True)


def build_generator(space: StateSpace, kernel: Kernel) -> SparseOperator:
    if space.labeled:
        return build_labeled_generator(space, kernel)
    return build_unlabeled_generator(space, kernel)


def label_projection(labeled: StateSpace, unlabeled: StateSpace) -> np.ndarray:
    """Unlabeled id of each labeled state."""
    if not labeled.labeled or unlabeled.labeled:
        raise ValueError("need (labeled, unlabeled) spaces")
    if labeled.box != unlabeled.box or labeled.n != unlabeled.n:
        raise ValueError("spaces live on different boxes or particle counts")
    return unlabeled.rank(np.sort(labeled.states, axis=1))


def lump_labels(dist, labeled: StateSpace, unlabeled: StateSpace) -> np.ndarray:
    """Sum a labeled probability vector over the n! labelings of each set."""
    dist = np.asarray(dist, dtype=float)
    if dist.shape != (labeled.size,):
        raise ValueError("distribution has the wrong length")
    if dist.min(initial=0.0) < -1e-12 or abs(dist.sum() - 1.0) > 1e-9:
        raise ValueError("input is not a probability vector")
    proj = label_projection(labeled, unlabeled)
    return np.bincount(proj, weights=dist, minlength=unlabeled.size)


def n_labelings(n: int) -> int:
    return math.factorial(n)
