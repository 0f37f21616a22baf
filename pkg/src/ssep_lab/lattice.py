"""Transition kernels, lattice boxes, particle configurations and state spaces."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

TOL = 1e-12
DEFAULT_SIZE_CAP = 50_000_000

Point = tuple[int, ...]


def _as_point(p) -> Point:
    if isinstance(p, (int, np.integer)):
        return (int(p),)
    return tuple(int(c) for c in p)


def _as_weight(w):
    if isinstance(w, Fraction):
        return w
    if isinstance(w, str):
        return Fraction(w)
    if isinstance(w, (int, np.integer)):
        return Fraction(int(w))
    return float(w)


class KernelError(ValueError):
    pass


@dataclass(frozen=True)
class Kernel:
    """Finite-range symmetric transition probability on Z^d.

    ``weights`` keeps the caller's representation (``Fraction`` when the
    weights were given as rationals); ``probs`` is the float view used by the
    numerical code.
    """

    d: int
    displacements: tuple[Point, ...]
    weights: tuple

    @property
    def probs(self) -> np.ndarray:
        return np.array([float(w) for w in self.weights])

    @property
    def vectors(self) -> np.ndarray:
        return np.array(self.displacements, dtype=np.int64).reshape(-1, self.d)

    @property
    def range(self) -> int:
        return int(np.abs(self.vectors).max())

    def p(self, z) -> float:
        z = _as_point(z)
        for v, w in zip(self.displacements, self.weights):
            if v == z:
                return float(w)
        return 0.0

    def half_support(self) -> list[tuple[Point, float]]:
        """One representative of each pair {z, -z} (the lexicographically positive one)."""
        out = []
        for v, w in zip(self.displacements, self.weights):
            if v > tuple(0 for _ in v):
                out.append((v, float(w)))
        return out

    def to_spec(self) -> list:
        return [[list(v), str(w) if isinstance(w, Fraction) else w]
                for v, w in zip(self.displacements, self.weights)]


def _generates_lattice(vectors: np.ndarray) -> bool:
    from sympy import Matrix, ZZ
    from sympy.matrices.normalforms import smith_normal_form

    d = vectors.shape[1]
    m = Matrix(vectors.tolist())
    if m.rank() < d:
        return False
    snf = smith_normal_form(m, domain=ZZ)
    diag = [abs(snf[i, i]) for i in range(d)]
    return all(x == 1 for x in diag)


def build_kernel(spec: Iterable[tuple[Sequence[int] | int, object]]) -> Kernel:
    """Validate a list of ``(vector, weight)`` pairs and return a :class:`Kernel`.

    Weights of ``z`` and ``-z`` differing by at most 1e-12 are averaged;
    anything worse is rejected, as are non-positive weights, a self-jump, a
    total mass off 1, and supports that only generate a sublattice.
    """
    entries: dict[Point, object] = {}
    for vec, w in spec:
        z = _as_point(vec)
        w = _as_weight(w)
        if z in entries:
            raise KernelError(f"duplicate displacement {z}")
        entries[z] = w
    if not entries:
        raise KernelError("empty kernel spec")
    dims = {len(z) for z in entries}
    if len(dims) != 1:
        raise KernelError("displacements of mixed dimension")
    d = dims.pop()
    if d < 1:
        raise KernelError("dimension must be positive")
    zero = tuple(0 for _ in range(d))
    if zero in entries:
        raise KernelError("zero displacement in support")
    for z, w in entries.items():
        if float(w) <= 0:
            raise KernelError(f"non-positive weight at {z}")
    sym: dict[Point, object] = {}
    for z, w in entries.items():
        mz = tuple(-c for c in z)
        if mz not in entries:
            raise KernelError(f"asymmetric kernel: {z} present, {mz} missing")
        w2 = entries[mz]
        if w == w2:
            sym[z] = w
        elif abs(float(w) - float(w2)) <= TOL:
            sym[z] = (float(w) + float(w2)) / 2
        else:
            raise KernelError(f"asymmetric kernel: p{z}={w} but p{mz}={w2}")
    total = sum(sym.values())
    if abs(float(total) - 1.0) > TOL:
        raise KernelError(f"weights sum to {float(total)!r}, not 1")
    order = sorted(sym)
    vecs = np.array(order, dtype=np.int64)
    if not _generates_lattice(vecs):
        raise KernelError("support does not generate Z^d (reducible kernel)")
    return Kernel(d=d, displacements=tuple(order), weights=tuple(sym[z] for z in order))


def nearest_neighbor_kernel(d: int = 1) -> Kernel:
    spec = []
    w = Fraction(1, 2 * d)
    for j in range(d):
        e = [0] * d
        e[j] = 1
        spec.append((tuple(e), w))
        e[j] = -1
        spec.append((tuple(e), w))
    return build_kernel(spec)


@dataclass(frozen=True)
class Box:
    """Centered box [-L, L]^d, either truncated (jumps out are suppressed) or a torus."""

    d: int
    L: int
    geometry: str = "open"

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("box half-width must be >= 1")
        if self.geometry not in ("open", "torus"):
            raise ValueError(f"unknown geometry {self.geometry!r}")

    @property
    def side(self) -> int:
        return 2 * self.L + 1

    @property
    def n_sites(self) -> int:
        return self.side ** self.d

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.side,) * self.d

    def coords(self) -> np.ndarray:
        """Coordinates of every site, shape (n_sites, d), in index order."""
        grids = np.indices(self.shape).reshape(self.d, -1).T
        return grids - self.L

    def site_index(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.int64).reshape(-1, self.d)
        if self.geometry == "torus":
            pts = np.mod(pts + self.L, self.side)
        else:
            pts = pts + self.L
            if (pts < 0).any() or (pts >= self.side).any():
                raise ValueError("point outside the box")
        return np.ravel_multi_index(tuple(pts.T), self.shape)

    def neighbor_table(self, kernel: Kernel) -> np.ndarray:
        """``nbr[s, k]`` = index of site ``s + z_k``, or -1 if the jump leaves an open box."""
        c = self.coords()
        z = kernel.vectors
        tgt = c[:, None, :] + z[None, :, :] + self.L
        if self.geometry == "torus":
            tgt = np.mod(tgt, self.side)
            ok = np.ones(tgt.shape[:2], dtype=bool)
        else:
            ok = ((tgt >= 0) & (tgt < self.side)).all(axis=2)
            tgt = np.where(ok[..., None], tgt, 0)
        idx = np.ravel_multi_index(tuple(np.moveaxis(tgt, 2, 0)), self.shape)
        return np.where(ok, idx, -1)


@dataclass(frozen=True)
class UnlabeledConfig:
    points: tuple[Point, ...]

    def __init__(self, points):
        pts = tuple(sorted(_as_point(p) for p in points))
        if len(set(pts)) != len(pts):
            raise ValueError("unlabeled configuration has repeated sites")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    def __contains__(self, x):
        return _as_point(x) in self.points


@dataclass(frozen=True)
class LabeledConfig:
    points: tuple[Point, ...]

    def __init__(self, points):
        pts = tuple(_as_point(p) for p in points)
        if len(set(pts)) != len(pts):
            raise ValueError("labeled configuration must have distinct coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    def forget(self) -> UnlabeledConfig:
        return UnlabeledConfig(self.points)

    def as_array(self) -> np.ndarray:
        return np.array(self.points, dtype=np.int64)


def exchange(config, x, y):
    """Exchange the contents of sites ``x`` and ``y``."""
    x, y = _as_point(x), _as_point(y)
    if isinstance(config, LabeledConfig):
        pts = []
        for p in config.points:
            pts.append(y if p == x else x if p == y else p)
        return LabeledConfig(pts)
    if isinstance(config, UnlabeledConfig):
        s = set(config.points)
        if x in s and y not in s:
            s = (s - {x}) | {y}
        elif y in s and x not in s:
            s = (s - {y}) | {x}
        return UnlabeledConfig(s)
    raise TypeError(f"not a configuration: {config!r}")


class StateSpaceTooLarge(ValueError):
    pass


def _binom_table(S: int, n: int) -> np.ndarray:
    tab = np.zeros((S + 1, n + 1), dtype=np.int64)
    for a in range(S + 1):
        for b in range(n + 1):
            tab[a, b] = math.comb(a, b)
    return tab


@dataclass(eq=False)
class StateSpace:
    """Enumerated configurations of ``n`` particles in a box.

    ``states[i]`` holds the site indices of configuration ``i``; for unlabeled
    spaces rows are sorted. Ids follow lexicographic order of those rows.
    """

    box: Box
    n: int
    labeled: bool
    states: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return int(self.states.shape[0])

    @property
    def n_sites(self) -> int:
        return self.box.n_sites

    def rank(self, rows) -> np.ndarray:
        """Ids of configurations given as rows of site indices (vectorized)."""
        rows = np.asarray(rows, dtype=np.int64).reshape(-1, self.n)
        S, n = self.n_sites, self.n
        if n == 0:
            return np.zeros(rows.shape[0], dtype=np.int64)
        if not self.labeled:
            rows = np.sort(rows, axis=1)
            tab = self._binoms()
            r = np.full(rows.shape[0], tab[S, n] - 1, dtype=np.int64)
            for i in range(n):
                r -= tab[S - 1 - rows[:, i], n - i]
            return r
        r = np.zeros(rows.shape[0], dtype=np.int64)
        for i in range(n):
            smaller = rows[:, i].copy()
            for j in range(i):
                smaller -= rows[:, j] < rows[:, i]
            r += smaller * math.perm(S - 1 - i, n - 1 - i)
        return r

    def _binoms(self) -> np.ndarray:
        tab = getattr(self, "_btab", None)
        if tab is None:
            tab = _binom_table(self.n_sites, self.n)
            self._btab = tab
        return tab

    def coords(self, ids=None) -> np.ndarray:
        """Coordinates of states, shape (k, n, d)."""
        st = self.states if ids is None else self.states[np.asarray(ids)]
        return self.box.coords()[st]

    def config(self, i: int):
        pts = [tuple(int(c) for c in p) for p in self.coords([i])[0]]
        return LabeledConfig(pts) if self.labeled else UnlabeledConfig(pts)

    def index(self, config) -> int:
        if self.labeled and not isinstance(config, LabeledConfig):
            raise TypeError("labeled space needs a LabeledConfig")
        if not self.labeled and isinstance(config, LabeledConfig):
            config = config.forget()
        if len(config) != self.n:
            raise ValueError("wrong particle count")
        sites = self.box.site_index(list(config.points))
        return int(self.rank(sites[None, :])[0])


def state_space_size(n_sites: int, n: int, labeled: bool) -> int:
    return math.perm(n_sites, n) if labeled else math.comb(n_sites, n)


def enumerate_states(box: Box, n: int, labeled: bool = False,
                     cap: int = DEFAULT_SIZE_CAP) -> StateSpace:
    S = box.n_sites
    if n < 0 or n > S:
        raise ValueError(f"cannot place {n} particles on {S} sites")
    size = state_space_size(S, n, labeled)
    if size > cap:
        raise StateSpaceTooLarge(f"state space of size {size} exceeds cap {cap}")
    gen = itertools.permutations(range(S), n) if labeled else itertools.combinations(range(S), n)
    flat = np.fromiter(itertools.chain.from_iterable(gen), dtype=np.int32, count=size * n)
    return StateSpace(box=box, n=n, labeled=labeled, states=flat.reshape(size, n))
