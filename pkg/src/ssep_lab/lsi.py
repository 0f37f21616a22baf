"""Numerical audit of log-Sobolev inequalities on small cubes and of canonical paths."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .lattice import Kernel, LabeledConfig, nearest_neighbor_kernel

ENTROPY_CLIP = 1e-12
STALL_WINDOW = 100
STALL_TOL = 1e-9
MAX_STATES = 100_000
MAX_PERM_POINTS = 7


# ---------------------------------------------------------------------------
# Functionals
# ---------------------------------------------------------------------------

def _check_density(f) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.ndim != 1 or f.size == 0:
        raise ValueError("density must be a non-empty vector")
    if f.min() < 0:
        raise ValueError("density has negative entries")
    return f


def normalize(f) -> np.ndarray:
    """Rescale to mean one (a density w.r.t. the uniform probability)."""
    f = _check_density(f)
    s = f.mean()
    if s <= 0:
        raise ValueError("density is identically zero")
    return f / s


def _relative_entropy_terms(u: np.ndarray) -> np.ndarray:
    """(1+u) log(1+u) − u, with a series near u = 0 to avoid cancellation."""
    out = np.empty_like(u)
    small = np.abs(u) < 1e-2
    us = u[small]
    # Σ_{k≥2} (−1)^k u^k / (k(k−1))
    acc = np.zeros_like(us)
    pw = us * us
    for k in range(2, 10):
        acc += (-1) ** k * pw / (k * (k - 1))
        pw = pw * us
    out[small] = acc
    ub = u[~small]
    with np.errstate(divide="ignore", invalid="ignore"):
        out[~small] = np.where(ub > -1.0, (1.0 + ub) * np.log1p(np.maximum(ub, -1.0 + 1e-300)) - ub,
                               1.0)
    return out


def entropy(f) -> float:
    """E_unif[f log f] for a mean-one density, with 0 log 0 = 0."""
    f = _check_density(f)
    if abs(f.mean() - 1.0) > 1e-9:
        raise ValueError("density is not normalized (mean must be 1)")
    return float(np.sum(_relative_entropy_terms(f - 1.0)) / f.size)


def entropy_sum(f) -> float:
    """Σ_x f(x) log f(x), the unnormalized form."""
    return entropy(f) * np.asarray(f).size


def dirichlet(f, edges, psi=None) -> float:
    """Σ_{(x,y) ∈ edges} (√f(y) − √f(x))².

    With ``psi`` (one weight per edge) returns ½ Σ ψ (√f(y) − √f(x))².
    """
    f = _check_density(f)
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    g = np.sqrt(f)
    d2 = (g[e[:, 1]] - g[e[:, 0]]) ** 2
    if psi is None:
        return float(d2.sum())
    w = np.asarray(psi, dtype=float)
    if w.shape != (len(e),):
        raise ValueError("need one weight per edge")
    return float(0.5 * np.sum(w * d2))


# ---------------------------------------------------------------------------
# Cube state spaces
# ---------------------------------------------------------------------------

@dataclass
class CubeSpace:
    """Labeled configurations of m particles in the cube {0, …, ℓ−1}^d with exchange edges."""

    ell: int
    m: int
    d: int
    states: list[tuple]
    edges: np.ndarray
    bonds: np.ndarray = field(repr=False)   # (edges, 2) site pairs, as flat site ids

    @property
    def size(self) -> int:
        return len(self.states)


def _cube_sites(ell: int, d: int) -> list[tuple[int, ...]]:
    return list(itertools.product(range(ell), repeat=d))


def cube_space(ell: int, m: int = 1, d: int = 1, kernel: Kernel | None = None) -> CubeSpace:
    """Enumerate Λ^m ∩ B_m and list each exchange edge once.

    An edge joins x and σ^{a,b}x for sites a, b of the cube with p(b − a) > 0;
    exchanges of two empty sites are loops and are left out.
    """
    if ell < 2 or m < 1:
        raise ValueError("need ell >= 2 and m >= 1")
    kernel = kernel or nearest_neighbor_kernel(d)
    if kernel.d != d:
        raise ValueError("kernel dimension mismatch")
    sites = _cube_sites(ell, d)
    if m > len(sites):
        raise ValueError("more particles than sites")
    n_states = math.perm(len(sites), m)
    if n_states > MAX_STATES:
        raise ValueError(f"{n_states} states exceed the limit of {MAX_STATES}")
    sid = {s: i for i, s in enumerate(sites)}
    states = list(itertools.permutations(range(len(sites)), m))
    index = {s: i for i, s in enumerate(states)}
    disp = [v for v, _ in kernel.half_support()]
    pairs = []
    for s in sites:
        for v in disp:
            t = tuple(a + b for a, b in zip(s, v))
            if t in sid:
                pairs.append((sid[s], sid[t]))
    edges, bonds = [], []
    for i, st in enumerate(states):
        for a, b in pairs:
            if a not in st and b not in st:
                continue
            new = tuple(b if p == a else a if p == b else p for p in st)
            j = index[new]
            if i < j:
                edges.append((i, j))
                bonds.append((a, b))
    coords = [tuple(sites[p] for p in st) for st in states]
    return CubeSpace(ell=ell, m=m, d=d, states=coords,
                     edges=np.array(edges, dtype=np.int64).reshape(-1, 2),
                     bonds=np.array(bonds, dtype=np.int64).reshape(-1, 2))


# ---------------------------------------------------------------------------
# Ratio maximization
# ---------------------------------------------------------------------------

def lsi_ratio(f, edges) -> float:
    """Σ f log f / Σ_edges (√f(y) − √f(x))² for a mean-one density."""
    f = normalize(f)
    d = dirichlet(f, edges)
    if d <= 0:
        return 0.0
    return entropy_sum(f) / d


def _ratio_and_grad(v: np.ndarray, e: np.ndarray, n: int):
    """−ratio and its gradient in v, where √f = √n · v/‖v‖."""
    nv = np.linalg.norm(v)
    g = math.sqrt(n) * v / nv
    f = g * g
    logf = np.log(np.maximum(f, ENTROPY_CLIP))
    ent = float(np.sum(_relative_entropy_terms((g - 1.0) * (g + 1.0))))
    diff = g[e[:, 1]] - g[e[:, 0]]
    dir_ = float(diff @ diff)
    if dir_ <= 1e-300:
        return 0.0, np.zeros_like(v)
    dent = 2.0 * g * logf
    ddir = np.zeros(n)
    np.add.at(ddir, e[:, 1], 2.0 * diff)
    np.add.at(ddir, e[:, 0], -2.0 * diff)
    r = ent / dir_
    dg = (dent - r * ddir) / dir_
    # project through g = √n v/‖v‖
    dv = math.sqrt(n) / nv * (dg - (g @ dg) * g / n)
    return -r, -dv


def _stalled(hist: list[float]) -> bool:
    """True unless the last STALL_WINDOW iterations improved the ratio by more than STALL_TOL."""
    tail = hist[-STALL_WINDOW - 1:]
    return len(tail) < 2 or (tail[-1] - tail[0]) <= STALL_TOL


@dataclass
class LSIResult:
    c_hat: float
    density: np.ndarray
    restarts: int
    converged: bool
    history: list[float] = field(default_factory=list, repr=False)


def _structured_starts(space_size: int, coords: Sequence | None, limit: int, rng) -> list:
    starts = []
    picks = np.arange(space_size)
    if space_size > limit:
        picks = rng.choice(space_size, size=limit, replace=False)
    for i in picks:
        v = np.full(space_size, 1e-3)
        v[i] = 1.0
        starts.append(v)
    if coords is not None:
        first = np.array([c[0][0] for c in coords])
        for k in np.unique(first)[1:]:
            starts.append(np.where(first < k, 1.0, 1e-3))
            starts.append(np.where(first >= k, 1.0, 1e-3))
    return starts


def lsi_ratio_max(space, edges=None, iterations: int = 2000, rng=None,
                  random_starts: int = 64, structured_limit: int = 64) -> LSIResult:
    """Lower bound on the best constant c in Σ f log f ≤ c Σ_edges (√f(y) − √f(x))².

    Local maximization of the ratio on the sphere ‖√f‖² = |space| from random and
    structured starts (point masses, half-space indicators).
    """
    if isinstance(space, CubeSpace):
        n, coords = space.size, space.states
        edges = space.edges if edges is None else edges
    else:
        n, coords = int(space), None
    if n > MAX_STATES:
        raise ValueError("state space too large")
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    starts = [rng.exponential(size=n) + 1e-3 for _ in range(random_starts)]
    starts += _structured_starts(n, coords, structured_limit, rng)
    best, best_v, best_hist, best_ok = -np.inf, None, [], True
    for v0 in starts:
        hist: list[float] = []
        res = minimize(_ratio_and_grad, v0, args=(e, n), jac=True, method="L-BFGS-B",
                       options={"maxiter": iterations, "gtol": 1e-12, "ftol": 1e-15},
                       callback=lambda xk: hist.append(-_ratio_and_grad(xk, e, n)[0]))
        val = -float(res.fun)
        if val > best:
            best, best_v, best_hist = val, res.x, hist
            best_ok = res.nit < iterations or _stalled(hist)
    g = best_v / np.linalg.norm(best_v)
    f = normalize(g * g)
    converged = best_ok
    return LSIResult(c_hat=float(best), density=f, restarts=len(starts), converged=converged,
                     history=best_hist)


def brute_force_two_state(points: int = 200001) -> float:
    """max over f = (2t, 2 − 2t) of the ratio on a single edge, by grid search."""
    t = np.linspace(0.0, 1.0, points)[1:-1]
    best = 0.0
    for ti in t:
        best = max(best, lsi_ratio(np.array([2 * ti, 2 - 2 * ti]), [(0, 1)]))
    return best


# ---------------------------------------------------------------------------
# Symmetric group
# ---------------------------------------------------------------------------

def permutations_of(m: int) -> list[tuple[int, ...]]:
    if m > MAX_PERM_POINTS:
        raise ValueError(f"m = {m} exceeds {MAX_PERM_POINTS}")
    return list(itertools.permutations(range(m)))


def sym_group_dirichlet(g, m: int) -> float:
    """Σ over ordered pairs (σ, σ̃) of S_m of [g(σ) − g(σ̃)]²."""
    if m < 1 or m > MAX_PERM_POINTS:
        raise ValueError(f"m must lie in 1..{MAX_PERM_POINTS}")
    g = np.asarray(g, dtype=float)
    if g.shape != (math.factorial(m),):
        raise ValueError("g needs one value per permutation")
    k = g.size
    # Σ_{σ,σ̃} (g_σ − g_σ̃)² = 2k Σ g² − 2 (Σ g)²
    return float(2 * k * np.sum(g * g) - 2 * g.sum() ** 2)


def sym_group_edges(m: int) -> np.ndarray:
    """Complete graph on S_m, each unordered pair once."""
    k = math.factorial(m)
    return np.array(list(itertools.combinations(range(k), 2)), dtype=np.int64).reshape(-1, 2)


def sym_group_lsi(m: int, rng=None, iterations: int = 500) -> LSIResult:
    """Fitted constant for Σ g log g ≤ C_0 D_{S_m}(√g); D counts ordered pairs, hence the ½."""
    res = lsi_ratio_max(math.factorial(m), sym_group_edges(m), iterations=iterations, rng=rng,
                        random_starts=16)
    res.c_hat *= 0.5
    return res


# ---------------------------------------------------------------------------
# Canonical paths
# ---------------------------------------------------------------------------

@dataclass
class PathRecord:
    """Exchange path x = z_0, …, z_r = y; ``bonds[j]`` is the exchanged pair (a, b) of step j."""

    x: LabeledConfig
    y: LabeledConfig
    states: list[LabeledConfig]
    bonds: list[tuple[int, int]]
    hull: int
    inflation: float = 3.0

    @property
    def length(self) -> int:
        return len(self.bonds)

    @property
    def bound(self) -> float:
        m, d = len(self.x), len(self.x.points[0])
        return self.inflation * m * self.hull * d

    def coordinate_property(self) -> float:
        """Fraction of states with all coordinates but at most one in {x_1, …, x_m}."""
        base = set(self.x.points)
        ok = [sum(p not in base for p in z.points) <= 1 for z in self.states]
        return float(np.mean(ok))

    def validate(self, kernel: Kernel | None = None) -> bool:
        """Every step is an exchange σ^{a,b} with p(b − a) > 0 that changes the state."""
        kernel = kernel or nearest_neighbor_kernel(len(self.x.points[0]))
        if self.states[0] != self.x or self.states[-1] != self.y:
            return False
        for (a, b), s, t in zip(self.bonds, self.states, self.states[1:]):
            if kernel.p((b - a,)) <= 0:
                return False
            if _swap(s, a, b) != t or t == s:
                return False
            if _swap(t, a, b) != s:          # exchanges are involutions
                return False
        return True


def _swap(c: LabeledConfig, a: int, b: int) -> LabeledConfig:
    pts = []
    for (p,) in c.points:
        pts.append((b,) if p == a else (a,) if p == b else (p,))
    return LabeledConfig(pts)


def _cycles(sigma: Sequence[int]) -> list[list[int]]:
    """Orbits of σ, starting with the orbit of 0, then the smallest unvisited index."""
    seen, out = set(), []
    for start in range(len(sigma)):
        if start in seen:
            continue
        orb, i = [], start
        while i not in seen:
            seen.add(i)
            orb.append(i)
            i = sigma[i]
        out.append(orb)
    return out


def build_path(x: LabeledConfig, y: LabeledConfig) -> PathRecord:
    """Exclusion-respecting exchange path from x to y (same occupied set, d = 1).

    Particles are packed against the left end of their hull, the permutation
    y_i = x_{σ(i)} is realized orbit by orbit with adjacent swaps inside the
    packed block, and the packing is undone. Length ≤ 2 m h, h the hull size.
    """
    if x.forget() != y.forget():
        raise ValueError("x and y occupy different sets")
    if len(x.points[0]) != 1:
        raise NotImplementedError("canonical paths are built in d = 1")
    m = len(x)
    pos = [p[0] for p in x.points]
    lo, hi = min(pos), max(pos)
    where = {p: i for i, p in enumerate(pos)}
    sigma = [where[q[0]] for q in y.points]          # y_i = x_{σ(i)}
    if x == y:
        return PathRecord(x=x, y=y, states=[x], bonds=[], hull=hi - lo + 1)
    cur = x
    states, bonds = [x], []

    def step(a: int, b: int):
        nonlocal cur
        cur = _swap(cur, a, b)
        states.append(cur)
        bonds.append((a, b))

    # pack: k-th occupied site (from the left) moves to lo + k
    occ = sorted(pos)
    for k, p in enumerate(occ):
        for s in range(p, lo + k, -1):
            step(s - 1, s)
    # realize σ inside the block, one orbit at a time; slot k of the block is
    # site lo + k and unpacking maps slot k back to occ[k]
    slot_of_site = {p: k for k, p in enumerate(occ)}
    target = [slot_of_site[q[0]] for q in y.points]       # final slot of each label
    content = [0] * m
    for label, p in enumerate(pos):
        content[slot_of_site[p]] = label

    def transpose(p: int, q: int):
        # bubble slot p to q, then the displaced content back to p
        lo_, hi_ = min(p, q), max(p, q)
        for s in range(lo_, hi_):
            step(lo + s, lo + s + 1)
        for s in range(hi_ - 1, lo_, -1):
            step(lo + s - 1, lo + s)
        content[p], content[q] = content[q], content[p]

    for orb in _cycles(sigma):
        p = content.index(orb[0])
        while target[content[p]] != p:
            transpose(p, target[content[p]])
    # unpack in reverse order
    for k in range(m - 1, -1, -1):
        p = occ[k]
        for s in range(lo + k, p):
            step(s, s + 1)
    if cur != y:
        raise AssertionError("path construction did not reach y")
    rec = PathRecord(x=x, y=y, states=states, bonds=bonds, hull=hi - lo + 1)
    if rec.length > rec.bound:
        raise AssertionError(f"path length {rec.length} exceeds {rec.bound}")
    return rec


def random_path_pairs(ell: int, m: int, count: int, rng) -> list[tuple[LabeledConfig, LabeledConfig]]:
    """Random (x, y) with the same occupied set of m sites in {0, …, ℓ−1}."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    out = []
    for _ in range(count):
        sites = rng.choice(ell, size=m, replace=False)
        perm = rng.permutation(m)
        out.append((LabeledConfig([(int(s),) for s in sites]),
                    LabeledConfig([(int(sites[j]),) for j in perm])))
    return out
