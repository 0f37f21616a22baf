"""Space-time correlations (v-functions) and two-time correlations of SSEP
started from a slowly varying product measure, solved by Duhamel's formula on
a torus, plus their Monte Carlo counterparts."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

from .forward import MAX_CHUNK_MEAN, Uniformizer, density_operator
from .generator import build_unlabeled_generator
from .lattice import Box, Kernel, StateSpace, UnlabeledConfig, enumerate_states
from .simulate import (RngStream, integrate_statistics, sample_product_measure,
                       simulate_ssep, profile_samples)

log = logging.getLogger(__name__)

RICHARDSON_RTOL = 1e-7
ORDERED = "ordered"
BOND = "bond"


class RichardsonError(RuntimeError):
    pass


class CacheMiss(KeyError):
    pass


# ---------------------------------------------------------------------------
# Small scalar helpers

def _pair_factor(convention: str) -> float:
    if convention == ORDERED:
        return 2.0
    if convention == BOND:
        return 1.0
    raise ValueError(f"unknown pair convention {convention!r}")


def interaction_I(A, kernel: Kernel, convention: str = ORDERED) -> float:
    """I(A) = Σ_{x,y∈A} p(y−x); ``bond`` counts each unordered pair once."""
    pts = list(A.points) if isinstance(A, UnlabeledConfig) else [tuple(np.atleast_1d(p)) for p in A]
    tot = 0.0
    for a, b in itertools.combinations(pts, 2):
        tot += kernel.p(tuple(bb - aa for aa, bb in zip(a, b)))
    return tot * _pair_factor(convention)


def an_bound(m: int, t: float, N: int) -> float:
    """The A_N(m, t) table: 1/N, 1/N², log N/(N²√(1+tN²)), 1/(N²√(1+tN²))."""
    if m < 0 or t < 0 or N < 2:
        raise ValueError("need m >= 0, t >= 0, N >= 2")
    if m == 0:
        return 1.0 / N
    if m == 1:
        return 1.0 / N ** 2
    root = math.sqrt(1.0 + t * N * N)
    if m == 2:
        return math.log(N) / (N * N * root)
    return 1.0 / (N * N * root)


def b_ladder(j: int, N: float) -> float:
    """B(2i) = N^{-i}, B(2i+1) = log N / N^{i+1}."""
    if j < 0:
        raise ValueError("j must be >= 0")
    i, odd = divmod(j, 2)
    return math.log(N) / N ** (i + 1) if odd else N ** (-i)


@dataclass(frozen=True)
class DecayFit:
    slope: float
    intercept: float
    r2: float


def decay_fit(records: Iterable[tuple[float, float]]) -> DecayFit:
    """OLS of log|value| on log N, dropping zero values."""
    rec = [(float(n), abs(float(v))) for n, v in records]
    if not rec or all(v == 0 for _, v in rec):
        raise ValueError("all values are zero")
    rec = [(n, v) for n, v in rec if v > 0]
    if len({n for n, _ in rec}) < 4:
        raise ValueError("need at least 4 distinct N values")
    x = np.log([n for n, _ in rec])
    y = np.log([v for _, v in rec])
    slope, icpt = np.polyfit(x, y, 1)
    pred = icpt + slope * x
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum((y - pred) ** 2)) / ss if ss > 0 else 1.0
    return DecayFit(float(slope), float(icpt), r2)


# ---------------------------------------------------------------------------
# Profiles

def cosine_profile(mean: float = 0.5, amp: float = 0.25, period: float = 1.0) -> Callable:
    if not (0 <= mean - abs(amp) and mean + abs(amp) <= 1):
        raise ValueError("profile leaves [0, 1]")
    return lambda u: mean + amp * np.cos(2 * np.pi * np.asarray(u, float) / period)


def constant_profile(alpha: float) -> Callable:
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    return lambda u: np.full(np.shape(u), float(alpha))


# ---------------------------------------------------------------------------
# Level structures for the hierarchy

def pair_rate_matrix(kernel: Kernel, box: Box) -> np.ndarray:
    """Dense p(y − x) on the torus (side must exceed twice the range)."""
    nbr = box.neighbor_table(kernel)
    Pm = np.zeros((box.n_sites, box.n_sites))
    for k, w in enumerate(kernel.probs):
        Pm[np.arange(box.n_sites), nbr[:, k]] = w
    return Pm


@dataclass(eq=False)
class _Level:
    k: int
    space: StateSpace
    prop: Uniformizer
    rows: np.ndarray          # state ids holding a close pair
    w: np.ndarray
    u: np.ndarray             # site of the first pair member
    v: np.ndarray
    drop_u: np.ndarray        # rank of A∖{u} in level k−1
    drop_v: np.ndarray
    drop_uv: np.ndarray       # rank of A∖{u,v} in level k−2


def _level_space(box: Box, k: int) -> StateSpace:
    if k == 0:
        return StateSpace(box=box, n=0, labeled=False, states=np.zeros((1, 0), dtype=np.int32))
    return enumerate_states(box, k, labeled=False)


def _rank_any(spaces: dict, rows: np.ndarray, k: int) -> np.ndarray:
    if k == 0:
        return np.zeros(rows.shape[0], dtype=np.int64)
    return spaces[k].rank(rows)


def _build_level(box: Box, kernel: Kernel, k: int, speed: float, Pm: np.ndarray,
                 spaces: dict) -> _Level:
    space = spaces[k]
    op = build_unlabeled_generator(space, kernel)
    prop = Uniformizer(op, speed=speed)
    st = space.states.astype(np.int64)
    rows, w, u, v, du, dv, duv = [], [], [], [], [], [], []
    cols = list(range(k))
    for i, j in itertools.combinations(cols, 2):
        wij = Pm[st[:, i], st[:, j]]
        sel = np.flatnonzero(wij > 0)
        if sel.size == 0:
            continue
        sub = st[sel]
        rows.append(sel)
        w.append(wij[sel])
        u.append(sub[:, i])
        v.append(sub[:, j])
        du.append(_rank_any(spaces, sub[:, [c for c in cols if c != i]], k - 1))
        dv.append(_rank_any(spaces, sub[:, [c for c in cols if c != j]], k - 1))
        duv.append(_rank_any(spaces, sub[:, [c for c in cols if c not in (i, j)]], k - 2))
    cat = (lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dtype=dt))
    return _Level(k, space, prop, cat(rows, np.int64), cat(w, float), cat(u, np.int64),
                  cat(v, np.int64), cat(du, np.int64), cat(dv, np.int64), cat(duv, np.int64))


def _source(level: _Level, lower1: np.ndarray, lower2: np.ndarray, rho: np.ndarray,
            N2: float, convention: str) -> np.ndarray:
    """Vectorized source over E_k (same algebra for φ and for two-time correlations).

    Per unordered bond {u, v} ⊂ A and under the ordered-pair reading:
    2 p (ρ_u − ρ_v)(F(A∖u) − F(A∖v)) − p (ρ_u − ρ_v)² F(A∖{u,v}), all times N².
    The bond reading halves both terms.
    """
    c = _pair_factor(convention)
    out = np.zeros(level.space.size)
    if level.rows.size == 0:
        return out
    dr = rho[level.u] - rho[level.v]
    g = c * level.w * dr * (lower1[level.drop_u] - lower1[level.drop_v])
    g -= 0.5 * c * level.w * dr * dr * lower2[level.drop_uv]
    out += np.bincount(level.rows, weights=N2 * g, minlength=level.space.size)
    return out


class _Marcher:
    """March levels lo..hi of a hierarchy with ETD steps.

    ``fixed`` holds constant lower levels (by cardinality).  ``run`` steps
    through the given substep edges and records every level at the edge
    indices listed in ``out_idx``.
    """

    def __init__(self, levels: dict, lo: int, hi: int, fixed: dict, rho_prop: Uniformizer,
                 N2: float, convention: str):
        self.levels, self.lo, self.hi = levels, lo, hi
        self.fixed, self.rho_prop, self.N2, self.convention = fixed, rho_prop, N2, convention

    def run(self, init: dict, rho0: np.ndarray, edges: np.ndarray, out_idx: Sequence[int]):
        cur = {k: np.array(v, dtype=float) for k, v in init.items()}
        rho = rho0.copy()
        vals = dict(self.fixed)
        vals.update(cur)
        g = {k: _source(self.levels[k], vals[k - 1], vals[k - 2], rho, self.N2, self.convention)
             for k in range(self.lo, self.hi + 1)}
        want = set(int(i) for i in out_idx)
        outs = {}
        if 0 in want:
            outs[0] = {k: cur[k].copy() for k in cur}
        for i in range(1, len(edges)):
            h = edges[i] - edges[i - 1]
            rho = self.rho_prop.evolve(rho, h)
            new = dict(self.fixed)
            gnew = {}
            for k in range(self.lo, self.hi + 1):
                gk = _source(self.levels[k], new[k - 1], new[k - 2], rho, self.N2, self.convention)
                new[k] = self.levels[k].prop.etd_step(cur[k], g[k], gk, h)
                gnew[k] = gk
            for k in range(self.lo, self.hi + 1):
                cur[k] = new[k]
            g = gnew
            if i in want:
                outs[i] = {k: cur[k].copy() for k in cur}
        return [outs[int(i)] for i in out_idx], rho


def _base_edges(t0: float, out_times: Sequence[float], rate: float, N2: float,
                per_efold: int = 2):
    """Substep edges from t0 through every output time.

    Steps are graded geometrically in 1 + (t − t0)N² (the diffusive time
    scale of the sources right after t0) and capped so one step never exceeds
    the Poisson-mean checkpoint.
    """
    out_times = np.asarray(out_times, dtype=float)
    top = float(out_times.max()) - t0
    pts = [t0, *out_times.tolist()]
    if top > 0:
        efolds = math.log1p(top * N2)
        j = np.arange(1, math.ceil(per_efold * efolds) + 1)
        pts.extend((t0 + np.expm1(j / per_efold) / N2).tolist())
    edges = np.unique(np.array([p for p in pts if t0 <= p <= t0 + top]))
    hmax = MAX_CHUNK_MEAN / rate if rate > 0 else np.inf
    fine = [edges[0]]
    for a, b in zip(edges[:-1], edges[1:]):
        m = max(1, math.ceil((b - a) / hmax))
        fine.extend(a + (b - a) * np.arange(1, m + 1) / m)
        fine[-1] = b
    edges = np.array(fine)
    out_idx = [int(np.flatnonzero(edges == t)[0]) for t in out_times]
    return edges, out_idx


def _refine(edges: np.ndarray, out_idx: Sequence[int], factor: int):
    if factor == 1:
        return edges, list(out_idx)
    a, b = edges[:-1], edges[1:]
    frac = np.arange(factor) / factor
    fine = (a[:, None] + (b - a)[:, None] * frac[None, :]).ravel()
    fine = np.append(fine, edges[-1])
    return fine, [i * factor for i in out_idx]


def _rel_diff(a: list, b: list) -> float:
    worst = 0.0
    for da, db in zip(a, b):
        for k in db:
            scale = max(np.abs(db[k]).max(initial=0.0), 1e-300)
            worst = max(worst, np.abs(da[k] - db[k]).max(initial=0.0) / scale)
    return worst


def _romberg_row(new: list, prev_row: list | None) -> list:
    """Next row of a Romberg tableau in h² (entry i cancels the h^{2i} error term)."""
    row = [new]
    if prev_row is None:
        return row
    for i, older in enumerate(prev_row, start=1):
        c = 4.0 ** i - 1.0
        last = row[-1]
        row.append([{k: f[k] + (f[k] - o[k]) / c for k in f} for f, o in zip(last, older)])
    return row


def _richardson(marcher: _Marcher, t0, init, rho0, out_times, rate, rtol, max_doublings,
                label: str):
    """Halve every substep until successive Romberg diagonals agree to ``rtol``.

    Returns the accepted solution and the observed relative difference.
    """
    edges, idx = _base_edges(t0, out_times, rate, marcher.N2)
    factor = 1
    first, _ = marcher.run(init, rho0, *_refine(edges, idx, factor))
    row = _romberg_row(first, None)
    err = float("inf")
    for _ in range(max_doublings):
        factor *= 2
        nxt, _ = marcher.run(init, rho0, *_refine(edges, idx, factor))
        new_row = _romberg_row(nxt, row)
        raw = _rel_diff(row[0], nxt)
        err = min(raw, _rel_diff(row[-1], new_row[-1]))
        log.info("%s: substep factor %d, Richardson difference %.3g", label, factor, err)
        if err <= rtol:
            return (nxt if raw <= rtol else new_row[-1]), err
        row = new_row
    raise RichardsonError(f"{label}: Richardson difference {err:.3g} above {rtol}")


# ---------------------------------------------------------------------------
# Set partitions and cumulant closure

@lru_cache(maxsize=None)
def _partitions(q: int, max_block: int) -> tuple:
    """Set partitions of range(q) into blocks of sizes 2..max_block."""
    def rec(items):
        if not items:
            yield ()
            return
        first, rest = items[0], items[1:]
        for size in range(1, min(max_block, len(items))):
            for comb in itertools.combinations(rest, size):
                block = (first,) + comb
                remaining = tuple(x for x in rest if x not in comb)
                for tail in rec(remaining):
                    yield (block,) + tail
    return tuple(rec(tuple(range(q))))


@dataclass(frozen=True)
class VFunctionRecord:
    A: UnlabeledConfig
    t: float
    value: float
    method: str
    error: float


@dataclass(frozen=True)
class TwoTimeRecord:
    s: float
    A: UnlabeledConfig
    t: float
    B: UnlabeledConfig
    value: float
    U_part: float
    duhamel_part: float


class CorrelationContext:
    """Density table and v-function tables on a torus of side 2L+1 (default L = 2N).

    Cardinalities up to ``max_card`` are solved exactly by the Duhamel
    hierarchy; larger sets are evaluated by cumulant closure (connected
    correlations above ``max_card`` set to zero).
    """

    def __init__(self, kernel: Kernel, N: int, profile: Callable, times: Sequence[float],
                 L: int | None = None, max_card: int = 2, convention: str = ORDERED,
                 rtol: float = RICHARDSON_RTOL, max_doublings: int = 6):
        if N < 2:
            raise ValueError("N must be >= 2")
        self.kernel, self.N, self.profile = kernel, int(N), profile
        self.L = int(L) if L is not None else 2 * self.N
        self.box = Box(kernel.d, self.L, "torus")
        if self.box.side <= 2 * kernel.range:
            raise ValueError("torus too small")
        self.max_card = int(max_card)
        if self.max_card < 2:
            raise ValueError("max_card must be >= 2")
        _pair_factor(convention)
        self.convention = convention
        self.rtol, self.max_doublings = rtol, max_doublings
        times = np.asarray(sorted(set(float(t) for t in times)), dtype=float)
        if times.size == 0 or times[0] < 0:
            raise ValueError("need non-negative times")
        self.times = times
        self.N2 = float(self.N) ** 2
        self.rho0 = profile_samples(profile, self.N, self.box)
        self.rho_prop = Uniformizer(density_operator(kernel, self.box), speed=self.N2)
        self.Pm = pair_rate_matrix(kernel, self.box)
        self._spaces: dict = {}
        self._levels: dict = {}
        self._phi: dict[float, dict[int, np.ndarray]] = {}
        self._rho: dict[float, np.ndarray] = {}
        self.richardson_error = float("nan")
        self._solved = False

    # -- structure -------------------------------------------------------
    def space(self, k: int) -> StateSpace:
        if k not in self._spaces:
            self._spaces[k] = _level_space(self.box, k)
        return self._spaces[k]

    def level(self, k: int) -> _Level:
        if k not in self._levels:
            for j in range(max(0, k - 2), k + 1):
                self.space(j)
            self._levels[k] = _build_level(self.box, self.kernel, k, self.N2, self.Pm, self._spaces)
        return self._levels[k]

    def rho(self, t: float) -> np.ndarray:
        t = float(t)
        if t not in self._rho:
            if t == 0:
                self._rho[t] = self.rho0.copy()
            else:
                self._rho[t] = self.rho_prop.evolve(self.rho0, t)
        return self._rho[t]

    # -- solving ---------------------------------------------------------
    def solve(self) -> "CorrelationContext":
        if self._solved:
            return self
        K = self.max_card
        levels = {k: self.level(k) for k in range(2, K + 1)}
        fixed = {0: np.ones(1), 1: np.zeros(self.box.n_sites)}
        init = {k: np.zeros(levels[k].space.size) for k in levels}
        marcher = _Marcher(levels, 2, K, fixed, self.rho_prop, self.N2, self.convention)
        rate = max(lv.prop.rate for lv in levels.values())
        outs, err = _richardson(marcher, 0.0, init, self.rho0, self.times, rate,
                                self.rtol, self.max_doublings, f"v-functions N={self.N}")
        self.richardson_error = err
        for t, o in zip(self.times, outs):
            tab = {0: np.ones(1), 1: np.zeros(self.box.n_sites)}
            tab.update(o)
            self._phi[float(t)] = tab
        self._solved = True
        return self

    def _table(self, t: float) -> dict:
        self.solve()
        key = float(t)
        if key not in self._phi:
            raise CacheMiss(f"time {t} is not on the context grid")
        return self._phi[key]

    def phi_vector(self, t: float, k: int) -> np.ndarray:
        if k > self.max_card:
            raise CacheMiss(f"cardinality {k} above max_card={self.max_card}")
        return self._table(t)[k]

    def _sites(self, A) -> np.ndarray:
        pts = list(A.points) if isinstance(A, UnlabeledConfig) else list(A)
        return np.sort(self.box.site_index(pts)) if pts else np.zeros(0, dtype=np.int64)

    def phi_rows(self, t: float, rows: np.ndarray) -> np.ndarray:
        """φ(t, ·) for sets given as rows of site indices (all the same size)."""
        rows = np.sort(np.asarray(rows, dtype=np.int64), axis=1)
        q = rows.shape[1]
        if q == 0:
            return np.ones(rows.shape[0])
        if q == 1:
            return np.zeros(rows.shape[0])
        tab = self._table(t)
        if q <= self.max_card:
            return tab[q][self.space(q).rank(rows)]
        kap = {k: self._cumulant_rows(t, k) for k in range(2, self.max_card + 1)}
        out = np.zeros(rows.shape[0])
        for part in _partitions(q, self.max_card):
            term = np.ones(rows.shape[0])
            for block in part:
                term *= kap[len(block)](rows[:, list(block)])
            out += term
        return out

    def _cumulant_rows(self, t: float, k: int):
        """Joint cumulant lookup for sets of size k ≤ max_card (singletons are centered)."""
        tab = self._table(t)
        space = self.space(k)
        if k == 2:
            vec = tab[2]
        else:
            key = ("kappa", float(t), k)
            vec = self._phi.get(key)
            if vec is None:
                st = space.states.astype(np.int64)
                vec = tab[k].copy()
                low = {j: self._cumulant_rows(t, j) for j in range(2, k)}
                for part in _partitions(k, k - 1):
                    term = np.ones(space.size)
                    for block in part:
                        term *= low[len(block)](st[:, list(block)])
                    vec -= term
                self._phi[key] = vec
        return lambda rows: vec[space.rank(np.sort(rows, axis=1))]

    def phi(self, t: float, A) -> float:
        s = self._sites(A)
        if len(set(s.tolist())) != len(s):
            raise ValueError("set has repeated sites")
        return float(self.phi_rows(t, s[None, :])[0])


def solve_vfunction(A, times: Sequence[float], ctx: CorrelationContext) -> list[VFunctionRecord]:
    cfg = A if isinstance(A, UnlabeledConfig) else UnlabeledConfig(A)
    ctx.solve()
    return [VFunctionRecord(cfg, float(t), ctx.phi(t, cfg), "duhamel", ctx.richardson_error)
            for t in times]


def sup_abs_vfunction(ctx: CorrelationContext, k: int = 2) -> float:
    """sup over the context's times and all sets of size k of |φ^N|."""
    ctx.solve()
    return max(float(np.abs(ctx.phi_vector(t, k)).max()) for t in ctx.times)


# ---------------------------------------------------------------------------
# Two-time correlations

def initial_J(s: float, A, B, ctx: CorrelationContext) -> float:
    """J_N(s, A, B) = Σ_{C ⊆ A∩B} φ(s, (AΔB)∪C) Π_C (1 − 2ρ) Π_{(A∩B)∖C} ρ(1 − ρ)."""
    a = set(ctx._sites(A).tolist())
    b = set(ctx._sites(B).tolist())
    rho = ctx.rho(s)
    inter = sorted(a & b)
    sym = sorted(a ^ b)
    tot = 0.0
    for r in range(len(inter) + 1):
        for C in itertools.combinations(inter, r):
            rest = [x for x in inter if x not in C]
            w = np.prod([1 - 2 * rho[x] for x in C]) * np.prod([rho[x] * (1 - rho[x]) for x in rest])
            if w == 0:
                continue
            rows = np.array(sorted(sym + list(C)), dtype=np.int64)[None, :]
            tot += w * float(ctx.phi_rows(s, rows)[0])
    return float(tot)


def initial_J_vector(s: float, A, k: int, ctx: CorrelationContext) -> np.ndarray:
    """J_N(s, A, C) for every C in E_k (k ≥ 1)."""
    asites = ctx._sites(A)
    space = ctx.space(k)
    st = space.states.astype(np.int64)
    hit = np.isin(st, asites).any(axis=1)
    out = np.zeros(space.size)
    dis = np.flatnonzero(~hit)
    if dis.size:
        rows = np.concatenate([st[dis], np.broadcast_to(asites, (dis.size, asites.size))], axis=1)
        out[dis] = ctx.phi_rows(s, rows)
    for i in np.flatnonzero(hit):
        out[i] = initial_J(s, [tuple(p) for p in ctx.box.coords()[asites]],
                           [tuple(p) for p in ctx.box.coords()[st[i]]], ctx)
    return out


@dataclass
class TwoTimeTable:
    s: float
    A: UnlabeledConfig
    k: int
    r: np.ndarray
    R: list                      # per r, vector over E_k
    U: list
    richardson_error: float

    def value(self, i: int, ctx: CorrelationContext, B) -> tuple[float, float]:
        j = int(ctx.space(self.k).rank(ctx._sites(B)[None, :])[0])
        return float(self.R[i][j]), float(self.U[i][j])


def two_time_table(s: float, A, r_values: Sequence[float], k: int,
                   ctx: CorrelationContext) -> TwoTimeTable:
    """R_N(s, A; s + r, ·) over E_k for each r, by Duhamel from J_N."""
    if k < 1:
        raise ValueError("k must be >= 1")
    cfg = A if isinstance(A, UnlabeledConfig) else UnlabeledConfig(A)
    r_values = np.asarray(r_values, dtype=float)
    if r_values.size == 0 or r_values.min() < 0 or np.any(np.diff(r_values) <= 0):
        raise ValueError("r values must be non-negative and increasing")
    phiA = ctx.phi(s, cfg)
    init = {j: initial_J_vector(s, cfg, j, ctx) for j in range(1, k + 1)}
    levels = {j: ctx.level(j) for j in range(1, k + 1)}
    fixed = {0: np.array([phiA]), -1: np.zeros(1)}
    marcher = _Marcher(levels, 1, k, fixed, ctx.rho_prop, ctx.N2, ctx.convention)
    rate = max(lv.prop.rate for lv in levels.values())
    out_times = s + r_values
    rho_s = ctx.rho(s)
    if r_values[0] == 0:
        # initial condition reproduced exactly
        rest = out_times[1:]
        outs = []
        err = 0.0
        if rest.size:
            outs, err = _richardson(marcher, s, init, rho_s, rest, rate, ctx.rtol,
                                    ctx.max_doublings, f"two-time N={ctx.N}")
        outs = [{j: init[j].copy() for j in init}] + list(outs)
    else:
        outs, err = _richardson(marcher, s, init, rho_s, out_times, rate, ctx.rtol,
                                ctx.max_doublings, f"two-time N={ctx.N}")
    Rk = [o[k] for o in outs]
    Uk = [levels[k].prop.evolve(init[k], r) for r in r_values]
    return TwoTimeTable(s, cfg, k, r_values, Rk, Uk, err)


def solve_two_time(s: float, A, t: float, B, ctx: CorrelationContext) -> TwoTimeRecord:
    if t < s:
        raise ValueError("need t >= s")
    cfgA = A if isinstance(A, UnlabeledConfig) else UnlabeledConfig(A)
    cfgB = B if isinstance(B, UnlabeledConfig) else UnlabeledConfig(B)
    if len(cfgB) == 0:
        v = ctx.phi(s, cfgA)
        return TwoTimeRecord(s, cfgA, t, cfgB, v, v, 0.0)
    tab = two_time_table(s, cfgA, [t - s], len(cfgB), ctx)
    R, U = tab.value(0, ctx, cfgB)
    return TwoTimeRecord(s, cfgA, t, cfgB, R, U, R - U)


def two_time_bracket(r: float, N: int) -> float:
    return math.log(N) / N ** 2 + 1.0 / (1.0 + r * N * N)


# ---------------------------------------------------------------------------
# The A_N(m, t) integral

def interaction_vector(space: StateSpace, Pm: np.ndarray, convention: str = ORDERED) -> np.ndarray:
    st = space.states.astype(np.int64)
    tot = np.zeros(space.size)
    for i, j in itertools.combinations(range(space.n), 2):
        tot += Pm[st[:, i], st[:, j]]
    return tot * _pair_factor(convention)


def an_integral(A, t: float, N: int, m: int, kernel: Kernel, L: int | None = None,
                convention: str = ORDERED, rtol: float = 1e-7, max_doublings: int = 8) -> float:
    """∫_0^t ds (1+sN²)^{-m/2} Σ_B f^N_{t−s}(A,B) I(B) on a torus (default L = 2N)."""
    cfg = A if isinstance(A, UnlabeledConfig) else UnlabeledConfig(A)
    L = 2 * N if L is None else L
    box = Box(kernel.d, L, "torus")
    space = enumerate_states(box, len(cfg), False)
    prop = Uniformizer(build_unlabeled_generator(space, kernel), speed=float(N) ** 2)
    Ivec = interaction_vector(space, pair_rate_matrix(kernel, box), convention)
    idx = space.index(cfg)
    g = (lambda s: (1.0 + s * N * N) ** (-m / 2.0))

    def run(steps_per_unit):
        # the weight varies on the 1/N² scale: grade steps geometrically near s = 0
        edges = _graded_grid(t, N, steps_per_unit)
        psi = np.zeros(space.size)
        for a, b in zip(edges[:-1], edges[1:]):
            h = b - a
            sub = max(1, math.ceil(prop.rate * h / MAX_CHUNK_MEAN))
            for q in range(sub):
                s0 = a + q * h / sub
                s1 = a + (q + 1) * h / sub
                psi = prop.etd_step(psi, g(s0) * Ivec, g(s1) * Ivec, s1 - s0)
        return psi[idx]

    n = 8
    prev = run(n)
    for _ in range(max_doublings):
        n *= 2
        cur = run(n)
        if abs(cur - prev) <= rtol * max(abs(cur), 1e-300):
            return float(cur)
        prev = cur
    raise RichardsonError("A_N integral did not converge")


def _graded_grid(t: float, N: int, n: int) -> np.ndarray:
    if t == 0:
        return np.array([0.0, 0.0])
    # geometric in (1 + sN²) from 1 to 1 + tN², n points per e-fold
    top = math.log1p(t * N * N)
    k = max(2, math.ceil(n * max(top, 1.0)))
    e = np.expm1(np.linspace(0.0, top, k + 1)) / (N * N)
    e[-1] = t
    return e


# ---------------------------------------------------------------------------
# Monte Carlo counterparts

def _centered_product(eta: np.ndarray, rho: np.ndarray, sites: np.ndarray) -> float:
    return float(np.prod(eta[sites].astype(float) - rho[sites]))


def estimate_vfunction(A, t: float, ctx: CorrelationContext, replicas: int,
                       rng: RngStream) -> VFunctionRecord:
    """MC mean of Π_{x∈A}(η_t(x) − ρ^N(t,x)) over independent SSEP paths."""
    cfg = A if isinstance(A, UnlabeledConfig) else UnlabeledConfig(A)
    sites = ctx._sites(cfg)
    rho_t = ctx.rho(t)
    vals = np.empty(replicas)
    for r in range(replicas):
        gen = rng.child(r).generator()
        f0 = sample_product_measure(ctx.profile, ctx.N, ctx.box, gen)
        ft = simulate_ssep(f0, ctx.kernel, ctx.N2, t, gen)
        vals[r] = _centered_product(ft.eta, rho_t, sites)
    se = float(vals.std(ddof=1) / math.sqrt(replicas)) if replicas > 1 else float("inf")
    return VFunctionRecord(cfg, float(t), float(vals.mean()), "monte-carlo", se)


def estimate_two_time(s: float, A, t: float, B, ctx: CorrelationContext, replicas: int,
                      rng: RngStream) -> tuple[float, float]:
    """MC estimate (mean, stderr) of E[Π_A(η_s − ρ_s) Π_B(η_t − ρ_t)]."""
    a = ctx._sites(A)
    b = ctx._sites(B)
    rs, rt = ctx.rho(s), ctx.rho(t)
    vals = np.empty(replicas)
    for r in range(replicas):
        gen = rng.child(r).generator()
        f0 = sample_product_measure(ctx.profile, ctx.N, ctx.box, gen)
        fs = simulate_ssep(f0, ctx.kernel, ctx.N2, s, gen)
        ft = simulate_ssep(fs, ctx.kernel, ctx.N2, t - s, gen)
        vals[r] = _centered_product(fs.eta, rs, a) * _centered_product(ft.eta, rt, b)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(replicas))
