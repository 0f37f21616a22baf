"""Kinetic Monte Carlo for labeled stirring walkers on Z^d and for SSEP
occupation fields on tori."""

from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numba import njit
from statsmodels.stats.proportion import proportion_confint

from .lattice import Box, Kernel, LabeledConfig, UnlabeledConfig

DEFAULT_EVENT_BUDGET = 10**9


class EventBudgetExceeded(RuntimeError):
    """``partial`` holds whatever completed before the budget ran out, if anything."""

    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True)
class RngStream:
    """Philox stream keyed by ``(seed, stream)``; children get longer spawn keys."""

    seed: int
    stream: tuple[int, ...] = (0,)

    def __post_init__(self):
        s = self.stream
        object.__setattr__(self, "stream", (int(s),) if isinstance(s, (int, np.integer)) else tuple(int(v) for v in s))
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in 64 bits")

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=self.stream)
        return np.random.Generator(np.random.Philox(ss))

    def child(self, i: int) -> "RngStream":
        return RngStream(self.seed, self.stream + (int(i),))


# ---------------------------------------------------------------------------
# Labeled walkers on Z^d

@njit(cache=True)
def _labeled_run(pos, disp, cum, T, gen, max_events, log_t, log_pos):
    """Uniformized stirring: proposals at total rate n, swaps accepted with prob 1/2."""
    n, d = pos.shape
    K = disp.shape[0]
    t = 0.0
    events = 0
    rec = log_t.shape[0] > 0
    if n == 0:
        return 0
    while True:
        t += gen.standard_exponential() / n
        if t > T:
            break
        i = int(gen.random() * n)
        if i >= n:
            i = n - 1
        u = gen.random()
        k = 0
        while k < K - 1 and cum[k] <= u:
            k += 1
        j = -1
        for m in range(n):
            if m == i:
                continue
            same = True
            for c in range(d):
                if pos[m, c] != pos[i, c] + disp[k, c]:
                    same = False
                    break
            if same:
                j = m
                break
        if j < 0:
            for c in range(d):
                pos[i, c] += disp[k, c]
        else:
            # bond between two particles is proposed from both ends
            if gen.random() >= 0.5:
                continue
            for c in range(d):
                tmp = pos[i, c]
                pos[i, c] = pos[j, c]
                pos[j, c] = tmp
        if events >= max_events:
            return -1
        if rec:
            log_t[events] = t
            log_pos[events] = pos
        events += 1
    return events


@dataclass
class TrajectorySample:
    z: LabeledConfig
    T: float
    endpoint: LabeledConfig
    events: int
    times: np.ndarray | None = None           # event times, strictly increasing
    configs: np.ndarray | None = None         # (events, n, d) configuration after each event


def _kernel_arrays(kernel: Kernel):
    disp = kernel.vectors.astype(np.int64)
    cum = np.cumsum(kernel.probs)
    cum[-1] = 1.0
    return disp, cum


def simulate_labeled(kernel: Kernel, z: LabeledConfig, T: float, rng: RngStream,
                     record: bool = False, max_events: int = 10_000_000) -> TrajectorySample:
    """Exact continuous-time stirring on Z^d (no box) up to time ``T``."""
    if T < 0:
        raise ValueError("T must be non-negative")
    pos = np.array(z.points, dtype=np.int64).reshape(len(z), kernel.d)
    disp, cum = _kernel_arrays(kernel)
    if record:
        log_t = np.empty(max_events)
        log_pos = np.empty((max_events,) + pos.shape, dtype=np.int64)
    else:
        log_t = np.empty(0)
        log_pos = np.empty((0,) + pos.shape, dtype=np.int64)
    ev = _labeled_run(pos, disp, cum, float(T), rng.generator(), max_events, log_t, log_pos)
    if ev < 0:
        raise EventBudgetExceeded(f"more than {max_events} events before T={T}")
    end = LabeledConfig([tuple(int(c) for c in p) for p in pos])
    if record:
        return TrajectorySample(z, T, end, ev, log_t[:ev].copy(), log_pos[:ev].copy())
    return TrajectorySample(z, T, end, ev)


@njit(cache=True)
def _labeled_batch(z, disp, cum, T, gen, reps, max_events, out):
    log_t = np.empty(0)
    log_pos = np.empty((0, z.shape[0], z.shape[1]), dtype=np.int64)
    for r in range(reps):
        pos = z.copy()
        ev = _labeled_run(pos, disp, cum, T, gen, max_events, log_t, log_pos)
        if ev < 0:
            return -1
        out[r] = pos
    return 0


REPLICA_CHUNK = 1000


def labeled_endpoints(kernel: Kernel, z: LabeledConfig, T: float, replicas: int,
                      rng: RngStream, max_events: int = 10_000_000) -> np.ndarray:
    """Endpoints of ``replicas`` independent runs, shape (replicas, n, d).

    Replicas are grouped in fixed chunks, chunk ``c`` drawing from
    ``rng.child(c)``, so the output does not depend on how work is split.
    """
    zarr = np.array(z.points, dtype=np.int64).reshape(len(z), kernel.d)
    disp, cum = _kernel_arrays(kernel)
    out = np.empty((replicas,) + zarr.shape, dtype=np.int64)
    for c, start in enumerate(range(0, replicas, REPLICA_CHUNK)):
        stop = min(replicas, start + REPLICA_CHUNK)
        st = _labeled_batch(zarr, disp, cum, float(T), rng.child(c).generator(),
                            stop - start, max_events, out[start:stop])
        if st < 0:
            raise EventBudgetExceeded("event budget exceeded", partial=out[:start])
    return out


@dataclass
class Histogram:
    """Endpoint counts with Wilson 95% intervals."""

    counts: dict
    total: int

    def phat(self, key) -> float:
        return self.counts.get(key, 0) / self.total

    def rows(self, alpha: float = 0.05):
        keys = sorted(self.counts)
        cnt = np.array([self.counts[k] for k in keys])
        lo, hi = proportion_confint(cnt, self.total, alpha=alpha, method="wilson")
        for k, c, a, b in zip(keys, cnt, np.atleast_1d(lo), np.atleast_1d(hi)):
            yield k, int(c), float(c / self.total), float(a), float(b)

    def merge(self, other: "Histogram") -> "Histogram":
        c = Counter(self.counts)
        c.update(other.counts)
        return Histogram(dict(c), self.total + other.total)


@dataclass
class TransitionEstimate:
    labeled: Histogram
    unlabeled: Histogram


def _tabulate(ends: np.ndarray) -> TransitionEstimate:
    lab = Counter(tuple(map(tuple, e.tolist())) for e in ends)
    unl = Counter(tuple(sorted(k)) for k in lab.elements())
    return TransitionEstimate(Histogram(dict(lab), len(ends)), Histogram(dict(unl), len(ends)))


def estimate_transition(kernel: Kernel, z: LabeledConfig, T: float, replicas: int,
                        rng: RngStream, max_events: int = 10_000_000) -> TransitionEstimate:
    """Labeled and lumped endpoint histograms; on budget overrun the error carries the
    histograms of the completed chunks."""
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    try:
        ends = labeled_endpoints(kernel, z, T, replicas, rng, max_events)
    except EventBudgetExceeded as err:
        done = err.partial
        raise EventBudgetExceeded(str(err), _tabulate(done) if done is not None and len(done) else None) from None
    return _tabulate(ends)


def histogram_to_csv(hist: Histogram, path) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["state", "count", "phat", "ci_lo", "ci_hi"])
        for k, c, p, lo, hi in hist.rows():
            w.writerow([" ".join(",".join(str(v) for v in pt) for pt in k), c, repr(p), repr(lo), repr(hi)])


# ---------------------------------------------------------------------------
# SSEP occupation fields on a torus

@dataclass
class OccupationField:
    box: Box
    eta: np.ndarray                       # uint8, one entry per site

    def __post_init__(self):
        if self.box.geometry != "torus":
            raise ValueError("occupation fields live on a torus")
        self.eta = np.ascontiguousarray(self.eta, dtype=np.uint8)
        if self.eta.shape != (self.box.n_sites,):
            raise ValueError("field has the wrong number of sites")
        if self.eta.max(initial=0) > 1:
            raise ValueError("occupation values must be 0 or 1")

    @property
    def particles(self) -> int:
        return int(self.eta.sum())

    def copy(self) -> "OccupationField":
        return OccupationField(self.box, self.eta.copy())


def profile_samples(profile: Callable, N: int, box: Box) -> np.ndarray:
    u = box.coords().astype(float) / N
    vals = np.asarray(profile(u[:, 0] if box.d == 1 else u), dtype=float).reshape(-1)
    if vals.shape[0] != box.n_sites:
        vals = np.broadcast_to(vals, (box.n_sites,)).copy()
    if vals.min() < 0 or vals.max() > 1:
        raise ValueError("profile leaves [0, 1]")
    return vals


def sample_product_measure(profile: Callable, N: int, box: Box, rng: RngStream | np.random.Generator) -> OccupationField:
    rho = profile_samples(profile, N, box)
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    return OccupationField(box, (gen.random(box.n_sites) < rho).astype(np.uint8))


def _bond_tables(kernel: Kernel, box: Box):
    """Forward neighbor per half-support class and the rates of each class."""
    nbr = box.neighbor_table(kernel)
    half = kernel.half_support()
    idx = [kernel.displacements.index(v) for v, _ in half]
    fwd = np.ascontiguousarray(nbr[:, idx], dtype=np.int64)            # site -> site + z_k
    mz = [kernel.displacements.index(tuple(-c for c in v)) for v, _ in half]
    bwd = np.ascontiguousarray(nbr[:, mz], dtype=np.int64)             # site -> site - z_k
    rates = np.array([w for _, w in half], dtype=float)
    if box.side <= 2 * kernel.range:
        raise ValueError("torus too small for the kernel range")
    return fwd, bwd, rates


@njit(cache=True)
def _toggle(b, k, on, dlist, dcount, dpos):
    if on:
        if dpos[k, b] < 0:
            dpos[k, b] = dcount[k]
            dlist[k, dcount[k]] = b
            dcount[k] += 1
    else:
        p = dpos[k, b]
        if p >= 0:
            last = dlist[k, dcount[k] - 1]
            dlist[k, p] = last
            dpos[k, last] = p
            dpos[k, b] = -1
            dcount[k] -= 1


@njit(cache=True)
def _flush(x, t, cur, code, last, occ):
    occ[cur, x, code[x]] += t - last[x]
    last[x] = t


@njit(cache=True)
def _ssep_run(eta, fwd, bwd, rates, T, gen, max_events, side_idx, back_idx, occ):
    """Stirring at bond rates ``rates[k]`` up to T, ringing only discordant bonds.

    If ``occ`` has M > 0 rows, occ[i, x, c] accumulates the time spent in cell
    [iT/M, (i+1)T/M) with code c at x, where bit j of c is η(x + offset_j)
    (``side_idx[x, j]`` is the index of that site, ``back_idx[x, j]`` of x − offset_j).
    """
    S = eta.shape[0]
    K = fwd.shape[1]
    M = occ.shape[0]
    m = side_idx.shape[1]
    dlist = np.empty((K, S), dtype=np.int64)
    dpos = -np.ones((K, S), dtype=np.int64)
    dcount = np.zeros(K, dtype=np.int64)
    for k in range(K):
        for x in range(S):
            if eta[x] != eta[fwd[x, k]]:
                _toggle(x, k, True, dlist, dcount, dpos)
    code = np.zeros(S, dtype=np.int64)
    last = np.zeros(S)
    if M > 0:
        for x in range(S):
            for j in range(m):
                code[x] |= np.int64(eta[side_idx[x, j]]) << j
    cur = 0
    nxt = T / M if M > 0 else np.inf
    t = 0.0
    events = 0
    while True:
        rate = 0.0
        for k in range(K):
            rate += rates[k] * dcount[k]
        dt = gen.standard_exponential() / rate if rate > 0 else np.inf
        tn = t + dt
        while M > 0 and cur < M - 1 and nxt <= tn and nxt < T:
            for x in range(S):
                _flush(x, nxt, cur, code, last, occ)
            cur += 1
            nxt = (cur + 1) * (T / M)
        if tn > T:
            if M > 0:
                for x in range(S):
                    _flush(x, T, cur, code, last, occ)
            break
        t = tn
        # choose a discordant bond
        u = gen.random() * rate
        k = 0
        while k < K - 1 and u >= rates[k] * dcount[k]:
            u -= rates[k] * dcount[k]
            k += 1
        i = int(u / rates[k])
        if i >= dcount[k]:
            i = dcount[k] - 1
        x = dlist[k, i]
        y = fwd[x, k]
        eta[x], eta[y] = eta[y], eta[x]
        for site in (x, y):
            for kk in range(K):
                a = site
                c = fwd[site, kk]
                _toggle(a, kk, eta[a] != eta[c], dlist, dcount, dpos)
                a = bwd[site, kk]
                _toggle(a, kk, eta[a] != eta[site], dlist, dcount, dpos)
        if M > 0:
            for site in (x, y):
                for j in range(m):
                    xx = back_idx[site, j]
                    _flush(xx, t, cur, code, last, occ)
                    code[xx] ^= np.int64(1) << j
        events += 1
        if events > max_events:
            return -1
    return events


_NO_OCC = np.zeros((0, 1, 1))


def simulate_ssep(field_: OccupationField, kernel: Kernel, speed: float, T: float,
                  rng: RngStream | np.random.Generator,
                  max_events: int = DEFAULT_EVENT_BUDGET) -> OccupationField:
    """Run the stirring dynamics at bond rate ``speed·p(y−x)`` for time T; returns a new field."""
    if T < 0:
        raise ValueError("T must be non-negative")
    fwd, bwd, rates = _bond_tables(kernel, field_.box)
    eta = field_.eta.copy()
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    idx = np.zeros((len(eta), 0), dtype=np.int64)
    ev = _ssep_run(eta, fwd, bwd, rates * float(speed), float(T), gen, max_events,
                   idx, idx, _NO_OCC)
    if ev < 0:
        raise EventBudgetExceeded("event budget exceeded")
    return OccupationField(field_.box, eta)


@dataclass
class LocalStatistic:
    """Time-integrated local field Σ_x c_x(t, η(x + offsets)).

    ``coef`` has shape (intervals, sites, 2**len(offsets)); interval i covers
    [i·T/intervals, (i+1)·T/intervals) and bit j of the code is η(x + offsets[j]).
    """

    offsets: np.ndarray           # (m, d) integer displacements
    coef: np.ndarray


def _offset_tables(box: Box, offsets_list):
    """Union of the offsets with side_idx[x, j] = index of x + o_j and back_idx[x, j] of x − o_j."""
    uniq = []
    for offs in offsets_list:
        for o in map(tuple, np.asarray(offs, dtype=np.int64).reshape(-1, box.d)):
            if o not in uniq:
                uniq.append(o)
    c = box.coords()
    side = np.empty((box.n_sites, len(uniq)), dtype=np.int64)
    back = np.empty_like(side)
    for j, o in enumerate(uniq):
        side[:, j] = box.site_index(c + np.array(o))
        back[:, j] = box.site_index(c - np.array(o))
    return uniq, side, back


class StatisticRunner:
    """Integrates a fixed list of statistics along many paths.

    A path records occupation times per (time cell, site, code over the union
    of offsets); each statistic is then one contraction with its expanded table.
    """

    def __init__(self, box: Box, kernel: Kernel, speed: float, T: float,
                 stats: Sequence[LocalStatistic], max_events: int = DEFAULT_EVENT_BUDGET):
        if not stats:
            raise ValueError("no statistics given")
        if T <= 0:
            raise ValueError("T must be positive")
        self.box = box
        self.T = float(T)
        self.max_events = max_events
        S = box.n_sites
        self.fwd, self.bwd, rates = _bond_tables(kernel, box)
        self.rates = rates * float(speed)
        uniq, self.side_idx, self.back_idx = _offset_tables(box, [st.offsets for st in stats])
        if len(uniq) > 16:
            raise ValueError("too many distinct offsets")
        M = math.lcm(*[st.coef.shape[0] for st in stats])
        self.cells = M
        nc = 2 ** len(uniq)
        codes = np.arange(nc)
        self.weights = np.empty((len(stats), M * S * nc))
        for s, st in enumerate(stats):
            o = [tuple(v) for v in np.asarray(st.offsets, dtype=np.int64).reshape(-1, box.d)]
            if st.coef.shape[1:] != (S, 2 ** len(o)):
                raise ValueError("coefficient table has the wrong shape")
            proj = np.zeros(nc, dtype=np.int64)
            for j, v in enumerate(o):
                proj |= ((codes >> uniq.index(v)) & 1) << j
            cell = np.arange(M) * st.coef.shape[0] // M
            self.weights[s] = st.coef[cell][:, :, proj].reshape(-1)

    def occupation(self, eta: np.ndarray, gen: np.random.Generator) -> np.ndarray:
        """Advance ``eta`` in place to time T and return the occupation-time array."""
        occ = np.zeros((self.cells, self.box.n_sites, 2 ** self.side_idx.shape[1]))
        ev = _ssep_run(eta, self.fwd, self.bwd, self.rates, self.T, gen, self.max_events,
                       self.side_idx, self.back_idx, occ)
        if ev < 0:
            raise EventBudgetExceeded("event budget exceeded")
        return occ

    def run(self, eta: np.ndarray, gen: np.random.Generator) -> np.ndarray:
        """Advance ``eta`` in place; returns the integrals of all statistics."""
        return self.weights @ self.occupation(eta, gen).reshape(-1)


def integrate_statistics(field_: OccupationField, kernel: Kernel, speed: float, T: float,
                         stats: Sequence[LocalStatistic], rng: RngStream | np.random.Generator,
                         max_events: int = DEFAULT_EVENT_BUDGET):
    """Run one path and return ``(endpoint, integrals)`` for the given statistics."""
    runner = StatisticRunner(field_.box, kernel, speed, T, stats, max_events)
    eta = field_.eta.copy()
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    acc = runner.run(eta, gen)
    return OccupationField(field_.box, eta), acc


def field_hash(f: OccupationField) -> str:
    return hashlib.sha256(f.eta.tobytes()).hexdigest()
