"""Forward equations solved by uniformization.

``e^{tQ}`` is written as a Poisson mixture of powers of ``P = I + Q/Λ`` with
``Λ = max |Q_ii|``.  The same machinery provides the exponential-trapezoid
step used by the correlation hierarchy (source term interpolated linearly in
time, propagator applied exactly).
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numba
import numpy as np
import scipy.sparse as sp
from scipy import stats

from .generator import SparseOperator, build_generator
from .lattice import Box, Kernel, LabeledConfig, StateSpace, UnlabeledConfig, enumerate_states

log = logging.getLogger(__name__)

TAIL_TOL = 1e-12
MAX_CHUNK_MEAN = 64.0
DEFAULT_STEP_BUDGET = 5_000_000


class UniformizationError(RuntimeError):
    pass


def poisson_cutoff(mu: float, tol: float = TAIL_TOL) -> int:
    """Smallest K with P(Poisson(mu) > K) < tol."""
    if mu <= 0:
        return 0
    k = int(stats.poisson.isf(tol, mu))
    while stats.poisson.sf(k, mu) >= tol:
        k += 1
    return k


def _weights(mu: float, tol: float):
    K = poisson_cutoff(mu, tol)
    k = np.arange(K + 1)
    return stats.poisson.pmf(k, mu), K


@numba.njit(cache=True)
def _etd_fused(indptr, indices, data, v, g0, dg, w, a, b):
    m = v.shape[0]
    c0 = v.copy()
    c1 = g0.copy()
    c2 = dg.copy()
    n0 = np.empty(m)
    n1 = np.empty(m)
    n2 = np.empty(m)
    acc = w[0] * c0 + a[0] * c1 + b[0] * c2
    for j in range(1, w.shape[0]):
        wj, aj, bj = w[j], a[j], b[j]
        for r in range(m):
            s0 = 0.0
            s1 = 0.0
            s2 = 0.0
            for p in range(indptr[r], indptr[r + 1]):
                c = indices[p]
                x = data[p]
                s0 += x * c0[c]
                s1 += x * c1[c]
                s2 += x * c2[c]
            n0[r] = s0
            n1[r] = s1
            n2[r] = s2
            acc[r] += wj * s0 + aj * s1 + bj * s2
        c0, n0 = n0, c0
        c1, n1 = n1, c1
        c2, n2 = n2, c2
    return acc


class Uniformizer:
    """Applies ``exp(t * speed * Q)`` (or its transpose) to vectors or blocks."""

    def __init__(self, op: SparseOperator | sp.spmatrix, speed: float = 1.0,
                 transpose: bool = False, tol: float = TAIL_TOL,
                 step_budget: int = DEFAULT_STEP_BUDGET):
        mat = op.matrix if isinstance(op, SparseOperator) else sp.csr_matrix(op)
        if transpose:
            mat = mat.T
        mat = sp.csr_matrix(mat, dtype=float) * float(speed)
        self.rate = float(np.abs(mat.diagonal()).max(initial=0.0))
        self.dim = mat.shape[0]
        self.tol = tol
        self.step_budget = step_budget
        if self.rate > 0:
            self.P = (sp.identity(self.dim, format="csr") + mat / self.rate).tocsr()
            self.P.sort_indices()
        else:
            self.P = sp.identity(self.dim, format="csr")
        self.matvecs = 0

    def _chunks(self, dt: float) -> list[float]:
        if dt < 0:
            raise ValueError("negative time step")
        if dt == 0 or self.rate == 0:
            return []
        total = self.rate * dt
        if total > self.step_budget:
            raise UniformizationError(
                f"Poisson mean {total:.3g} exceeds step budget {self.step_budget}")
        k = max(1, math.ceil(total / MAX_CHUNK_MEAN))
        return [dt / k] * k

    def evolve(self, v, dt: float) -> np.ndarray:
        """``exp(dt Q) v`` for a vector or an (m, c) block; linear, no normalization."""
        out = np.array(v, dtype=float, copy=True)
        for h in self._chunks(dt):
            w, K = _weights(self.rate * h, self.tol)
            acc = w[0] * out
            cur = out
            for k in range(1, K + 1):
                cur = self.P @ cur
                acc += w[k] * cur
            self.matvecs += K
            out = acc
        return out

    def etd_step(self, v, g0, g1, dt: float) -> np.ndarray:
        """One exponential-trapezoid step of ``u' = Q u + g(t)``.

        Returns ``e^{dt Q} v + ∫_0^dt e^{(dt-u)Q} [g0 + (u/dt)(g1-g0)] du``.
        """
        if dt == 0:
            return np.array(v, dtype=float, copy=True)
        if self.rate == 0:
            return v + dt * 0.5 * (g0 + g1)
        if self.rate * dt > MAX_CHUNK_MEAN * 1.0000001:
            raise ValueError("etd_step called with a step longer than one checkpoint")
        lam = self.rate
        mu = lam * dt
        K = poisson_cutoff(mu, self.tol) + 1
        k = np.arange(K + 1)
        w = stats.poisson.pmf(k, mu)
        sf1 = stats.poisson.sf(k, mu)          # P(X >= k+1)
        sf2 = stats.poisson.sf(k + 1, mu)      # P(X >= k+2)
        a = sf1 / lam
        b = a - (k + 1) * sf2 / (lam * mu)
        dg = g1 - g0
        if np.ndim(v) == 1:
            self.matvecs += K
            return _etd_fused(self.P.indptr, self.P.indices, self.P.data,
                              np.ascontiguousarray(v, dtype=float),
                              np.ascontiguousarray(g0, dtype=float),
                              np.ascontiguousarray(dg, dtype=float), w, a, b)
        block = np.stack([np.asarray(v, float), np.asarray(g0, float), dg], axis=-1)
        acc = w[0] * block[..., 0] + a[0] * block[..., 1] + b[0] * block[..., 2]
        cur = block
        for j in range(1, K + 1):
            cur = self.P @ cur
            acc += w[j] * cur[..., 0] + a[j] * cur[..., 1] + b[j] * cur[..., 2]
        self.matvecs += K
        return acc


def checkpointed_evolve(op: SparseOperator, vector, dt: float, speed: float = 1.0,
                        uniformizer: Uniformizer | None = None) -> np.ndarray:
    """Apply ``e^{dt·speed·op}`` to an arbitrary (possibly signed) vector."""
    v = np.asarray(vector, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    u = uniformizer or Uniformizer(op, speed=speed)
    out = u.evolve(v, dt)
    n0 = np.linalg.norm(v)
    n1 = np.linalg.norm(out)
    sym = op.symmetric if isinstance(op, SparseOperator) else False
    if sym and n1 > n0 * (1 + 1e-9) + 1e-300:
        raise UniformizationError(f"L2 norm grew from {n0} to {n1}")
    return out


@dataclass(eq=False)
class DistributionSeries:
    space: StateSpace
    times: np.ndarray
    values: np.ndarray                 # (K, m)
    boundary_mass: np.ndarray          # (K,)
    margin: int = 0

    def at(self, t: float) -> np.ndarray:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-12 * max(1.0, abs(t)):
            raise KeyError(f"time {t} not on the grid")
        return self.values[i]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "state", "value"])
            for t, row in zip(self.times, self.values):
                for i in np.flatnonzero(row):
                    w.writerow([repr(float(t)), int(i), repr(float(row[i]))])

    def to_binary(self, path) -> None:
        write_binary(path, KIND_SERIES, self.times, self.values)


def boundary_states(space: StateSpace, margin: int) -> np.ndarray:
    """Mask of states with a particle within ``margin`` of an open box edge."""
    if space.box.geometry == "torus" or margin <= 0:
        return np.zeros(space.size, dtype=bool)
    c = space.coords()
    return (np.abs(c) > space.box.L - margin).any(axis=(1, 2))


def solve_forward(op: SparseOperator, initial: int, times: Sequence[float],
                  margin: int | None = None, speed: float = 1.0,
                  step_budget: int = DEFAULT_STEP_BUDGET) -> DistributionSeries:
    """Transition probabilities ``f_t(·)`` from ``initial`` at each grid time."""
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) == 0:
        raise ValueError("need a non-empty 1-d time grid")
    if times[0] < 0 or np.any(np.diff(times) <= 0):
        raise ValueError("times must be non-negative and increasing")
    space = op.space
    u = Uniformizer(op, speed=speed, transpose=True, step_budget=step_budget)
    if u.rate * (times[-1]) > step_budget:
        raise UniformizationError("horizon exceeds step budget")
    if margin is None:
        margin = 2 * _space_range(op)
    mask = boundary_states(space, margin)
    f = np.zeros(space.size)
    f[initial] = 1.0
    out = np.empty((len(times), space.size))
    bm = np.empty(len(times))
    t_prev = 0.0
    for i, t in enumerate(times):
        f = u.evolve(f, t - t_prev)
        np.clip(f, 0.0, None, out=f)
        t_prev = t
        out[i] = f
        bm[i] = f[mask].sum()
    return DistributionSeries(space=space, times=times, values=out, boundary_mass=bm, margin=margin)


def _space_range(op: SparseOperator) -> int:
    kernel = getattr(op, "kernel", None)
    return kernel.range if kernel is not None else 1


def auto_box_halfwidth(kernel: Kernel, points, T: float) -> int:
    pts = np.asarray(points, dtype=np.int64).reshape(-1, kernel.d)
    far = int(np.abs(pts).max(initial=0))
    return int(math.ceil(far + kernel.range * (T + 6 * math.sqrt(T)) + 5))


def solve_forward_infinite(kernel: Kernel, z, times: Sequence[float],
                           labeled: bool | None = None, boundary_tol: float = 1e-6,
                           max_tries: int = 6, margin: int | None = None):
    """Solve on a box large enough that the boundary mass stays below ``boundary_tol``.

    Returns ``(series, op)``.  The box is enlarged by 50% until the diagnostic passes.
    """
    if labeled is None:
        labeled = isinstance(z, LabeledConfig)
    if isinstance(z, (LabeledConfig, UnlabeledConfig)):
        pts = list(z.points)
    else:
        pts = [tuple(np.atleast_1d(p)) for p in z]
        z = LabeledConfig(pts) if labeled else UnlabeledConfig(pts)
    n = len(pts)
    L = auto_box_halfwidth(kernel, pts, float(np.max(times)))
    for _ in range(max_tries):
        box = Box(kernel.d, L, "open")
        space = enumerate_states(box, n, labeled)
        op = build_generator(space, kernel)
        op.kernel = kernel
        series = solve_forward(op, space.index(z), times, margin=margin)
        if series.boundary_mass.max() < boundary_tol:
            return series, op
        log.info("boundary mass %.3g at L=%d, enlarging", series.boundary_mass.max(), L)
        L = int(math.ceil(1.5 * L))
    raise UniformizationError("boundary mass did not fall below tolerance")


@dataclass(eq=False)
class DensityTable:
    N: int
    box: Box
    times: np.ndarray
    values: np.ndarray        # (K, n_sites)

    @property
    def sites(self) -> np.ndarray:
        return self.box.coords()

    def at(self, t: float) -> np.ndarray:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-12 * max(1.0, abs(t)):
            raise KeyError(f"time {t} not on the grid")
        return self.values[i]

    def to_csv(self, path) -> None:
        xs = self.box.coords()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "site", "value"])
            for t, row in zip(self.times, self.values):
                for x, v in zip(xs, row):
                    w.writerow([repr(float(t)), " ".join(str(int(c)) for c in x), repr(float(v))])

    def to_binary(self, path) -> None:
        write_binary(path, KIND_DENSITY, self.times, self.values)


def sample_profile(profile: Callable, N: int, box: Box) -> np.ndarray:
    u = box.coords().astype(float) / N
    vals = np.asarray(profile(u[:, 0] if box.d == 1 else u), dtype=float).reshape(-1)
    if vals.shape[0] != box.n_sites:
        raise ValueError("profile returned the wrong number of samples")
    if vals.min() < 0 or vals.max() > 1:
        raise ValueError("profile samples leave [0, 1]")
    return vals


def density_operator(kernel: Kernel, box: Box) -> SparseOperator:
    space = enumerate_states(box, 1, labeled=False)
    return build_generator(space, kernel)


def solve_density(kernel: Kernel, profile: Callable, N: int, box: Box,
                  times: Sequence[float]) -> DensityTable:
    """``rho^N(t, x)`` for the N²-speeded single-particle heat equation on a torus."""
    if box.geometry != "torus":
        raise ValueError("solve_density works on a torus")
    times = np.asarray(times, dtype=float)
    if times[0] < 0 or np.any(np.diff(times) <= 0):
        raise ValueError("times must be non-negative and increasing")
    rho = sample_profile(profile, N, box)
    u = Uniformizer(density_operator(kernel, box), speed=float(N) ** 2)
    out = np.empty((len(times), box.n_sites))
    t_prev = 0.0
    for i, t in enumerate(times):
        rho = u.evolve(rho, t - t_prev)
        t_prev = t
        out[i] = rho
    return DensityTable(N=N, box=box, times=times, values=out)


# Binary dump: 8-byte magic, then little-endian uint32 version, uint32 kind,
# uint64 rows, uint64 cols, rows doubles (time grid), rows*cols doubles (row-major).
MAGIC = b"SSEPLAB\x00"
VERSION = 1
KIND_SERIES = 1
KIND_DENSITY = 2
_HEADER = struct.Struct("<8sIIQQ")


def write_binary(path, kind: int, times, values) -> None:
    times = np.ascontiguousarray(times, dtype="<f8")
    values = np.ascontiguousarray(values, dtype="<f8")
    rows, cols = values.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, kind, rows, cols))
        fh.write(times.tobytes())
        fh.write(values.tobytes())


def read_binary(path):
    """Return ``(kind, times, values)`` from a dump written by :func:`write_binary`."""
    with open(path, "rb") as fh:
        magic, version, kind, rows, cols = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != MAGIC:
            raise ValueError("not an ssep_lab binary dump")
        if version != VERSION:
            raise ValueError(f"unsupported dump version {version}")
        times = np.frombuffer(fh.read(8 * rows), dtype="<f8")
        values = np.frombuffer(fh.read(8 * rows * cols), dtype="<f8").reshape(rows, cols)
    return kind, times.copy(), values.copy()
