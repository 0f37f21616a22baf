"""Gaussian heat-kernel bounds: the Legendre transform Φ, the rate R(θ),
bound evaluation, regime classification, the two scalar integrals of the
Davies argument, and empirical tail fits."""

from __future__ import annotations

import itertools
import math
import threading
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from .lattice import Kernel, LabeledConfig, UnlabeledConfig

PHI_TOL = 1e-10


def _stationary(w: float) -> float:
    return 2.0 * w * math.cosh(w) + w * w * math.sinh(w)


def _stationary_prime(w: float) -> float:
    return 2.0 * math.cosh(w) + 4.0 * w * math.sinh(w) + w * w * math.cosh(w)


def legendre_argmax(u: float) -> float:
    """The maximizer ``w*`` of ``u w - w² cosh w`` (``u >= 0``)."""
    u = abs(float(u))
    if u == 0.0:
        return 0.0
    lo, hi = 0.0, 1.0
    while _stationary(hi) < u:
        lo, hi = hi, 2.0 * hi
    w = min(max(u / 2.0, lo), hi) if u < 1 else 0.5 * (lo + hi)
    for _ in range(200):
        h = _stationary(w) - u
        if h > 0:
            hi = w
        else:
            lo = w
        step = h / _stationary_prime(w)
        nxt = w - step
        if not (lo < nxt < hi):
            nxt = 0.5 * (lo + hi)
        if abs(nxt - w) <= 1e-15 * max(1.0, w):
            w = nxt
            break
        w = nxt
    return w


def legendre_phi(u: float) -> float:
    """Φ(u) = sup_w { u w − w² cosh w }, even in ``u``."""
    u = abs(float(u))
    w = legendre_argmax(u)
    return u * w - w * w * math.cosh(w)


class PhiEvaluator:
    """Memoized Φ with monotone cubic interpolation on a table.

    Queries inside the table use PCHIP on (u, Φ(u)); anything beyond falls
    back to the direct solver.
    """

    def __init__(self, u_max: float = 1000.0, points: int = 4001):
        self.u_max = float(u_max)
        # denser near the origin where Φ is quadratic
        grid = np.unique(np.concatenate([
            np.linspace(0.0, 1.0, points // 4),
            np.geomspace(1.0, self.u_max, points - points // 4),
        ]))
        self.u = grid
        self.w = np.array([legendre_argmax(x) for x in grid])
        self.phi = self.u * self.w - self.w ** 2 * np.cosh(self.w)
        self._interp = PchipInterpolator(self.u, self.phi)
        self._lock = threading.Lock()
        self._memo: dict[float, float] = {}

    def __call__(self, u):
        arr = np.abs(np.asarray(u, dtype=float))
        out = np.empty_like(arr)
        inside = arr <= self.u_max
        out[inside] = self._interp(arr[inside])
        for idx in zip(*np.nonzero(~inside)):
            out[idx] = self.exact(float(arr[idx]))
        return out if out.ndim else float(out)

    def exact(self, u: float) -> float:
        u = abs(float(u))
        with self._lock:
            hit = self._memo.get(u)
        if hit is None:
            hit = legendre_phi(u)
            with self._lock:
                self._memo[u] = hit
        return hit

    def table(self):
        return self.u.copy(), self.phi.copy(), self.w.copy()


_DEFAULT_PHI: PhiEvaluator | None = None


def default_phi() -> PhiEvaluator:
    global _DEFAULT_PHI
    if _DEFAULT_PHI is None:
        _DEFAULT_PHI = PhiEvaluator()
    return _DEFAULT_PHI


def rate_R(theta, a0: float) -> float:
    """R(θ) = a0 Σ_{i,j} (cosh(a0 θ_ij) − 1)."""
    th = np.asarray(theta, dtype=float)
    return float(a0 * np.sum(np.cosh(a0 * th) - 1.0))


def M_const(r: float) -> float:
    """sup_{|w|<=r} (cosh w − 1)/w²; the ratio increases in |w| so the sup sits at r."""
    r = abs(float(r))
    if r < 1e-4:
        return 0.5 + r * r / 24.0
    return (math.cosh(r) - 1.0) / (r * r)


@dataclass(frozen=True)
class BoundParams:
    C2: float
    a0: float = 1.0
    n: int = 1
    d: int = 1
    a1: float | None = None
    gamma: float | None = None

    def __post_init__(self):
        for name in ("C2", "a0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.n < 1 or self.d < 1:
            raise ValueError("n and d must be positive")
        if self.a1 is not None:
            if self.gamma is None:
                raise ValueError("a1 requires an accompanying gamma")
            if not (self.a1 > 0 and self.gamma > 0):
                raise ValueError("a1 and gamma must be positive")


def _points(c) -> np.ndarray:
    if isinstance(c, (LabeledConfig, UnlabeledConfig)):
        return np.array(c.points, dtype=float)
    arr = np.asarray(c, dtype=float)
    return arr.reshape(arr.shape[0], -1) if arr.ndim >= 1 else arr.reshape(1, 1)


def config_distance(x, z) -> float:
    """Euclidean norm of x − z in (R^d)^n (labels matched in order)."""
    return float(np.linalg.norm(_points(x) - _points(z)))


def permutation_distances(x, z) -> np.ndarray:
    """‖x_σ − z‖ for every permutation σ of the points of ``x``."""
    xp, zp = _points(x), _points(z)
    n = xp.shape[0]
    return np.array([np.linalg.norm(xp[list(s)] - zp) for s in itertools.permutations(range(n))])


def _exponent(dist, T: float, a0: float, phi=None) -> np.ndarray:
    phi = phi or default_phi()
    lt = math.log(T)
    u = np.asarray(dist, dtype=float) * lt / (a0 * a0 * T)
    return -(a0 * T / (2.0 * lt * lt)) * np.asarray(phi(u))


def bound_value(x, z, T: float, params: BoundParams, phi=None) -> float:
    """Right-hand side of the labeled Gaussian bound.

    Unlabeled configurations are handled by summing the labeled expression
    over all permutations of the points of ``x``.
    """
    if T <= params.C2:
        raise ValueError(f"bound needs T > C2 (T={T}, C2={params.C2})")
    pref = params.C2 / (1.0 + T) ** (params.n * params.d / 2.0)
    if isinstance(x, UnlabeledConfig):
        dists = permutation_distances(x, z)
    else:
        dists = np.array([config_distance(x, z)])
    return float(pref * np.exp(_exponent(dists, T, params.a0, phi)).sum())


def bound_value_split(x, z, T: float, params: BoundParams, phi=None) -> float:
    """Weaker product form using (1/n) Σ_i Φ(‖x_i − z_i‖ log T / a0² T)."""
    if T <= params.C2:
        raise ValueError(f"bound needs T > C2 (T={T}, C2={params.C2})")
    xp, zp = _points(x), _points(z)
    n = xp.shape[0]
    perms = itertools.permutations(range(n)) if isinstance(x, UnlabeledConfig) else [tuple(range(n))]
    pref = params.C2 / (1.0 + T) ** (params.n * params.d / 2.0)
    total = 0.0
    for s in perms:
        di = np.linalg.norm(xp[list(s)] - zp, axis=1)
        total += math.exp(float(np.mean(_exponent(di, T, params.a0, phi))))
    return pref * total


def regime_classify(x, z, T: float, gamma: float) -> str:
    """'gaussian' when the displacement is at most γ T / log T, else 'poissonian'.

    For unlabeled sets every matching σ must satisfy the threshold.
    """
    if T <= math.e:
        raise ValueError("regime classification needs T > e")
    if isinstance(x, UnlabeledConfig):
        dist = float(permutation_distances(x, z).max())
    else:
        dist = config_distance(x, z)
    return "gaussian" if dist <= gamma * T / math.log(T) else "poissonian"


def gaussian_threshold(T: float, gamma: float) -> float:
    return gamma * T / math.log(T)


# ---------------------------------------------------------------------------
# Davies integrals for g(s) = s^{-α}

class ConvergenceWarning(RuntimeWarning):
    pass


def _tanh_sinh_unit(f, level: int) -> float:
    """Tanh-sinh rule on (0, 1) with step 2^-level.

    ``f(x, 1-x)`` receives both the node and its complement so integrands can
    stay accurate next to either endpoint.
    """
    h = 2.0 ** (-level)
    tmax = 4.0
    ts = np.arange(-tmax, tmax + h / 2, h)
    s = 0.5 * math.pi * np.sinh(ts)
    x = 1.0 / (1.0 + np.exp(-2.0 * s))
    xc = 1.0 / (1.0 + np.exp(2.0 * s))
    w = 0.5 * math.pi * np.cosh(ts) / np.cosh(s) ** 2 * 0.5
    keep = (x > 0) & (xc > 0) & (w > 0)
    vals = f(x[keep], xc[keep])
    return float(h * np.sum(w[keep] * vals))


def _i1_integrand(alpha: float):
    # s = v^{1/α} turns (−g'/g²) ds into dv, leaving only log endpoint singularities:
    # log[(g−1)/(−g')] = (1/α) log v + log(1 − v) − log α
    def f(v, vc):
        with np.errstate(divide="ignore", invalid="ignore"):
            logv = np.where(v < 0.5, np.log(v), np.log1p(-vc))
            logvc = np.where(vc < 0.5, np.log(vc), np.log1p(-v))
        return logv / alpha + logvc - math.log(alpha)
    return f


def _i2_integrand(alpha: float):
    beta = 1.0 / (1.0 - 2.0 * alpha)

    def f(v, vc):
        # s^{-2α} ds with s = v^β collapses to β dv
        return np.full_like(v, beta)
    return f


def davies_integrals(alpha: float, mesh: int = 6, rtol: float = 1e-6):
    """Return ``(I1, I2)`` for g(s) = s^{-α}.

    I1 = ∫_0^1 (−g'/g²) log((g−1)/(−g')) ds and I2 = ∫_0^1 g² ds.  I2 uses
    the substitution s = v^{1/(1−2α)}, I1 uses s = v^{1/α}; both are then
    integrated by tanh-sinh quadrature at step 2^-mesh.
    A ``ConvergenceWarning`` is issued when the rule at step 2^-(mesh+1)
    disagrees by more than ``rtol``.
    """
    if not (0.0 < alpha < 0.5):
        raise ValueError("alpha must lie in (0, 1/2)")
    if mesh < 1:
        raise ValueError("mesh must be >= 1")
    f1, f2 = _i1_integrand(alpha), _i2_integrand(alpha)
    i1 = _tanh_sinh_unit(f1, mesh)
    i1b = _tanh_sinh_unit(f1, mesh + 1)
    i2 = _tanh_sinh_unit(f2, mesh)
    i2b = _tanh_sinh_unit(f2, mesh + 1)
    for a, b in ((i1, i1b), (i2, i2b)):
        if abs(a - b) > rtol * max(abs(b), 1e-300):
            import warnings
            warnings.warn(f"Davies integral not converged: {a!r} vs {b!r}", ConvergenceWarning)
    return i1b, i2b


# ---------------------------------------------------------------------------
# Tail fitting

@dataclass(frozen=True)
class TailFit:
    T: float
    a1_hat: float
    c_hat: float
    residual: float
    n_states: int

    @property
    def slope(self) -> float:
        return 1.0 / self.a1_hat

    @property
    def C2_hat(self) -> float:
        """Smallest prefactor making the fitted Gaussian dominate every fitted state."""
        return math.exp(-self.c_hat + self.residual)


def fit_gaussian_tail(X, y, T: float = float("nan"), min_states: int = 10) -> TailFit:
    """Least squares ``y ≈ c + X / a1``; residual is ``max(fit − y)``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.size < min_states:
        raise ValueError(f"need at least {min_states} usable states, got {X.size}")
    if np.ptp(X) == 0:
        raise ValueError("all usable states sit at the same distance")
    slope, c = np.polyfit(X, y, 1)
    if slope <= 0:
        raise ValueError("fitted slope is not positive")
    resid = float(np.max(c + slope * X - y))
    return TailFit(T=T, a1_hat=1.0 / slope, c_hat=float(c), residual=max(resid, 0.0),
                   n_states=int(X.size))


def state_distances(space, z) -> np.ndarray:
    """Distance of each state of ``space`` to ``z``; minimized over σ for unlabeled spaces."""
    c = space.coords().astype(float)              # (m, n, d)
    zp = _points(z)
    if space.labeled:
        return np.linalg.norm((c - zp[None]).reshape(len(c), -1), axis=1)
    best = None
    for s in itertools.permutations(range(space.n)):
        dist = np.linalg.norm((c[:, list(s)] - zp[None]).reshape(len(c), -1), axis=1)
        best = dist if best is None else np.minimum(best, dist)
    return best


def gaussian_mask(space, z, T: float, gamma: float) -> np.ndarray:
    """States in the Gaussian regime: every matching within γ T / log T."""
    c = space.coords().astype(float)
    zp = _points(z)
    thr = gaussian_threshold(T, gamma)
    perms = [tuple(range(space.n))] if space.labeled else itertools.permutations(range(space.n))
    ok = np.ones(len(c), dtype=bool)
    for s in perms:
        ok &= np.linalg.norm((c[:, list(s)] - zp[None]).reshape(len(c), -1), axis=1) <= thr
    return ok


def tail_fit(series, z, T: float, gamma: float = 2.0, floor: float = 1e-14,
             boundary_tol: float = 1e-6) -> TailFit:
    """Fit −log[f_T(x)(1+T)^{nd/2}] against ‖x−z‖²/T over Gaussian-regime states."""
    if T <= math.e:
        raise ValueError("tail fits need T > e")
    i = int(np.argmin(np.abs(series.times - T)))
    if series.boundary_mass[i] >= boundary_tol:
        raise ValueError("boundary mass too large for a tail fit")
    f = series.values[i]
    space = series.space
    nd = space.n * space.box.d
    dist = state_distances(space, z)
    use = gaussian_mask(space, z, T, gamma) & (f > floor)
    X = dist[use] ** 2 / T
    y = -np.log(f[use] * (1.0 + T) ** (nd / 2.0))
    return fit_gaussian_tail(X, y, T=T)


def fitted_gaussian_bound(space, z, T: float, fit: TailFit) -> np.ndarray:
    """The Gaussian-regime bound (sum over σ) evaluated with fitted constants."""
    c = space.coords().astype(float)
    zp = _points(z)
    nd = space.n * space.box.d
    perms = [tuple(range(space.n))] if space.labeled else list(itertools.permutations(range(space.n)))
    tot = np.zeros(len(c))
    for s in perms:
        d2 = np.sum((c[:, list(s)] - zp[None]) ** 2, axis=(1, 2))
        tot += np.exp(-d2 / (fit.a1_hat * T))
    return fit.C2_hat / (1.0 + T) ** (nd / 2.0) * tot


# ---------------------------------------------------------------------------
# Action of the generator on exponentials

def exponential_action(kernel: Kernel, x, theta):
    """For ψ_θ(x) = exp(θ·x) return ``((Lψ)(x)/ψ(x), Σ_{x,y} p(y−x)(ψ(σx)/ψ(x) − 1)²)``.

    The second sum runs over ordered pairs of sites; for a fixed labeled
    configuration only pairs touching a particle contribute.
    """
    xp = _points(x).astype(np.int64)
    th = np.asarray(theta, dtype=float).reshape(xp.shape)
    n = xp.shape[0]
    occ = {tuple(p): i for i, p in enumerate(xp)}
    gen = 0.0
    sq = 0.0
    for i in range(n):
        for z, w in zip(kernel.displacements, kernel.probs):
            tgt = tuple(xp[i] + np.array(z))
            j = occ.get(tgt)
            if j is None:
                r = math.exp(float(th[i] @ np.array(z))) - 1.0
                gen += w * r                       # bond counted once
                sq += 2.0 * w * r * r              # ordered pairs (x, y) and (y, x)
            elif j > i:
                zz = np.array(z)
                r = math.exp(float((th[i] - th[j]) @ zz)) - 1.0
                gen += w * r
                sq += 2.0 * w * r * r
    return gen, sq


def minimal_a0(kernel: Kernel, configs, thetas, hi: float = 64.0) -> float:
    """Smallest a0 (to 1e-6 relative) for which both exponential-action bounds hold on the samples."""

    def ok(a0):
        for x in configs:
            for th in thetas:
                g, s = exponential_action(kernel, x, th)
                r = rate_R(th, a0)
                if g > r + 1e-12 or s > r + 1e-12:
                    return False
        return True

    if not ok(hi):
        raise ValueError("no a0 below the search cap satisfies the bounds")
    lo = 0.0
    while hi - lo > 1e-6 * hi:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi
