"""Cylinder-function calculus and Monte Carlo Boltzmann-Gibbs statistics (d = 1)."""

from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .forward import solve_density
from .lattice import Box, Kernel
from .simulate import (LocalStatistic, OccupationField, RngStream, StatisticRunner,
                       DEFAULT_EVENT_BUDGET)

log = logging.getLogger(__name__)

H_TRUNCATION = 1e-10
RICHARDSON_REL = 0.02


def _bit(eta, x: int) -> int:
    """Occupation of site x in a field, a mapping or a callable."""
    if isinstance(eta, OccupationField):
        return int(eta.eta[int(eta.box.site_index(np.array([[x]]))[0])])
    if isinstance(eta, Mapping):
        return int(eta.get(x, 0))
    if callable(eta):
        return int(eta(x))
    raise TypeError("eta must be an OccupationField, a mapping or a callable")


def psi(A: Sequence[int], alpha: float, eta) -> float:
    """Centered product ∏_{x∈A} (η(x) − α); the empty product is 1."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    out = 1.0
    for x in A:
        out *= _bit(eta, x) - alpha
    return out


# ---------------------------------------------------------------------------
# Cylinder functions
# ---------------------------------------------------------------------------

@dataclass
class CylinderFunction:
    """f(η) = table[code], where bit j of code is η(support[j])."""

    support: tuple[int, ...]
    table: np.ndarray

    def __post_init__(self):
        self.support = tuple(int(x) for x in self.support)
        if len(set(self.support)) != len(self.support):
            raise ValueError("support has repeated sites")
        self.table = np.asarray(self.table, dtype=float).reshape(-1)
        if self.table.shape != (2 ** len(self.support),):
            raise ValueError("table needs 2**|support| entries")
        for j, x in enumerate(self.support):
            codes = np.arange(self.table.size)
            if np.all(self.table[codes] == self.table[codes ^ (1 << j)]):
                raise ValueError(f"f does not depend on site {x}; support is not minimal")

    @classmethod
    def from_callable(cls, support: Sequence[int], fn: Callable) -> "CylinderFunction":
        """Tabulate ``fn(bits)`` where bits is a tuple aligned with ``support``."""
        m = len(support)
        table = [fn(tuple((c >> j) & 1 for j in range(m))) for c in range(2 ** m)]
        return cls(tuple(support), np.array(table, dtype=float))

    @property
    def size(self) -> int:
        return len(self.support)

    def code(self, eta, shift: int = 0) -> int:
        return sum(_bit(eta, x + shift) << j for j, x in enumerate(self.support))

    def __call__(self, eta, shift: int = 0) -> float:
        return float(self.table[self.code(eta, shift)])

    def mean(self, alpha):
        """f̃(α) = E_{ν_α}[f]."""
        return _coefficients(self.table, self.size, alpha)[..., 0]

    def to_json(self) -> dict:
        return {"support": list(self.support), "table": [float(v) for v in self.table]}

    @classmethod
    def from_json(cls, obj: Mapping) -> "CylinderFunction":
        return cls(tuple(obj["support"]), np.array(obj["table"], dtype=float))


def _coefficients(table: np.ndarray, m: int, alpha) -> np.ndarray:
    """𝔣(A, α) indexed by the bitmask of A; broadcasts over an array of α.

    Each site is expanded with η = (η − α) + α and 1 − η = (1 − α) − (η − α).
    """
    a = np.asarray(alpha, dtype=float)
    c = np.broadcast_to(table, a.shape + table.shape).copy()
    c = c.reshape(a.shape + (2,) * m)          # axis order: last bit first
    aa = a.reshape(a.shape + (1,) * (m - 1)) if m else a
    for j in range(m):
        ax = a.ndim + (m - 1 - j)
        lo = np.take(c, 0, axis=ax)
        hi = np.take(c, 1, axis=ax)
        const = (1.0 - aa) * lo + aa * hi
        slope = hi - lo
        c = np.stack([const, slope], axis=ax)
    return c.reshape(a.shape + (2 ** m,))


@dataclass
class CoefficientTable:
    """𝔣(A, α) for every A ⊆ support."""

    alpha: float
    support: tuple[int, ...]
    coeffs: dict[tuple[int, ...], float] = field(default_factory=dict)

    def __getitem__(self, A) -> float:
        return self.coeffs.get(tuple(sorted(A)), 0.0)

    def reconstruct(self, eta) -> float:
        return sum(v * psi(A, self.alpha, eta) for A, v in self.coeffs.items())

    def derivative_of_mean(self) -> float:
        """Σ_x 𝔣({x}, α), which equals f̃′(α)."""
        return sum(v for A, v in self.coeffs.items() if len(A) == 1)


def decompose(f: CylinderFunction, alpha: float, limit: bool = False) -> CoefficientTable:
    """Expansion f = Σ_A 𝔣(A, α) Ψ(A, α) over subsets of the support.

    At α ∈ {0, 1} the coefficients are the polynomial limits and need ``limit=True``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if alpha in (0.0, 1.0) and not limit:
        raise ValueError("alpha at an endpoint; pass limit=True to use the polynomial limit")
    c = _coefficients(f.table, f.size, alpha)
    coeffs = {}
    for mask in range(2 ** f.size):
        A = tuple(sorted(f.support[j] for j in range(f.size) if mask >> j & 1))
        coeffs[A] = float(c[mask])
    return CoefficientTable(alpha=float(alpha), support=f.support, coeffs=coeffs)


def gamma_f(f: CylinderFunction, eta, alpha: float, representation: str = "direct") -> float:
    """Γ_f(η, α) = f(η) − f̃(α) − f̃′(α)[η(0) − α].

    ``representation="expansion"`` evaluates the equivalent form
    Σ_z 𝔣({z}, α)[η(z) − η(0)] + Σ_{|A|≥2} 𝔣(A, α) Ψ(A, α).
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    tab = decompose(f, alpha)
    e0 = _bit(eta, 0)
    if representation == "direct":
        return f(eta) - tab[()] - tab.derivative_of_mean() * (e0 - alpha)
    if representation == "expansion":
        out = 0.0
        for A, v in tab.coeffs.items():
            if len(A) == 1:
                out += v * (_bit(eta, A[0]) - e0)
            elif len(A) >= 2:
                out += v * psi(A, alpha, eta)
        return out
    raise ValueError("representation must be 'direct' or 'expansion'")


def gamma_table(f: CylinderFunction, alpha, offsets: Sequence[int]) -> np.ndarray:
    """Γ_f on every code over ``offsets`` (which must contain 0 and the support).

    Returns an array of shape alpha.shape + (2**len(offsets),).
    """
    offsets = list(offsets)
    if 0 not in offsets or not set(f.support) <= set(offsets):
        raise ValueError("offsets must contain 0 and the support of f")
    a = np.asarray(alpha, dtype=float)
    c = _coefficients(f.table, f.size, a)
    mean = c[..., 0]
    deriv = sum(c[..., 1 << j] for j in range(f.size))
    codes = np.arange(2 ** len(offsets))
    fcode = np.zeros_like(codes)
    for j, x in enumerate(f.support):
        fcode |= ((codes >> offsets.index(x)) & 1) << j
    e0 = (codes >> offsets.index(0)) & 1
    return (f.table[fcode] - mean[..., None]
            - deriv[..., None] * (e0 - a[..., None]))


def gradient_table(f: CylinderFunction, alpha, offsets: Sequence[int]) -> np.ndarray:
    """Gradient part Σ_z 𝔣({z}, α)[η(z) − η(0)] on every code over ``offsets``."""
    offsets = list(offsets)
    a = np.asarray(alpha, dtype=float)
    c = _coefficients(f.table, f.size, a)
    codes = np.arange(2 ** len(offsets))
    e0 = (codes >> offsets.index(0)) & 1
    out = np.zeros(a.shape + codes.shape)
    for j, x in enumerate(f.support):
        ez = (codes >> offsets.index(x)) & 1
        out += c[..., 1 << j][..., None] * (ez - e0)
    return out


def eta_zero() -> CylinderFunction:
    return CylinderFunction((0,), np.array([0.0, 1.0]))


def eta_pair() -> CylinderFunction:
    """f = η(0)η(1)."""
    return CylinderFunction((0, 1), np.array([0.0, 0.0, 0.0, 1.0]))


# ---------------------------------------------------------------------------
# Test functions and the simulation context
# ---------------------------------------------------------------------------

@dataclass
class TestFunction:
    """H on macroscopic coordinates plus a decay declaration ('compact' or 'exponential')."""

    func: Callable
    decay: str = "exponential"
    name: str = "H"

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if self.decay not in ("compact", "exponential"):
            raise ValueError("decay must be 'compact' or 'exponential'")

    def samples(self, box: Box, N: int, shift: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Values H((x − shift)/N) on the torus sites and the mask of retained sites."""
        x = box.coords()[:, 0] - shift
        side = box.side
        x = (x + box.L) % side - box.L
        h = np.asarray(self.func(x / N), dtype=float) * np.ones(box.n_sites)
        top = np.abs(h).max(initial=0.0)
        keep = np.abs(h) >= H_TRUNCATION * top if top > 0 else np.zeros(box.n_sites, bool)
        return np.where(keep, h, 0.0), keep


def gaussian_test_function(width: float = 0.125) -> TestFunction:
    return TestFunction(lambda u: np.exp(-0.5 * (np.asarray(u) / width) ** 2), "exponential",
                        f"gauss({width})")


@dataclass
class BGContext:
    """Kernel, scaling, initial profile and torus for the Boltzmann-Gibbs statistics."""

    kernel: Kernel
    N: int
    profile: Callable
    L: int | None = None

    def __post_init__(self):
        if self.kernel.d != 1:
            raise ValueError("Boltzmann-Gibbs statistics are implemented in d = 1")
        if self.L is None:
            self.L = self.N
        self.box = Box(1, int(self.L), "torus")

    def density(self, times: Sequence[float]) -> np.ndarray:
        """ρ^N at the given increasing times, one row per time."""
        times = np.asarray(times, dtype=float)
        return solve_density(self.kernel, self.profile, self.N, self.box, times).values


def default_intervals(T: float, N: int) -> int:
    """Number of time cells: δ = T / (64 ⌈N/16⌉)."""
    return 64 * math.ceil(N / 16)


def _midpoints(T: float, m: int) -> np.ndarray:
    return (np.arange(m) + 0.5) * (T / m)


# ---------------------------------------------------------------------------
# Statistic specifications
# ---------------------------------------------------------------------------

@dataclass
class StatisticSpec:
    """A local field to integrate: either a centered product over A or a cylinder Γ_f."""

    kind: str                                  # "product" | "gamma" | "gradient"
    A: tuple[int, ...] = ()
    f: CylinderFunction | None = None
    label: str = ""

    def offsets(self) -> list[int]:
        if self.kind == "product":
            return list(self.A)
        return sorted(set(self.f.support) | {0})

    def table(self, rho: np.ndarray, h: np.ndarray, N: int, box: Box) -> np.ndarray:
        """Coefficients (intervals, sites, codes) for the midpoint densities ``rho``."""
        offs = self.offsets()
        m = len(offs)
        codes = np.arange(2 ** m)
        scale = h / math.sqrt(N)
        if self.kind == "product":
            c = box.coords()
            out = np.ones((rho.shape[0], box.n_sites, codes.size))
            for j, z in enumerate(offs):
                idx = box.site_index(c + z)
                bit = ((codes >> j) & 1).astype(float)
                out *= bit[None, None, :] - rho[:, idx][:, :, None]
        elif self.kind == "gamma":
            out = gamma_table(self.f, rho, offs)
        elif self.kind == "gradient":
            out = gradient_table(self.f, rho, offs)
        else:
            raise ValueError(f"unknown statistic kind {self.kind!r}")
        return out * scale[None, :, None]


def product_spec(A: Sequence[int]) -> StatisticSpec:
    A = tuple(sorted(int(a) for a in A))
    return StatisticSpec("product", A=A, label="A=" + ",".join(map(str, A)))


def gamma_spec(f: CylinderFunction) -> StatisticSpec:
    return StatisticSpec("gamma", f=f, label="gamma_f")


def gradient_spec(f: CylinderFunction) -> StatisticSpec:
    return StatisticSpec("gradient", f=f, label="gradient_f")


@dataclass
class BGEstimate:
    """Second-moment estimate of one time-integrated statistic.

    ``estimate`` uses the half step δ/2; ``coarse`` uses δ. Iterating yields
    ``(estimate, stderr)``.
    """

    label: str
    N: int
    T: float
    replicas: int
    estimate: float
    stderr: float
    coarse: float
    richardson_rel: float
    samples: np.ndarray = field(repr=False, default=None)

    @property
    def richardson_ok(self) -> bool:
        return self.richardson_rel <= RICHARDSON_REL

    def __iter__(self):
        return iter((self.estimate, self.stderr))


def bg_run(H: TestFunction, specs: Sequence[StatisticSpec], T: float, N: int, ctx: BGContext,
           replicas: int, rng: RngStream, intervals: int | None = None, shift: int = 0,
           max_events: int = DEFAULT_EVENT_BUDGET) -> list[BGEstimate]:
    """Integrate every spec along the same ``replicas`` paths started from ν^N.

    Replica i draws its initial field and its path from ``rng.child(i)``.
    """
    if ctx.N != N:
        raise ValueError("context built for a different N")
    if T <= 0 or replicas < 2:
        raise ValueError("need T > 0 and at least two replicas")
    box = ctx.box
    m = intervals or default_intervals(T, N)
    t_coarse, t_fine = _midpoints(T, m), _midpoints(T, 2 * m)
    grid = np.unique(np.concatenate([t_coarse, t_fine]))
    rho = ctx.density(grid)
    rc = rho[np.searchsorted(grid, t_coarse)]
    rf = rho[np.searchsorted(grid, t_fine)]
    h, keep = H.samples(box, N, shift)
    stats = []
    for sp_ in specs:
        for r in (rc, rf):
            stats.append(LocalStatistic(offsets=np.array(sp_.offsets()).reshape(-1, 1),
                                        coef=sp_.table(r, h, N, box)))
    runner = StatisticRunner(box, ctx.kernel, float(N) ** 2, T, stats, max_events)
    rho0 = ctx.density([0.0])[0]
    vals = np.empty((replicas, len(stats)))
    for i in range(replicas):
        gen = rng.child(i).generator()
        eta = (gen.random(box.n_sites) < rho0).astype(np.uint8)
        vals[i] = runner.run(eta, gen)
    out = []
    for k, sp_ in enumerate(specs):
        sq_c = vals[:, 2 * k] ** 2
        sq_f = vals[:, 2 * k + 1] ** 2
        est, coarse = float(sq_f.mean()), float(sq_c.mean())
        rel = abs(est - coarse) / abs(est) if est != 0 else abs(coarse)
        if rel > RICHARDSON_REL:
            warnings.warn(f"{sp_.label}: δ-halving changed the estimate by {rel:.2%}",
                          RuntimeWarning, stacklevel=2)
        out.append(BGEstimate(label=sp_.label, N=N, T=T, replicas=replicas, estimate=est,
                              stderr=float(sq_f.std(ddof=1) / math.sqrt(replicas)),
                              coarse=coarse, richardson_rel=float(rel),
                              samples=vals[:, 2 * k + 1].copy()))
        log.info("N=%d %s: %.6g ± %.2g", N, sp_.label, est, out[-1].stderr)
    return out


def bg_statistic(H: TestFunction, A: Sequence[int], T: float, N: int, ctx: BGContext,
                 replicas: int, rng: RngStream, **kw) -> BGEstimate:
    """E[(∫_0^T N^{-1/2} Σ_x H(x/N) ∏_{z∈A}[η_t(x+z) − ρ^N(t,x+z)] dt)²] by Monte Carlo."""
    if len(set(A)) <= 2:
        raise ValueError("the statistic needs |A| > 2")
    return bg_run(H, [product_spec(A)], T, N, ctx, replicas, rng, **kw)[0]


def bg_cylinder_statistic(H: TestFunction, f: CylinderFunction, T: float, N: int,
                          ctx: BGContext, replicas: int, rng: RngStream, **kw) -> BGEstimate:
    """Same second moment with the local field Γ_f(τ_x η_t, ρ^N(t, x))."""
    return bg_run(H, [gamma_spec(f)], T, N, ctx, replicas, rng, **kw)[0]


def gradient_remainder(H: TestFunction, f: CylinderFunction, T: float, N: int,
                       ctx: BGContext, replicas: int, rng: RngStream, **kw) -> BGEstimate:
    """Second moment of the gradient part Σ_z 𝔣({z}, ρ)[η(x+z) − η(x)]."""
    return bg_run(H, [gradient_spec(f)], T, N, ctx, replicas, rng, **kw)[0]


# ---------------------------------------------------------------------------
# Single-site diagnostic
# ---------------------------------------------------------------------------

def _heat_symbol(kernel: Kernel, side: int, N: int) -> np.ndarray:
    """Eigenvalues of N² L_1 on the torus, indexed like numpy.fft frequencies."""
    k = np.fft.fftfreq(side) * side
    lam = np.zeros(side)
    for v, w in zip(kernel.displacements, kernel.weights):
        lam += float(w) * (np.cos(2 * np.pi * k * v[0] / side) - 1.0)
    return lam * float(N) ** 2


@dataclass
class SingleSiteDiagnostic:
    estimate: BGEstimate
    covariance_term: float       # 2∫∫ N^{-1} Σ_x F(ρ(s,x)) H(x/N) (f_{t−s}H)(x/N)
    h_l1: float                  # N^{-1} Σ_x |H(x/N)|
    fitted_constant: float       # (estimate − covariance term) / h_l1², clipped at 0


def single_site_diagnostic(H: TestFunction, T: float, N: int, ctx: BGContext, replicas: int,
                           rng: RngStream, **kw) -> SingleSiteDiagnostic:
    """A = {0}: the statistic stays O(1); compare it with the covariance upper bound."""
    est = bg_run(H, [StatisticSpec("product", A=(0,), label="A=0")], T, N, ctx, replicas,
                 rng, **kw)[0]
    box = ctx.box
    m = 2 * (kw.get("intervals") or default_intervals(T, N))
    s_mid = _midpoints(T, m)
    rho = ctx.density(s_mid)
    h, _ = H.samples(box, N, kw.get("shift", 0))
    # sites are stored in coordinate order −L..L; roll so index 0 is site 0
    order = np.argsort(box.coords()[:, 0] % box.side)
    hh = np.fft.fft(h[order])
    lam = _heat_symbol(ctx.kernel, box.side, N)
    cov = 0.0
    for s, r in zip(s_mid, rho):
        tau = T - s
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.where(lam == 0, tau, np.expm1(lam * tau) / lam)
        w = np.fft.ifft(hh * g).real                 # ∫_0^tau f_r H dr, in rolled order
        F = r[order] * (1 - r[order])
        cov += np.sum(F * h[order] * w) / N * (T / m)
    cov *= 2.0
    l1 = float(np.abs(h).sum() / N)
    const = max(0.0, (est.estimate - cov) / l1 ** 2) if l1 > 0 else 0.0
    return SingleSiteDiagnostic(estimate=est, covariance_term=float(cov), h_l1=l1,
                                fitted_constant=float(const))


def shifted_sets(A: Sequence[int], shift: int) -> tuple[int, ...]:
    return tuple(a + shift for a in A)


def all_configurations(support: Sequence[int]):
    """Every {0,1} assignment on ``support`` as a dict."""
    for bits in itertools.product((0, 1), repeat=len(support)):
        yield dict(zip(support, bits))
