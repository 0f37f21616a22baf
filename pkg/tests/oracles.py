"""Independent reference computations used by the tests."""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.linalg import expm


def bessel_iv_series(nu: int, x: float, terms: int = 400) -> float:
    """Modified Bessel I_nu(x) for integer nu from its power series (log-space terms)."""
    nu = abs(int(nu))
    total = 0.0
    lx = math.log(x / 2.0) if x > 0 else -math.inf
    for k in range(terms):
        lt = (2 * k + nu) * lx - math.lgamma(k + 1) - math.lgamma(k + nu + 1)
        total += math.exp(lt)
    return total


def heat_kernel_1d(x: int, t: float) -> float:
    """e^{-t} I_x(t): transition probability of the rate-1 nearest-neighbor walk."""
    if t == 0:
        return 1.0 if x == 0 else 0.0
    nu = abs(int(x))
    lx = math.log(t / 2.0)
    return sum(math.exp((2 * k + nu) * lx - math.lgamma(k + 1) - math.lgamma(k + nu + 1) - t)
               for k in range(400))


class FullSSEP:
    """SSEP on a torus of M sites with the full 2^M-state generator (tiny M only)."""

    def __init__(self, M: int, pairs: dict, speed: float):
        # pairs: {(a, b): rate} over unordered site pairs a < b
        self.M = M
        n = 2 ** M
        self.bits = ((np.arange(n)[:, None] >> np.arange(M)) & 1).astype(float)
        Q = np.zeros((n, n))
        for (a, b), r in pairs.items():
            for s in range(n):
                if self.bits[s, a] != self.bits[s, b]:
                    t = s ^ (1 << a) ^ (1 << b)
                    Q[s, t] += speed * r
        Q -= np.diag(Q.sum(axis=1))
        self.Q = Q

    def product(self, rho) -> np.ndarray:
        rho = np.asarray(rho, float)
        return np.prod(np.where(self.bits == 1, rho, 1 - rho), axis=1)

    def evolve(self, mu, t):
        return mu @ expm(self.Q * t)

    def mean(self, mu):
        return mu @ self.bits

    def centered(self, mu, A, rho):
        return float(mu @ np.prod(self.bits[:, list(A)] - rho[list(A)], axis=1))

    def two_time(self, mu0, s, A, t, B):
        mus = self.evolve(mu0, s)
        rs = self.mean(mus)
        w = mus * np.prod(self.bits[:, list(A)] - rs[list(A)], axis=1)
        wt = self.evolve(w, t - s)
        rt = self.mean(self.evolve(mus, t - s))
        return float(wt @ np.prod(self.bits[:, list(B)] - rt[list(B)], axis=1))
