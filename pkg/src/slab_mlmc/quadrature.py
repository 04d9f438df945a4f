"""Gauss-Legendre rules on [0, 1] and the mirrored "double Gauss" angular rule."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

_NEWTON_TOL = 1e-15
_NEWTON_MAXITER = 100


@dataclass(frozen=True)
class HalfRule:
    order: int
    nodes: np.ndarray
    weights: np.ndarray

    def integrate(self, values):
        return float(np.dot(self.weights, values))


@dataclass(frozen=True)
class QuadratureRule:
    """Symmetric 2N-point rule on [-1, 1] \\ {0}.

    ``mu`` and ``w`` are ordered k = -N..-1, 1..N, so ``mu[:N]`` are the
    negative directions and ``mu[N:]`` the positive ones.
    """

    half_order: int
    mu: np.ndarray
    w: np.ndarray

    @property
    def positive_mu(self):
        return self.mu[self.half_order:]

    @property
    def positive_w(self):
        return self.w[self.half_order:]

    def node(self, k):
        """Direction cosine for signed index k (|k| = 1..N)."""
        return self.mu[self._index(k)]

    def weight(self, k):
        return self.w[self._index(k)]

    def _index(self, k):
        n = self.half_order
        if k == 0 or abs(k) > n:
            raise IndexError(f"quadrature index {k} outside 1..{n}")
        return n + k - 1 if k > 0 else n + k


def _legendre_with_derivative(n, t):
    p0 = np.ones_like(t)
    p1 = t.copy()
    for k in range(2, n + 1):
        p0, p1 = p1, ((2 * k - 1) * t * p1 - (k - 1) * p0) / k
    # P'_n from the standard three-term identity
    dp = n * (t * p1 - p0) / (t * t - 1.0)
    return p1, dp


@lru_cache(maxsize=None)
def gauss_legendre_unit(n: int) -> HalfRule:
    """n-point Gauss-Legendre rule mapped to [0, 1].

    Roots of P_n are found by Newton iteration from Chebyshev-type initial
    guesses, so the rule is bit-reproducible.
    """
    if int(n) != n or n < 1:
        raise ValueError(f"rule order must be a positive integer, got {n!r}")
    n = int(n)
    if n == 1:
        nodes = np.array([0.5])
        weights = np.array([1.0])
    else:
        i = np.arange(1, n + 1)
        t = np.cos(np.pi * (i - 0.25) / (n + 0.5))
        for _ in range(_NEWTON_MAXITER):
            p, dp = _legendre_with_derivative(n, t)
            step = p / dp
            t = t - step
            if np.max(np.abs(step)) <= _NEWTON_TOL:
                break
        else:
            raise RuntimeError(f"Newton iteration for Gauss-Legendre order {n} did not converge")
        _, dp = _legendre_with_derivative(n, t)
        w = 2.0 / ((1.0 - t * t) * dp * dp)
        order = np.argsort(t)
        t, w = t[order], w[order]
        # exploit the symmetry of the roots on [-1, 1] before mapping
        t = 0.5 * (t - t[::-1])
        w = 0.5 * (w + w[::-1])
        nodes = 0.5 * (1.0 + t)
        weights = 0.5 * w
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return HalfRule(n, nodes, weights)


@lru_cache(maxsize=None)
def double_gauss(N: int) -> QuadratureRule:
    """Gauss-Legendre on (0, 1] mirrored onto [-1, 0)."""
    half = gauss_legendre_unit(N)
    mu = np.concatenate([-half.nodes[::-1], half.nodes])
    w = np.concatenate([half.weights[::-1], half.weights])
    mu.setflags(write=False)
    w.setflags(write=False)
    return QuadratureRule(int(N), mu, w)
