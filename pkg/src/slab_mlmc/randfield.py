"""Lognormal scattering cross-sections from truncated Karhunen-Loève expansions.

log sigma_S(x) = sum_i sqrt(xi_i) eta_i(x) Z_i with (xi_i, eta_i) the eigenpairs of
the Matérn covariance operator on [0, 1]. For nu = 0.5 the eigenpairs are
analytic; otherwise they come from a Nyström discretisation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional
from functools import lru_cache

import numpy as np

from . import _kernels
from .errors import ConfigError, SolverError
from .jacobi import jacobi_eigh
from .quadrature import gauss_legendre_unit
from .specfun import MaternParams, matern_cov
from .transport import CoefficientSample, Mesh

DEFAULT_SIGMA_A = math.exp(0.5)
DEFAULT_SOURCE = math.e
NYSTROM_POINTS = 512


@dataclass(frozen=True, eq=False)
class KLExpansion:
    params: MaternParams
    eigenvalues: np.ndarray
    method: str
    # analytic: frequencies and normalisation; nystrom: nodes, weights, weighted vectors
    data: dict = field(repr=False)

    @property
    def truncation(self):
        return self.eigenvalues.size

    def eigenfunctions(self, x, count=None):
        """Matrix [eta_i(x_j)] of shape (len(x), count)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        k = self.truncation if count is None else int(count)
        if self.method == "analytic":
            w = self.data["freq"][:k]
            c = self.data["c"]
            wx = np.outer(x, w)
            return (w * np.cos(wx) + c * np.sin(wx)) * self.data["norm"][:k]
        y, wts, vecs = self.data["nodes"], self.data["weights"], self.data["vectors"][:, :k]
        cov = matern_cov(self.params, x[:, None] - y[None, :])
        denom = np.broadcast_to(self.eigenvalues[:k], (x.size, k))
        if self.data["corrected"]:
            # solve the subtracted Nyström equation at x for eta(x)
            denom = denom + (cov @ wts - _row_integrals(self.params, x))[:, None]
        return cov @ (wts[:, None] * vecs) / denom

    def pointwise_variance(self, x, count=None):
        """Variance of the truncated log-field at x: sum_i xi_i eta_i(x)^2."""
        k = self.truncation if count is None else int(count)
        phi = self.eigenfunctions(x, k)
        return phi ** 2 @ self.eigenvalues[:k]


def _exp_kernel_frequencies(c, count):
    """Positive roots of (w^2 - c^2) sin w - 2 c w cos w, one per (i pi, (i+1) pi)."""
    def g(w):
        return (w * w - c * c) * np.sin(w) - 2.0 * c * w * np.cos(w)

    i = np.arange(count, dtype=float)
    lo = i * np.pi
    lo[0] = 1e-300
    hi = (i + 1.0) * np.pi
    glo = g(lo)
    # g ~ -(c^2 + 2c) w near zero
    glo[0] = -1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        gm = g(mid)
        left = np.sign(gm) == np.sign(glo)
        lo = np.where(left, mid, lo)
        glo = np.where(left, gm, glo)
        hi = np.where(left, hi, mid)
        if np.max(hi - lo) <= 1e-13 * max(1.0, hi[-1]) * 0.5:
            break
    return 0.5 * (lo + hi)


@lru_cache(maxsize=8)
def kl_analytic_exponential(params: MaternParams, truncation: int) -> KLExpansion:
    """Exact eigenpairs of sigma^2 exp(-|x - y| / l) on [0, 1] (nu = 0.5)."""
    if params.nu != 0.5:
        raise ConfigError("analytic KL eigenpairs need nu = 0.5", key="nu")
    if truncation < 1:
        raise ValueError("truncation must be >= 1")
    c = 1.0 / params.length_scale
    w = _exp_kernel_frequencies(c, int(truncation))
    xi = 2.0 * params.sigma_var2 * c / (w * w + c * c)
    sq = (w * w + c * c) / 2.0 + (w * w - c * c) * np.sin(2.0 * w) / (4.0 * w) + c * np.sin(w) ** 2
    norm = 1.0 / np.sqrt(sq)
    return KLExpansion(params, xi, "analytic", {"freq": w, "c": c, "norm": norm})


def _row_integrals(params, x, points=64):
    """int_0^1 C(x, y) dy, split at y = x where the kernel may have a kink."""
    rule = gauss_legendre_unit(points)
    t, wt = np.asarray(rule.nodes), np.asarray(rule.weights)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    left = matern_cov(params, np.outer(x, t)) @ wt * x
    right = matern_cov(params, np.outer(1.0 - x, t)) @ wt * (1.0 - x)
    return left + right


@lru_cache(maxsize=8)
def _nystrom_eigh(params, quad_points, corrected):
    rule = gauss_legendre_unit(quad_points)
    y, wts = np.array(rule.nodes), np.array(rule.weights)
    sw = np.sqrt(wts)
    cov = matern_cov(params, y[:, None] - y[None, :])
    mat = sw[:, None] * cov * sw[None, :]
    if corrected:
        mat[np.diag_indices_from(mat)] += _row_integrals(params, y) - cov @ wts
    # tighter than needed for the eigenvalues: eta_i = C W v_i / xi_i amplifies residuals by 1/xi_i
    vals, vecs = jacobi_eigh(mat, rel_tol=1e-15)
    return y, wts, vals, vecs


def kl_nystrom(params: MaternParams, quad_points: int = NYSTROM_POINTS, truncation: int = 64,
               corrected: bool = True) -> KLExpansion:
    """Nyström eigenpairs on a Gauss-Legendre grid, solved by cyclic Jacobi.

    With ``corrected`` the quadrature is applied to C(x, y)(v(y) - v(x)) and the
    exact row integral of C restores the rest. This keeps the matrix symmetric
    (only the diagonal changes) and removes most of the error the kink of the
    nu = 0.5 kernel causes on the diagonal.
    """
    if quad_points < 4 * truncation:
        raise ValueError(f"{quad_points} quadrature points cannot resolve {truncation} modes (need 4x)")
    y, wts, vals, vecs = _nystrom_eigh(params, int(quad_points), bool(corrected))
    tol = 1e-12 * abs(vals[0])
    if vals[-1] < -1e3 * tol:
        raise SolverError(f"covariance matrix has negative eigenvalue {vals[-1]:.3e}")
    if np.any(vals[:truncation] <= 0.0):
        raise SolverError("non-positive eigenvalue among retained modes")
    vals = vals[:truncation].copy()
    # orthonormal in the discrete L2(0, 1) inner product
    weighted = vecs[:, :truncation] / np.sqrt(wts)[:, None]
    # fix the sign so that the largest-magnitude entry of each eigenvector is positive
    signs = np.sign(weighted[np.argmax(np.abs(weighted), axis=0), np.arange(truncation)])
    weighted = weighted * signs
    return KLExpansion(params, vals, "nystrom",
                       {"nodes": y, "weights": wts, "vectors": weighted, "corrected": bool(corrected)})


def build_kl(params, truncation, quad_points=NYSTROM_POINTS, method="auto", corrected=True):
    if method == "auto":
        method = "analytic" if params.nu == 0.5 else "nystrom"
    if method == "analytic":
        return kl_analytic_exponential(params, int(truncation))
    if method == "nystrom":
        return kl_nystrom(params, int(quad_points), int(truncation), bool(corrected))
    raise ConfigError(f"unknown KL method {method!r}", key="kl_method")


def modes_for(h, nu, cap=None):
    """Default truncation: 225 ceil(h^-1/2) for nu = 0.5, 8 ceil(h^-1) otherwise."""
    return ModePolicy(nu, cap=cap)(int(round(1.0 / h)))


@dataclass(frozen=True)
class ModePolicy:
    """Truncation as a function of the mesh: coef * ceil(h^-1/2) for nu = 0.5, coef * ceil(1/h) otherwise.

    ``coef`` defaults to 225 (nu = 0.5) or 8; ``cap`` bounds the count.
    """
    nu: float
    coef: Optional[float] = None
    cap: Optional[int] = None

    def __call__(self, cells):
        h = 1.0 / cells
        if self.nu == 0.5:
            coef = 225 if self.coef is None else self.coef
            k = coef * math.ceil(h ** -0.5 - 1e-9)
        else:
            coef = 8 if self.coef is None else self.coef
            k = coef * math.ceil(1.0 / h - 1e-9)
        k = int(math.ceil(k - 1e-9))
        return k if self.cap is None else min(k, int(self.cap))

    def max_modes(self, finest_cells):
        return self(finest_cells)


@dataclass(frozen=True, eq=False)
class FieldSample:
    kl: KLExpansion
    z: np.ndarray
    sigma_a: object = DEFAULT_SIGMA_A

    def log_sigma_s(self, x):
        k = self.z.size
        return self.kl.eigenfunctions(x, k) @ (np.sqrt(self.kl.eigenvalues[:k]) * self.z)

    def sigma_s(self, x):
        return np.exp(self.log_sigma_s(x))

    def absorption(self, x):
        x = np.asarray(x, dtype=float)
        if callable(self.sigma_a):
            return np.asarray(self.sigma_a(x), dtype=float) * np.ones_like(x)
        return np.full_like(x, float(self.sigma_a))

    def sigma(self, x):
        return self.sigma_s(x) + self.absorption(x)


def draw_field(kl, sigma_a, stream, truncation=None):
    """Draw Z_1..Z_K from a counter-based stream; same stream state, same sample."""
    k = kl.truncation if truncation is None else int(truncation)
    return FieldSample(kl, stream.normals(k), sigma_a)


def coarsen_coefficients(z_fine, truncation_coarse):
    """Leading KL coefficients, used for the coarse member of an MLMC pair."""
    if truncation_coarse > len(z_fine):
        raise ValueError("coarse truncation exceeds fine truncation")
    return np.asarray(z_fine)[: int(truncation_coarse)]


class FieldSampler:
    """Evaluates sample coefficients on meshes, caching eigenfunction tables per mesh."""

    def __init__(self, kl, sigma_a=DEFAULT_SIGMA_A, source=DEFAULT_SOURCE):
        self.kl = kl
        self.sigma_a = sigma_a
        self.source = source
        self._tables = {}

    def table(self, mesh):
        key = mesh.nodes.tobytes()
        tab = self._tables.get(key)
        if tab is None:
            xm = mesh.midpoints
            phi = self.kl.eigenfunctions(xm) * np.sqrt(self.kl.eigenvalues)
            absorb = FieldSample(self.kl, np.zeros(0), self.sigma_a).absorption(xm)
            src = self.source(xm) if callable(self.source) else np.full_like(xm, float(self.source))
            tab = (phi, absorb, np.asarray(src, dtype=float))
            self._tables[key] = tab
        return tab

    def scattering(self, mesh, z, k=None):
        """sigma_S at the midpoints for each row of z, using the leading k coefficients.

        Summation runs in a fixed order per row, so a row's values do not depend
        on which other rows are evaluated with it.
        """
        phi, _, _ = self.table(mesh)
        z = np.atleast_2d(np.asarray(z, dtype=float))
        k = z.shape[1] if k is None else int(k)
        if k > phi.shape[1] or k > z.shape[1]:
            raise ValueError(f"{k} coefficients requested, expansion has {phi.shape[1]}")
        return np.exp(_kernels.log_field(phi, np.ascontiguousarray(z), k))

    def coefficients(self, mesh, z):
        _, absorb, src = self.table(mesh)
        sig_s = self.scattering(mesh, z)[0]
        return CoefficientSample(mesh, sig_s + absorb, sig_s, src)


__all__ = [
    "KLExpansion", "FieldSample", "FieldSampler", "kl_analytic_exponential", "kl_nystrom",
    "build_kl", "modes_for", "ModePolicy", "draw_field", "coarsen_coefficients", "Mesh",
]
