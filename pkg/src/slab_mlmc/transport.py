"""Diamond-difference discrete-ordinates solver for the slab transport problem.

The unknowns are nodal angular fluxes psi[k, j] on a mesh 0 = x_0 < ... < x_M = 1,
with cross-sections and source sampled at cell midpoints. Two solvers are
provided: source iteration and a direct solve of the Schur complement for the
midpoint scalar flux.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np
import scipy.linalg

from . import _kernels
from .errors import ConfigError, ConvergenceError, RefinementExhausted, SolverError
from .quadrature import QuadratureRule, double_gauss
from .specfun import exp_integral_e2

_BREAKPOINT_TOL = 1e-14


@dataclass(frozen=True)
class Mesh:
    nodes: np.ndarray
    breakpoints: tuple = (0.0, 1.0)

    def __post_init__(self):
        x = np.asarray(self.nodes, dtype=float)
        if x.ndim != 1 or x.size < 2:
            raise ValueError("mesh needs at least two nodes")
        if x[0] != 0.0 or x[-1] != 1.0:
            raise ValueError("mesh endpoints must be exactly 0 and 1")
        if np.any(np.diff(x) <= 0.0):
            raise ValueError("mesh nodes must be strictly increasing")
        for c in self.breakpoints:
            if np.min(np.abs(x - c)) > _BREAKPOINT_TOL:
                raise ValueError(f"mesh does not resolve breakpoint {c}")
        x.setflags(write=False)
        object.__setattr__(self, "nodes", x)
        object.__setattr__(self, "breakpoints", tuple(float(c) for c in self.breakpoints))

    @classmethod
    def uniform(cls, m, breakpoints=(0.0, 1.0)):
        return _uniform_mesh(cls, int(m), tuple(float(c) for c in breakpoints))

    @classmethod
    def _build_uniform(cls, m, breakpoints):
        x = np.linspace(0.0, 1.0, int(m) + 1)
        # snap so that breakpoints on the uniform grid are hit exactly
        for c in breakpoints:
            i = int(round(c * m))
            if abs(x[i] - c) <= 1e-12:
                x[i] = c
        return cls(x, tuple(breakpoints))

    @property
    def cells(self):
        return self.nodes.size - 1

    @cached_property
    def widths(self):
        w = np.diff(self.nodes)
        w.setflags(write=False)
        return w

    @cached_property
    def midpoints(self):
        xm = 0.5 * (self.nodes[1:] + self.nodes[:-1])
        xm.setflags(write=False)
        return xm

    @property
    def h(self):
        return float(np.max(self.widths))

    @property
    def rho(self):
        w = self.widths
        return float(np.max(w) / np.min(w))

    def coarsen(self):
        """2:1 coarsening (every other node); requires an even cell count."""
        if self.cells % 2:
            raise ValueError("cannot coarsen a mesh with an odd number of cells")
        return Mesh(self.nodes[::2].copy(), self.breakpoints)

    def piece_index(self):
        """Index of the breakpoint interval containing each cell."""
        c = np.asarray(self.breakpoints)
        return np.searchsorted(c, self.midpoints, side="right") - 1


@lru_cache(maxsize=64)
def _uniform_mesh(cls, m, breakpoints):
    return cls._build_uniform(m, breakpoints)


@dataclass(frozen=True)
class CoefficientSample:
    """Midpoint values of sigma, sigma_S and f on a mesh."""

    mesh: Mesh
    sigma_mid: np.ndarray
    sigma_s_mid: np.ndarray
    f_mid: np.ndarray
    scattering_ratio_sup: float = field(init=False)

    def __post_init__(self):
        m = self.mesh.cells
        arrays = {}
        for name in ("sigma_mid", "sigma_s_mid", "f_mid"):
            a = np.ascontiguousarray(getattr(self, name), dtype=float)
            if a.shape != (m,):
                raise ValueError(f"{name} must have one value per cell ({m}), got shape {a.shape}")
            arrays[name] = a
            object.__setattr__(self, name, a)
        sig, sig_s = arrays["sigma_mid"], arrays["sigma_s_mid"]
        if np.any(sig <= 0.0):
            raise ValueError("total cross-section must be positive")
        if np.any(sig_s < 0.0):
            raise ValueError("scattering cross-section must be non-negative")
        ratio = float(np.max(sig_s / sig))
        if not ratio < 1.0:
            raise ValueError(f"absorption must be positive (sup sigma_S/sigma = {ratio})")
        object.__setattr__(self, "scattering_ratio_sup", ratio)

    @classmethod
    def from_functions(cls, mesh, sigma_s, sigma_a, f):
        """Sample callables (or constants) at the cell midpoints; sigma = sigma_s + sigma_a."""
        xm = mesh.midpoints
        s_s = _evaluate(sigma_s, xm)
        s_a = _evaluate(sigma_a, xm)
        return cls(mesh, s_s + s_a, s_s, _evaluate(f, xm))


def _evaluate(g, x):
    if callable(g):
        return np.asarray(g(x), dtype=float) * np.ones_like(x)
    return np.full_like(x, float(g))


@dataclass(frozen=True)
class ScalarFlux:
    mesh: Mesh
    nodal: np.ndarray

    @property
    def midpoint(self):
        return 0.5 * (self.nodal[1:] + self.nodal[:-1])

    def __call__(self, x):
        return np.interp(x, self.mesh.nodes, self.nodal)


@dataclass(frozen=True)
class AngularFlux:
    """psi[k, j] with rows ordered like ``rule.mu`` (k = -N..-1, 1..N)."""

    rule: QuadratureRule
    psi: np.ndarray


@dataclass
class SolveStats:
    iterations: int = 0
    final_residual: float = 0.0
    work_units: float = 0.0
    wall_time: float = 0.0


def sweep(mesh, sigma_mid, source_mid, mu):
    """Nodal values U_j of the diamond-difference solution for one direction."""
    if mu == 0.0:
        raise ValueError("sweep direction mu must be nonzero")
    return _kernels.sweep_one(mesh.widths, np.ascontiguousarray(sigma_mid, dtype=float),
                              np.ascontiguousarray(source_mid, dtype=float), float(mu))


def apply_discrete_k(mesh, sigma_mid, rule, source_mid):
    """phi = 1/2 sum_k w_k S^h_{mu_k} g for a midpoint source g."""
    phi = _kernels.scalar_flux(mesh.widths, np.ascontiguousarray(sigma_mid, dtype=float),
                               np.ascontiguousarray(source_mid, dtype=float), rule.mu, rule.w)
    return ScalarFlux(mesh, phi)


def _angular(coeffs, rule, phi_mid):
    src = coeffs.sigma_s_mid * phi_mid + coeffs.f_mid
    psi, phi = _kernels.angular_flux(coeffs.mesh.widths, coeffs.sigma_mid, src, rule.mu, rule.w)
    return AngularFlux(rule, psi), ScalarFlux(coeffs.mesh, phi)


def source_iteration(coeffs, rule, tol=1e-10, max_iter=10_000, want_psi=True):
    """Fixed-point iteration phi <- K^{h,N} P^h (sigma_S phi + f) from phi = 0.

    Stops when the change in the scattering source, sup_j sigma_S |d phi_{j-1/2}|,
    is at most tol * max(1, sup|phi|). That change is exactly the cell residual of
    the returned (psi, phi), so the scheme residual is bounded by the same amount.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    t0 = time.perf_counter()
    m = coeffs.mesh.cells
    c, d = _kernels.sweep_coefficients(coeffs.mesh.widths, coeffs.sigma_mid, rule.mu)
    nodal, src, it, residual = _kernels.source_iteration_loop(
        c, d, coeffs.sigma_s_mid, coeffs.f_mid, rule.mu, rule.w, float(tol), int(max_iter))
    if it < 0:
        raise ConvergenceError(
            f"source iteration did not converge in {max_iter} iterations (residual {residual:.3e})",
            residual=residual, iterations=max_iter)
    stats = SolveStats(iterations=it, final_residual=residual,
                       work_units=float(it * m * rule.mu.size))
    psi = None
    if want_psi:
        # same sweeps, same order: phi below is bit-identical to ``nodal``
        psi_arr, nodal = _kernels.angular_flux_coef(c, d, src, rule.mu, rule.w)
        psi = AngularFlux(rule, psi_arr)
    stats.wall_time = time.perf_counter() - t0
    return ScalarFlux(coeffs.mesh, nodal), psi, stats


def direct_solve(coeffs, rule):
    """Eliminate psi and solve the dense M x M system for the midpoint scalar flux.

    Column i of the Schur operator is the midpoint response to a unit source in
    cell i; the system (I - K_mid diag(sigma_S)) phi_mid = K_mid f is solved by LU
    with partial pivoting and psi is recovered by one final set of sweeps.
    """
    t0 = time.perf_counter()
    mesh = coeffs.mesh
    m = mesh.cells
    n_dir = rule.mu.size
    h = mesh.widths
    nodal = _kernels.scalar_flux_multi(h, coeffs.sigma_mid, np.eye(m), rule.mu, rule.w)
    k_mid = 0.5 * (nodal[1:] + nodal[:-1])
    rhs = k_mid @ coeffs.f_mid
    a = np.eye(m) - k_mid * coeffs.sigma_s_mid[np.newaxis, :]
    with np.errstate(all="raise"):
        try:
            lu, piv = scipy.linalg.lu_factor(a, check_finite=True)
            phi_mid = scipy.linalg.lu_solve((lu, piv), rhs)
        except (FloatingPointError, ValueError, np.linalg.LinAlgError) as exc:
            raise SolverError(f"Schur complement solve failed: {exc}") from exc
    if np.min(np.abs(np.diag(lu))) == 0.0 or not np.all(np.isfinite(phi_mid)):
        raise SolverError("singular Schur complement")
    residual = float(np.max(np.abs(a @ phi_mid - rhs)))
    psi, phi = _angular(coeffs, rule, phi_mid)
    work = m * m * n_dir + (2.0 / 3.0) * m ** 3 + m * n_dir
    stats = SolveStats(iterations=1, final_residual=residual, work_units=float(work),
                       wall_time=time.perf_counter() - t0)
    return phi, psi, stats


def scheme_residual(coeffs, angular):
    """Sup-norm residual of every cell equation, with phi_{j-1/2} computed from psi."""
    rule, psi = angular.rule, angular.psi
    h = coeffs.mesh.widths
    phi_mid = 0.5 * np.sum(rule.w[:, None] * 0.5 * (psi[:, 1:] + psi[:, :-1]), axis=0)
    lhs = (rule.mu[:, None] * np.diff(psi, axis=1) / h[None, :]
           + coeffs.sigma_mid[None, :] * 0.5 * (psi[:, 1:] + psi[:, :-1]))
    rhs = coeffs.sigma_s_mid * phi_mid + coeffs.f_mid
    return float(np.max(np.abs(lhs - rhs[None, :])))


def boundary_defect(angular):
    """Largest incoming boundary value (zero when the boundary conditions hold)."""
    rule, psi = angular.rule, angular.psi
    n = rule.half_order
    return float(max(np.max(np.abs(psi[n:, 0])), np.max(np.abs(psi[:n, -1]))))


def solve(coeffs, rule, solver="source_iteration", tol=1e-10, max_iter=10_000, want_psi=True):
    if solver == "source_iteration":
        return source_iteration(coeffs, rule, tol=tol, max_iter=max_iter, want_psi=want_psi)
    if solver == "direct":
        return direct_solve(coeffs, rule)
    raise ConfigError(f"unknown solver {solver!r}", key="solver")


# -- angular/spatial coupling ---------------------------------------------------

def _ceil(x):
    # guard against 64.00000000001 -> 65 from floating point in h = 1/M
    return int(math.ceil(x - 1e-9))


@dataclass(frozen=True)
class CouplingPolicy:
    """N(h): number of positive directions used with mesh width h.

    kinds: "sqrt" -> 2 ceil(2 h^-1/2); "linear" -> ceil((2h)^-1);
    "power" -> ceil(c0 h^-eta).
    """

    kind: str = "linear"
    c0: float = 2.0
    eta: float = 0.5

    def __post_init__(self):
        if self.kind not in ("sqrt", "linear", "power"):
            raise ConfigError(f"unknown coupling {self.kind!r}", key="coupling")

    def __call__(self, h):
        if self.kind == "sqrt":
            n = 2 * _ceil(2.0 * h ** -0.5)
        elif self.kind == "linear":
            n = _ceil(0.5 / h)
        else:
            n = _ceil(self.c0 * h ** -self.eta)
        return max(n, 1)

    @classmethod
    def parse(cls, text):
        """'sqrt', 'linear' or 'power(c0,eta)'."""
        text = text.strip()
        if text.startswith("power"):
            inner = text[len("power"):].strip().lstrip("(").rstrip(")")
            try:
                c0, eta = (float(v) for v in inner.split(","))
            except ValueError as exc:
                raise ConfigError(f"bad coupling spec {text!r}", key="coupling") from exc
            return cls("power", c0, eta)
        return cls(text)

    def __str__(self):
        return f"power({self.c0:g},{self.eta:g})" if self.kind == "power" else self.kind


def rule_for(h, coupling):
    return double_gauss(coupling(h))


# -- stability constants ----------------------------------------------------------

@dataclass(frozen=True)
class StabilityParams:
    eta: float
    K: float
    holder_norm_sigma: float
    scattering_ratio_sup: float
    R1: float
    R2: float
    R3: float
    R4: float


def holder_norm_proxy(mesh, values, eta):
    """max over breakpoint pieces of sup|g| + max_{pairs} |g(x)-g(y)| / |x-y|^eta."""
    xm = mesh.midpoints
    piece = mesh.piece_index()
    best = 0.0
    for p in np.unique(piece):
        sel = piece == p
        x, g = xm[sel], values[sel]
        semi = 0.0
        if x.size > 1:
            dx = np.abs(x[:, None] - x[None, :])
            dg = np.abs(g[:, None] - g[None, :])
            np.fill_diagonal(dx, 1.0)
            semi = float(np.max(dg / dx ** eta))
        best = max(best, float(np.max(np.abs(g))) + semi)
    return best


def stability_constants(coeffs, eta, K=1.0, c=1.0):
    if not 0.0 < eta < 1.0:
        raise ValueError("eta must lie in (0, 1)")
    if not K > 0:
        raise ValueError("K must be positive")
    sig, sig_s = coeffs.sigma_mid, coeffs.sigma_s_mid
    ratio = float(np.max(sig_s / sig))
    if ratio >= 1.0:
        raise ValueError("sup sigma_S/sigma >= 1: R1 undefined")
    s_min, s_max = float(np.min(sig)), float(np.max(sig))
    ss_min, ss_max = float(np.min(sig_s)), float(np.max(sig_s))
    if ss_min <= 0.0:
        raise ValueError("stability constants need sigma_S > 0")
    over_max = max(1.0, s_max)
    under_min = min(s_min, 1.0)
    holder = holder_norm_proxy(coeffs.mesh, sig, eta)
    r1 = 2.0 * math.sqrt(over_max) * (s_max / s_min) / (1.0 - ratio)
    r2 = math.sqrt(over_max) * (over_max / under_min) ** 1.5 * r1
    r3 = K * (ss_max / ss_min) * (over_max / under_min) ** 3 * max(1.0, holder) * r1
    r4 = c * coeffs.mesh.rho * (over_max / s_min) * (ss_max / ss_min) * max(1.0, ss_max) * r1
    return StabilityParams(eta, K, holder, ratio, r1, r2, r3, r4)


def _stability_lhs(h, n, eta):
    return 1.0 / (h ** eta + h * math.log(n) + 1.0 / n)


def stable_mesh_width(params, h, coupling, enabled=True, h_floor=2.0 ** -20):
    """Largest dyadic refinement h 2^-m satisfying the stability inequality, capped at h."""
    if not 0.0 < h < 1.0 + 1e-15:
        raise ValueError("h must lie in (0, 1]")
    if not enabled:
        return h
    hp = h
    while hp >= h_floor:
        n = coupling(hp)
        if hp * math.log(n) <= 1.0 and _stability_lhs(hp, n, params.eta) >= params.R3:
            return hp
        hp *= 0.5
    raise RefinementExhausted(
        f"no stable mesh width above {h_floor:g} (R3 = {params.R3:.4g})", r3=params.R3)


# -- analytic oracles ---------------------------------------------------------------

def _e2_closed(z):
    return 1.0 if z == 0.0 else exp_integral_e2(z)


def analytic_pure_absorber(sigma, x):
    """Scalar flux for constant sigma, f = 1 and no scattering."""
    x = float(x)
    return (2.0 - _e2_closed(sigma * x) - _e2_closed(sigma * (1.0 - x))) / (2.0 * sigma)
