"""Exponential integrals and closed-form Matérn kernels."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

EULER_GAMMA = 0.57721566490153286061

_EPS = 1e-16
_FPMIN = 1e-300
_MAXITER = 10_000
# Ein's alternating series loses digits to cancellation beyond this point
_EIN_SERIES_MAX = 5.0


def _check_positive(z, name):
    if not z > 0.0:
        raise ValueError(f"{name} requires z > 0, got {z!r}")


def _ein_series(z):
    term = z
    total = z
    k = 1
    while True:
        k += 1
        term *= -z / k
        delta = term / k
        total += delta
        if abs(delta) <= _EPS * abs(total):
            return total
        if k > _MAXITER:
            raise RuntimeError(f"Ein series did not converge at z={z}")


def _expint_cf(n, z):
    """E_n(z) for z > 1 by the modified Lentz continued fraction."""
    b = z + n
    c = 1.0 / _FPMIN
    d = 1.0 / b
    h = d
    for i in range(1, _MAXITER):
        a = -i * (n - 1 + i)
        b += 2.0
        d = 1.0 / (a * d + b)
        c = b + a / c
        delta = c * d
        h *= delta
        if abs(delta - 1.0) <= _EPS:
            return h * math.exp(-z)
    raise RuntimeError(f"continued fraction for E_{n} did not converge at z={z}")


def exp_integral_e1(z: float) -> float:
    """E1(z) = int_1^inf exp(-t z) / t dt for real z > 0."""
    z = float(z)
    _check_positive(z, "E1")
    if z <= 1.0:
        return -EULER_GAMMA - math.log(z) + _ein_series(z)
    return _expint_cf(1, z)


def exp_integral_e2(z: float) -> float:
    """E2(z) = int_0^1 exp(-z/s) ds."""
    z = float(z)
    _check_positive(z, "E2")
    if z <= 1.0:
        return math.exp(-z) - z * exp_integral_e1(z)
    return _expint_cf(2, z)


def ein(z: float) -> float:
    """Ein(z) = int_0^z (1 - exp(-t)) / t dt."""
    z = float(z)
    _check_positive(z, "Ein")
    if z <= _EIN_SERIES_MAX:
        return _ein_series(z)
    return exp_integral_e1(z) + EULER_GAMMA + math.log(z)


e1 = np.vectorize(exp_integral_e1, otypes=[float])
e2 = np.vectorize(exp_integral_e2, otypes=[float])


SUPPORTED_NU = (0.5, 1.5, 2.5)


@dataclass(frozen=True)
class MaternParams:
    nu: float = 1.5
    lambda_c: float = 1.0
    sigma_var2: float = 1.0

    def __post_init__(self):
        for name in ("nu", "lambda_c", "sigma_var2"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"Matérn parameter {name} must be > 0", key=name)
        if self.nu not in SUPPORTED_NU:
            raise ConfigError(f"nu={self.nu} unsupported; closed forms exist for {SUPPORTED_NU}", key="nu")

    @property
    def length_scale(self):
        """Effective length l with C(r) = f(r / l); l = lambda_c / (2 sqrt(nu))."""
        return self.lambda_c / (2.0 * math.sqrt(self.nu))


def matern_cov(params: MaternParams, r):
    """Matérn covariance at distance(s) r >= 0 (half-integer nu only)."""
    r = np.abs(np.asarray(r, dtype=float))
    z = r / params.length_scale
    s2 = params.sigma_var2
    if params.nu == 0.5:
        out = s2 * np.exp(-z)
    elif params.nu == 1.5:
        out = s2 * (1.0 + z) * np.exp(-z)
    else:
        out = s2 * (1.0 + z + z * z / 3.0) * np.exp(-z)
    return out if out.ndim else float(out)
