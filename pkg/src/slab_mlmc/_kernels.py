"""Compiled inner loops for the diamond-difference sweeps.

Angles are processed in a fixed order (negative directions first, then
positive) so reductions are bit-reproducible.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def sweep_one(h, sigma, src, mu):
    m = h.shape[0]
    u = np.zeros(m + 1)
    if mu > 0.0:
        for j in range(1, m + 1):
            a = mu / h[j - 1]
            b = 0.5 * sigma[j - 1]
            u[j] = ((a - b) * u[j - 1] + src[j - 1]) / (a + b)
    else:
        amu = -mu
        for j in range(m, 0, -1):
            a = amu / h[j - 1]
            b = 0.5 * sigma[j - 1]
            u[j - 1] = ((a - b) * u[j] + src[j - 1]) / (a + b)
    return u


@njit(cache=True)
def scalar_flux(h, sigma, src, mu, w):
    """phi_j = 1/2 sum_k w_k psi_{k,j}, without storing psi."""
    m = h.shape[0]
    phi = np.zeros(m + 1)
    u = np.zeros(m + 1)
    for k in range(mu.shape[0]):
        muk = mu[k]
        half_w = 0.5 * w[k]
        if muk > 0.0:
            u[0] = 0.0
            for j in range(1, m + 1):
                a = muk / h[j - 1]
                b = 0.5 * sigma[j - 1]
                u[j] = ((a - b) * u[j - 1] + src[j - 1]) / (a + b)
        else:
            amu = -muk
            u[m] = 0.0
            for j in range(m, 0, -1):
                a = amu / h[j - 1]
                b = 0.5 * sigma[j - 1]
                u[j - 1] = ((a - b) * u[j] + src[j - 1]) / (a + b)
        for j in range(m + 1):
            phi[j] += half_w * u[j]
    return phi


@njit(cache=True)
def angular_flux(h, sigma, src, mu, w):
    m = h.shape[0]
    n = mu.shape[0]
    psi = np.zeros((n, m + 1))
    phi = np.zeros(m + 1)
    for k in range(n):
        muk = mu[k]
        if muk > 0.0:
            for j in range(1, m + 1):
                a = muk / h[j - 1]
                b = 0.5 * sigma[j - 1]
                psi[k, j] = ((a - b) * psi[k, j - 1] + src[j - 1]) / (a + b)
        else:
            amu = -muk
            for j in range(m, 0, -1):
                a = amu / h[j - 1]
                b = 0.5 * sigma[j - 1]
                psi[k, j - 1] = ((a - b) * psi[k, j] + src[j - 1]) / (a + b)
        half_w = 0.5 * w[k]
        for j in range(m + 1):
            phi[j] += half_w * psi[k, j]
    return psi, phi


@njit(cache=True)
def scalar_flux_multi(h, sigma, src, mu, w):
    """Multi right-hand-side variant: src has shape (M, R), result (M + 1, R)."""
    m = h.shape[0]
    r = src.shape[1]
    phi = np.zeros((m + 1, r))
    u = np.zeros((m + 1, r))
    for k in range(mu.shape[0]):
        muk = mu[k]
        half_w = 0.5 * w[k]
        if muk > 0.0:
            for i in range(r):
                u[0, i] = 0.0
            for j in range(1, m + 1):
                a = muk / h[j - 1]
                b = 0.5 * sigma[j - 1]
                c = (a - b) / (a + b)
                d = 1.0 / (a + b)
                for i in range(r):
                    u[j, i] = c * u[j - 1, i] + d * src[j - 1, i]
        else:
            amu = -muk
            for i in range(r):
                u[m, i] = 0.0
            for j in range(m, 0, -1):
                a = amu / h[j - 1]
                b = 0.5 * sigma[j - 1]
                c = (a - b) / (a + b)
                d = 1.0 / (a + b)
                for i in range(r):
                    u[j - 1, i] = c * u[j, i] + d * src[j - 1, i]
        for j in range(m + 1):
            for i in range(r):
                phi[j, i] += half_w * u[j, i]
    return phi


@njit(cache=True)
def sweep_coefficients(h, sigma, mu):
    """Per-direction recursion factors: U_j = c[k, j] U_prev + d[k, j] s_j (cell j)."""
    n = mu.shape[0]
    m = h.shape[0]
    c = np.empty((n, m))
    d = np.empty((n, m))
    for k in range(n):
        amu = abs(mu[k])
        for j in range(m):
            a = amu / h[j]
            b = 0.5 * sigma[j]
            c[k, j] = (a - b) / (a + b)
            d[k, j] = 1.0 / (a + b)
    return c, d


@njit(cache=True)
def _sweep_into(c, d, src, muk, k, u):
    m = src.shape[0]
    if muk > 0.0:
        u[0] = 0.0
        for j in range(1, m + 1):
            u[j] = c[k, j - 1] * u[j - 1] + d[k, j - 1] * src[j - 1]
    else:
        u[m] = 0.0
        for j in range(m, 0, -1):
            u[j - 1] = c[k, j - 1] * u[j] + d[k, j - 1] * src[j - 1]


@njit(cache=True)
def _flux_into(c, d, src, mu, w, phi, u):
    m = src.shape[0]
    phi[:] = 0.0
    for k in range(mu.shape[0]):
        _sweep_into(c, d, src, mu[k], k, u)
        half_w = 0.5 * w[k]
        for j in range(m + 1):
            phi[j] += half_w * u[j]


@njit(cache=True)
def scalar_flux_coef(c, d, src, mu, w):
    m = src.shape[0]
    phi = np.zeros(m + 1)
    _flux_into(c, d, src, mu, w, phi, np.zeros(m + 1))
    return phi


@njit(cache=True)
def angular_flux_coef(c, d, src, mu, w):
    m = src.shape[0]
    n = mu.shape[0]
    psi = np.zeros((n, m + 1))
    phi = np.zeros(m + 1)
    for k in range(n):
        _sweep_into(c, d, src, mu[k], k, psi[k])
        half_w = 0.5 * w[k]
        for j in range(m + 1):
            phi[j] += half_w * psi[k, j]
    return psi, phi


@njit(cache=True)
def source_iteration_loop(c, d, sigma_s, f, mu, w, tol, max_iter):
    """Returns (nodal phi, source that produced it, iterations, last increment)."""
    m = f.shape[0]
    src = f.copy()
    new_src = np.empty(m)
    residual = np.inf
    nodal = np.zeros(m + 1)
    u = np.zeros(m + 1)
    for it in range(1, max_iter + 1):
        _flux_into(c, d, src, mu, w, nodal, u)
        residual = 0.0
        scale = 1.0
        for j in range(m + 1):
            if abs(nodal[j]) > scale:
                scale = abs(nodal[j])
        for j in range(m):
            new_src[j] = sigma_s[j] * (0.5 * (nodal[j + 1] + nodal[j])) + f[j]
            diff = abs(new_src[j] - src[j])
            if diff > residual:
                residual = diff
        if residual <= tol * scale:
            return nodal, src, it, residual
        src, new_src = new_src, src
    return nodal, src, -1, residual


@njit(cache=True)
def log_field(table, z, k):
    """out[s, j] = sum_{i < k} table[j, i] z[s, i], summed in index order."""
    n = z.shape[0]
    m = table.shape[0]
    out = np.zeros((n, m))
    for s in range(n):
        for j in range(m):
            acc = 0.0
            for i in range(k):
                acc += table[j, i] * z[s, i]
            out[s, j] = acc
    return out


@njit(cache=True)
def batch_source_iteration(h, sigma, sigma_s, f, mu, w, tol, max_iter):
    """Source iteration for each row of sigma / sigma_s; iterations < 0 flags failure."""
    n = sigma.shape[0]
    m = h.shape[0]
    nodal = np.zeros((n, m + 1))
    iters = np.zeros(n, dtype=np.int64)
    resid = np.zeros(n)
    for s in range(n):
        c, d = sweep_coefficients(h, sigma[s], mu)
        phi, _, it, r = source_iteration_loop(c, d, sigma_s[s], f, mu, w, tol, max_iter)
        nodal[s] = phi
        iters[s] = it
        resid[s] = r
    return nodal, iters, resid


@njit(cache=True)
def l1_norm(x, v):
    """Exact integral of |g| for the piecewise-linear g with nodal values v at nodes x."""
    acc = 0.0
    for j in range(x.shape[0] - 1):
        a = v[j]
        b = v[j + 1]
        h = x[j + 1] - x[j]
        if a * b >= 0.0:
            acc += 0.5 * h * abs(a + b)
        else:
            # the cell splits at the root of g
            acc += h * (a * a + b * b) / (2.0 * (abs(a) + abs(b)))
    return acc
