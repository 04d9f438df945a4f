"""Cyclic Jacobi eigensolver for dense symmetric matrices."""
from __future__ import annotations

import numpy as np
from numba import njit

from .errors import SolverError


@njit(cache=True)
def _jacobi_sweeps(a, vt, tol, max_sweeps):
    n = a.shape[0]
    for sweep in range(max_sweeps):
        off = 0.0
        for p in range(n):
            for q in range(p + 1, n):
                off += a[p, q] * a[p, q]
        off = np.sqrt(2.0 * off)
        if off <= tol:
            return sweep, off
        # entries below tol / n can contribute at most tol to the off-norm
        skip = tol / n
        if sweep < 3:
            skip = max(skip, 0.2 * off / (n * n))
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= skip:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta < 0.0:
                    t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                app = a[p, p]
                aqq = a[q, q]
                # rows p, q of A' = J^T A J (symmetric: mirror into columns)
                for k in range(n):
                    akp = a[p, k]
                    akq = a[q, k]
                    a[p, k] = c * akp - s * akq
                    a[q, k] = s * akp + c * akq
                for k in range(n):
                    a[k, p] = a[p, k]
                    a[k, q] = a[q, k]
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(n):
                    vp = vt[p, k]
                    vq = vt[q, k]
                    vt[p, k] = c * vp - s * vq
                    vt[q, k] = s * vp + c * vq
    off = 0.0
    for p in range(n):
        for q in range(p + 1, n):
            off += a[p, q] * a[p, q]
    return max_sweeps, np.sqrt(2.0 * off)


def jacobi_eigh(matrix, rel_tol=1e-12, max_sweeps=50):
    """Eigenvalues (descending) and orthonormal eigenvectors (as columns).

    Iterates until the off-diagonal Frobenius norm is at most
    ``rel_tol * ||A||_F``.
    """
    a = np.array(matrix, dtype=float, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("matrix must be square")
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-14 * max(1.0, np.max(np.abs(a)))):
        raise ValueError("matrix must be symmetric")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    vt = np.eye(n)
    tol = rel_tol * np.linalg.norm(a)
    sweeps, off = _jacobi_sweeps(a, vt, tol, max_sweeps)
    if off > tol:
        raise SolverError(f"Jacobi did not converge in {max_sweeps} sweeps (off-diagonal {off:.3e})")
    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="stable")
    return vals[order], vt[order].T.copy()
