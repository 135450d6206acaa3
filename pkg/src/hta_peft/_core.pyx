# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: the Jacobi SVD sweep and the fused GELU backward.

``_core_py`` holds the numpy twins; ``_kernels`` picks one at import.
"""
from libc.math cimport fabs, sqrt, hypot

cdef double GELU_C = 0.7978845608028654


def jacobi_sweeps(double[:, ::1] g, double[:, ::1] vt, double tol, int max_sweeps):
    """Rotate rows of ``g`` (and ``vt``) in place until mutually orthogonal.

    Row ``j`` of ``g`` is column ``j`` of the matrix being orthogonalised, row
    ``j`` of ``vt`` the matching column of V.

    Returns ``(sweeps, converged, max_off)`` where ``max_off`` is the largest
    relative inner product seen during the final sweep.
    """
    cdef Py_ssize_t n = g.shape[0], m = g.shape[1], nv = vt.shape[1]
    cdef Py_ssize_t p, q, i
    cdef double alpha, beta, gamma, zeta, t, c, s, gp, gq, off, max_off = 0.0
    cdef int sweep = 0
    cdef bint rotated = True

    while rotated and sweep < max_sweeps:
        rotated = False
        max_off = 0.0
        sweep += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    gp = g[p, i]
                    gq = g[q, i]
                    alpha += gp * gp
                    beta += gq * gq
                    gamma += gp * gq
                if gamma == 0.0 or alpha == 0.0 or beta == 0.0:
                    continue
                off = fabs(gamma) / sqrt(alpha) / sqrt(beta)
                if off > max_off:
                    max_off = off
                if off <= tol:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + hypot(1.0, zeta))
                else:
                    t = -1.0 / (-zeta + hypot(1.0, zeta))
                c = 1.0 / sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    gp = g[p, i]
                    gq = g[q, i]
                    g[p, i] = c * gp - s * gq
                    g[q, i] = s * gp + c * gq
                for i in range(nv):
                    gp = vt[p, i]
                    gq = vt[q, i]
                    vt[p, i] = c * gp - s * gq
                    vt[q, i] = s * gp + c * gq
    return sweep, not rotated, max_off


def gelu_backward(double[::1] g, double[::1] x, double[::1] t, double[::1] out):
    """``out = g * gelu'(x)`` given ``t = tanh(...)`` saved by the forward pass (flat arrays)."""
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double xi, ti
    for i in range(n):
        xi = x[i]
        ti = t[i]
        out[i] = g[i] * 0.5 * (1.0 + ti + xi * (1.0 - ti * ti) * GELU_C * (1.0 + 0.134145 * xi * xi))
