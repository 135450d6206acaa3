"""Independent reference implementations used only by the tests.

Nothing here shares code with the package: eigenvalues come from a classical
two-sided cyclic Jacobi iteration on a symmetric matrix, and dense products
are spelled out with explicit loops where a loop is the clearest oracle.
"""
import math

import numpy as np


def jacobi_eigvalsh(s, tol=1e-15, max_sweeps=100):
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending."""
    a = np.array(s, dtype=float, copy=True)
    n = a.shape[0]
    for _ in range(max_sweeps):
        off = math.sqrt(sum(a[i, j] ** 2 for i in range(n) for j in range(n) if i != j))
        if off <= tol * max(1.0, np.abs(a).max()):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                sn = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q], rot[q, p] = sn, -sn
                a = rot.T @ a @ rot
    return np.sort(np.diag(a))[::-1]


def singular_values(a):
    """Singular values via eigenvalues of A^T A (square-rooted, clipped at 0)."""
    a = np.asarray(a, dtype=float)
    if a.shape[0] < a.shape[1]:
        a = a.T
    return np.sqrt(np.clip(jacobi_eigvalsh(a.T @ a), 0.0, None))


def det_by_elimination(m):
    """Determinant by Gaussian elimination with partial pivoting."""
    a = np.array(m, dtype=float, copy=True)
    n = a.shape[0]
    det = 1.0
    for k in range(n):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        if a[p, k] == 0.0:
            return 0.0
        if p != k:
            a[[k, p]] = a[[p, k]]
            det = -det
        det *= a[k, k]
        a[k + 1:] -= np.outer(a[k + 1:, k] / a[k, k], a[k])
    return det


def central_difference(f, x, h=1e-5):
    """Central differences over every entry of an array argument (any shape)."""
    x = np.array(x, dtype=float, copy=True)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def relative_error(a, b):
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(np.asarray(a) - np.asarray(b)).max(initial=0.0) / scale)
