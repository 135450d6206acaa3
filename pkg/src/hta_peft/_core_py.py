"""numpy twins of the compiled kernels in ``_core.pyx`` (same cyclic Jacobi order)."""
import math

import numpy as np


def jacobi_sweeps(g: np.ndarray, vt: np.ndarray, tol: float, max_sweeps: int):
    n = g.shape[0]
    sweep = 0
    rotated = True
    max_off = 0.0
    while rotated and sweep < max_sweeps:
        rotated = False
        max_off = 0.0
        sweep += 1
        for p in range(n - 1):
            gp = g[p]
            for q in range(p + 1, n):
                gq = g[q]
                alpha = float(gp @ gp)
                beta = float(gq @ gq)
                gamma = float(gp @ gq)
                if gamma == 0.0 or alpha == 0.0 or beta == 0.0:
                    continue
                off = abs(gamma) / math.sqrt(alpha) / math.sqrt(beta)
                max_off = max(max_off, off)
                if off <= tol:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + math.hypot(1.0, zeta))
                else:
                    t = -1.0 / (-zeta + math.hypot(1.0, zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * gp - s * gq
                g[q] = s * gp + c * gq
                g[p] = new_p
                vp = vt[p].copy()
                vt[p] = c * vp - s * vt[q]
                vt[q] = s * vp + c * vt[q]
    return sweep, not rotated, max_off


GELU_C = 0.7978845608028654


def gelu_backward(g: np.ndarray, x: np.ndarray, t: np.ndarray, out: np.ndarray) -> None:
    np.multiply(g, 0.5 * (1.0 + t + x * (1.0 - t * t) * GELU_C * (1.0 + 0.134145 * x * x)), out=out)
