"""One-sided (Hestenes) cyclic Jacobi SVD."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import _kernels
from .core import NonFiniteError, ShapeError

DEFAULT_TOL = 1e-14
MAX_SWEEPS = 60


class SvdConvergenceError(RuntimeError):
    def __init__(self, residual: float, sweeps: int):
        super().__init__(
            f"Jacobi SVD did not converge in {sweeps} sweeps "
            f"(largest relative off-diagonal {residual:.3e})"
        )
        self.residual = residual
        self.sweeps = sweeps


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``a = u @ diag(sigma) @ v.T`` with ``k = min(m, n)``."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


def _orthonormal_completion(u: np.ndarray, keep: np.ndarray) -> None:
    """Replace the columns of ``u`` not flagged in ``keep`` by an orthonormal completion."""
    basis = u[:, keep]

    def residual(x):
        w = x - basis @ (basis.T @ x)
        return w - basis @ (basis.T @ w)

    for j in np.flatnonzero(~keep):
        w = residual(u[:, j])
        nrm = np.linalg.norm(w)
        if not (nrm > 1e-8 and nrm > 0.5 * np.linalg.norm(u[:, j])):
            # the best coordinate axis keeps at least sqrt(free / m) of its norm
            r = residual(np.eye(u.shape[0]))
            norms = np.linalg.norm(r, axis=0)
            i = int(np.argmax(norms))
            w, nrm = r[:, i], norms[i]
        u[:, j] = w / nrm
        basis = np.column_stack([basis, u[:, j]])


def jacobi_svd(a, tol: float = DEFAULT_TOL, max_sweeps: int = MAX_SWEEPS) -> SvdResult:
    """Singular value decomposition by cyclic one-sided Jacobi rotations.

    Columns are rotated pairwise until every pair is orthogonal to ``tol``
    (relative).  Singular values come out sorted descending with a stable
    sort.  Raises :class:`SvdConvergenceError` after ``max_sweeps`` sweeps.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"jacobi_svd needs a non-empty matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("jacobi_svd input contains NaN or Inf")
    m, n = a.shape
    if m < n:
        res = jacobi_svd(a.T, tol=tol, max_sweeps=max_sweeps)
        return SvdResult(u=res.v, sigma=res.sigma, v=res.u)

    g = np.array(a.T, order="C", copy=True)
    vt = np.eye(n)
    sweeps, converged, residual = _kernels.jacobi_sweeps(g, vt, tol, max_sweeps)
    if not converged:
        raise SvdConvergenceError(residual, sweeps)

    sigma = np.sqrt(np.einsum("ij,ij->i", g, g))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    g = g[order]
    v = vt[order].T.copy()

    u = np.zeros((m, n))
    smax = sigma[0]
    keep = sigma > max(m, n) * np.finfo(float).eps * smax if smax > 0 else np.zeros(n, bool)
    u[:, keep] = (g[keep] / sigma[keep, None]).T
    if not keep.all():
        _orthonormal_completion(u, keep)
    return SvdResult(u=u, sigma=sigma, v=v)
