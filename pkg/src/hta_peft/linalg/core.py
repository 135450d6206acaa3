"""Dense float64 helpers: Householder reflectors, numerical rank, finite differences.

Matrices are plain C-ordered ``np.ndarray`` of dtype float64.
"""
from __future__ import annotations

from typing import Callable

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared where a finite value is required."""


def as_vector(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {v.shape}")
    return v


def householder_matrix(v) -> np.ndarray:
    """Return ``I - v v^T``.

    No factor of two and no normalisation: the result is orthogonal only when
    ``||v||^2`` is 0 or 2.
    """
    v = as_vector(v)
    if v.size < 1:
        raise ShapeError("householder vector must have dim >= 1")
    return np.eye(v.size) - np.outer(v, v)


def apply_householder_left(v, x) -> np.ndarray:
    """``(I - v v^T) @ x`` in O(rows * cols) without forming the reflector."""
    v = as_vector(v)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
        squeeze = True
    else:
        squeeze = False
    if x.shape[0] != v.size:
        raise ShapeError(f"vector dim {v.size} does not match {x.shape[0]} rows")
    out = x - np.outer(v, v @ x)
    return out[:, 0] if squeeze else out


def apply_householder_right(x, v) -> np.ndarray:
    """``x @ (I - v v^T)`` applied over the last axis of ``x`` (any leading shape)."""
    v = as_vector(v)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != v.size:
        raise ShapeError(f"last axis {x.shape[-1]} does not match vector dim {v.size}")
    return x - (x @ v)[..., None] * v


def project_to_reflector(v) -> np.ndarray:
    """Rescale ``v`` so that ``||v||^2 == 2``; the zero vector is returned as is."""
    v = as_vector(v)
    n2 = float(v @ v)
    if n2 == 0.0:
        return v.copy()
    return v * np.sqrt(2.0 / n2)


def numerical_rank(sigma, rel_tol: float = 1e-10) -> int:
    """Count singular values strictly above ``rel_tol * sigma[0]``."""
    sigma = as_vector(sigma)
    if sigma.size == 0 or sigma[0] == 0.0:
        return 0
    return int(np.count_nonzero(sigma > rel_tol * sigma[0]))


def finite_diff_grad(f: Callable[[np.ndarray], float], at, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat parameter vector."""
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.array(as_vector(at), dtype=np.float64, copy=True)
    grad = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        fp = float(f(x))
        x[i] = orig - h
        fm = float(f(x))
        x[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value probing coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad
