"""Dense linear algebra used by the adapters: reflectors, Jacobi SVD, rank, FD oracle."""
from .._kernels import BACKEND
from .core import (
    NonFiniteError,
    ShapeError,
    apply_householder_left,
    apply_householder_right,
    finite_diff_grad,
    householder_matrix,
    numerical_rank,
    project_to_reflector,
)
from .svd import SvdConvergenceError, SvdResult, jacobi_svd

__all__ = [
    "BACKEND",
    "NonFiniteError",
    "ShapeError",
    "SvdConvergenceError",
    "SvdResult",
    "apply_householder_left",
    "apply_householder_right",
    "finite_diff_grad",
    "householder_matrix",
    "jacobi_svd",
    "numerical_rank",
    "project_to_reflector",
]
