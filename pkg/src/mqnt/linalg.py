"""Dense float64 matrix helpers used by the quantizers.

Matrices are plain 2-D ``numpy.ndarray`` objects in row-major order.  All
public entry points validate their inputs and promote to float64, so the
rest of the package can assume finite, well-shaped operands.  Operations
are pure: the same inputs give bit-identical outputs on a given platform.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import NotPositiveDefiniteError, ShapeError, SingularMatrixError

__all__ = [
    "as_matrix",
    "as_vector",
    "matmul",
    "cholesky",
    "invert_upper_triangular",
]


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return ``a`` as a C-contiguous float64 2-D array.

    Raises ShapeError for wrong dimensionality and ValueError for
    non-finite entries.
    """
    out = np.ascontiguousarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={out.ndim}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains non-finite entries")
    return out


def as_vector(v, name: str = "vector") -> np.ndarray:
    """Validate and return ``v`` as a float64 1-D array of finite values."""
    out = np.ascontiguousarray(v, dtype=np.float64)
    if out.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got ndim={out.ndim}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains non-finite entries")
    return out


def matmul(a, b) -> np.ndarray:
    """Matrix product with shape validation."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"inner dimensions differ: ({a.shape[0]}x{a.shape[1]}) @ "
            f"({b.shape[0]}x{b.shape[1]})"
        )
    return a @ b


def _check_symmetric(a: np.ndarray, name: str) -> np.ndarray:
    scale = max(float(np.max(np.abs(a))), 1.0)
    if np.max(np.abs(a - a.T)) > 1e-8 * scale:
        raise ShapeError(f"{name} is not symmetric")
    # Fold tiny asymmetries from accumulated products so the factorization
    # is exactly reproducible.
    return (a + a.T) / 2.0


def cholesky(a, damping: float = 0.0) -> np.ndarray:
    """Lower Cholesky factor of ``a + damping * mean(diag(a)) * I``.

    ``damping`` is a fraction of the mean diagonal, not an absolute ridge.
    Raises NotPositiveDefiniteError when a pivot fails after damping.
    """
    a = as_matrix(a, "a")
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"cholesky needs a square matrix, got {a.shape}")
    if damping < 0:
        raise ValueError("damping must be >= 0")
    a = _check_symmetric(a, "a")
    if damping > 0:
        ridge = damping * float(np.mean(np.diag(a)))
        a = a + ridge * np.eye(a.shape[0])
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(
            f"matrix is not positive definite (damping={damping})"
        ) from exc


def invert_upper_triangular(u) -> np.ndarray:
    """Inverse of an upper-triangular matrix.

    Requires an exactly upper-triangular operand with a nonzero diagonal.
    """
    u = as_matrix(u, "u")
    n = u.shape[0]
    if u.shape[1] != n:
        raise ShapeError(f"expected a square matrix, got {u.shape}")
    if np.any(np.tril(u, k=-1) != 0.0):
        raise ShapeError("matrix has nonzero entries below the diagonal")
    if np.any(np.diag(u) == 0.0):
        raise SingularMatrixError("zero diagonal entry in triangular matrix")
    return scipy.linalg.solve_triangular(u, np.eye(n), lower=False)
