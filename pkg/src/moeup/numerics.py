"""Dense float64 matrix primitives and the SPD solver used by the router fit.

Matrices are plain row-major ``numpy.ndarray`` values: 2-D float64 throughout
this module, 3-D float32 for activation stacks elsewhere. The solver computes
``(A + ridge*I)^-1 B`` through a Cholesky factorization, which is the cheap,
stable route for the symmetric positive definite systems produced by
sum-of-outer-products accumulation.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import lapack

from .errors import (
    DimensionMismatchError,
    NonFiniteError,
    NotPositiveDefiniteError,
    NumericalError,
)

__all__ = ["as_matrix", "matmul", "solve_spd", "softmax"]


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return ``a`` as a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionMismatchError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise NonFiniteError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(m)


def matmul(a, b) -> np.ndarray:
    """Standard matrix product with shape and finiteness validation."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionMismatchError(
            f"matmul: inner dimensions differ ({a.shape} x {b.shape})"
        )
    out = a @ b
    if not np.isfinite(out).all():
        raise NonFiniteError("matmul produced non-finite entries")
    return out


def solve_spd(a, b, ridge: float = 0.0, sym_tol: float = 1e-9) -> np.ndarray:
    """Solve ``(a + ridge*I) X = b`` for symmetric positive definite ``a``.

    ``a`` must be square and symmetric to within ``sym_tol`` (relative to its
    magnitude); it is explicitly symmetrized as ``(a + a.T)/2`` before
    factorization to absorb accumulation-order float asymmetry. Uses LAPACK
    dpotrf/dpotrs (Cholesky). Raises :class:`NotPositiveDefiniteError` with the
    1-based failing pivot if the regularized matrix is not positive definite.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    n = a.shape[0]
    if a.shape[0] != a.shape[1]:
        raise DimensionMismatchError(f"solve_spd: a must be square, got {a.shape}")
    if b.shape[0] != n:
        raise DimensionMismatchError(
            f"solve_spd: b has {b.shape[0]} rows, expected {n}"
        )
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    scale = max(1.0, float(np.abs(a).max()))
    asym = float(np.abs(a - a.T).max())
    if asym > sym_tol * scale:
        raise DimensionMismatchError(
            f"solve_spd: a is not symmetric (max |A-A^T| = {asym:.3e})"
        )

    sym = (a + a.T) / 2.0
    sym[np.diag_indices(n)] += ridge
    c, info = lapack.dpotrf(sym, lower=1, overwrite_a=1)
    if info > 0:
        raise NotPositiveDefiniteError(int(info))
    if info < 0:
        raise NumericalError(f"dpotrf rejected argument {-info}")
    x, info = lapack.dpotrs(c, b, lower=1)
    if info != 0:
        raise NumericalError(f"dpotrs failed with info={info}")
    return np.ascontiguousarray(x)


def softmax(v) -> np.ndarray:
    """Numerically stable softmax of a float32 vector (max-subtraction)."""
    x = np.asarray(v, dtype=np.float32)
    if x.ndim != 1:
        raise DimensionMismatchError(f"softmax expects a vector, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise NonFiniteError("softmax input contains non-finite entries")
    shifted = x - x.max()
    e = np.exp(shifted)
    return e / e.sum()
