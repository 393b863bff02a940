"""Dense float64 kernels used by the solvers and diagnostics.

Matrices are 2-D row-major ``numpy.ndarray`` of float64, vectors are 1-D.
All functions are pure; inputs are never mutated. Solver math runs in
float64 regardless of the dtype a checkpoint was stored in.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import DegenerateVectorError, DimensionError, SingularMatrixError

Matrix = np.ndarray
Vector = np.ndarray


def as_matrix(a) -> Matrix:
    """Coerce to a 2-D float64 array, rejecting other ranks."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got rank {m.ndim}", (m.shape,))
    return m


def as_vector(v) -> Vector:
    """Coerce to a 1-D float64 array, rejecting other ranks."""
    a = np.asarray(v, dtype=np.float64)
    if a.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got rank {a.ndim}", (a.shape,))
    return a


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product a @ b with an explicit shape check."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}",
            (a.shape, b.shape),
        )
    return a @ b


def frobenius_norm_sq(a: Matrix) -> float:
    """Sum of squared entries."""
    a = np.asarray(a, dtype=np.float64)
    return float(np.sum(a * a))


def cosine(u: Vector, v: Vector) -> float:
    """Cosine of the angle between two nonzero vectors, clamped to [-1, 1]."""
    u = as_vector(u)
    v = as_vector(v)
    if u.shape != v.shape:
        raise DimensionError(f"length mismatch {u.shape[0]} vs {v.shape[0]}", (u.shape, v.shape))
    uu = float(u @ u)
    vv = float(v @ v)
    if uu == 0.0 or vv == 0.0:
        raise DegenerateVectorError("cosine undefined for a zero-norm vector")
    # sqrt(uu * vv) keeps cos(v, v) exactly 1
    return float(np.clip(float(u @ v) / np.sqrt(uu * vv), -1.0, 1.0))


def _cholesky_pivot_scan(a: Matrix) -> int:
    """Unblocked Cholesky run only to locate the first failing pivot."""
    n = a.shape[0]
    L = np.zeros_like(a)
    for j in range(n):
        d = a[j, j] - L[j, :j] @ L[j, :j]
        if not np.isfinite(d) or d <= 0.0:
            return j
        L[j, j] = np.sqrt(d)
        if j + 1 < n:
            L[j + 1 :, j] = (a[j + 1 :, j] - L[j + 1 :, :j] @ L[j, :j]) / L[j, j]
    return -1


def cholesky_lower(a: Matrix) -> Matrix:
    """Lower Cholesky factor of an SPD matrix.

    Uses the LAPACK path and, on failure, rescans to report which pivot
    went non-positive.
    """
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"matrix is not square: {a.shape[0]}x{a.shape[1]}", (a.shape,))
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pivot = _cholesky_pivot_scan(a)
        if pivot < 0:
            # LAPACK failed but the scan succeeded: a borderline matrix.
            pivot = a.shape[0] - 1
        raise SingularMatrixError(
            f"matrix is not positive definite (pivot {pivot} of {a.shape[0]})", pivot
        ) from None


def solve_spd(a: Matrix, b: Matrix) -> Matrix:
    """Solve X a = b for X, i.e. compute b @ inv(a), for symmetric PD ``a``.

    ``a`` must be symmetric to 1e-8 relative; the system is solved through
    a Cholesky factorization of ``a`` (transposed triangular solves on bᵀ).
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"matrix is not square: {a.shape[0]}x{a.shape[1]}", (a.shape,))
    if b.shape[1] != a.shape[0]:
        raise DimensionError(
            f"right-hand side has {b.shape[1]} columns, system has {a.shape[0]}",
            (a.shape, b.shape),
        )
    asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    scale = float(np.max(np.abs(a))) if a.size else 0.0
    if asym > 1e-8 * max(scale, 1.0):
        raise DimensionError(f"matrix is not symmetric (max asymmetry {asym:.3e})", (a.shape,))
    L = cholesky_lower(a)
    # X a = b  <=>  a Xᵀ = bᵀ  (a symmetric);  a = L Lᵀ.
    y = scipy.linalg.solve_triangular(L, b.T, lower=True)
    xt = scipy.linalg.solve_triangular(L.T, y, lower=False)
    return np.ascontiguousarray(xt.T)
