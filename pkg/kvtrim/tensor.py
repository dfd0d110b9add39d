"""
Dense kernels shared by every other module. Matrices are 2-D, row-major float64 numpy arrays
with rows as tokens and columns as channels.
"""
import logging
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from kvtrim.exceptions import (
    ChannelIndexException,
    NumericalException,
    PreconditionException,
    ShapeException,
)

logger = logging.getLogger(__name__)

Matrix = NDArray[np.float64]

SVD_TOLERANCE = 1e-10
SVD_MAX_SWEEPS = 100


def as_matrix(data, name: str = "matrix") -> Matrix:
    """
    Coerce nested lists or arrays to a float64 matrix. A 1-D input becomes a single row.
    """
    matrix = np.array(data, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix.reshape(1, -1)
    if matrix.ndim != 2:
        raise ShapeException(f"{name} must be 2-D, got {matrix.ndim} dimensions")
    return matrix


def _ensure_finite(result: Matrix, operation: str) -> Matrix:
    if not np.all(np.isfinite(result)):
        raise NumericalException(f"{operation} produced non-finite entries")
    return result


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeException(f"Cannot multiply {a.shape} by {b.shape}")
    return _ensure_finite(a @ b, "matmul")


def transpose(a: Matrix) -> Matrix:
    return np.ascontiguousarray(a.T)


def row_softmax(a: Matrix, scale: float, allowed: Optional[NDArray[np.bool_]] = None) -> Matrix:
    """
    Softmax of ``a / scale`` along every row, stabilised by subtracting the row maximum.

    :param a: The logits, one row per query.

    :param scale: The positive divisor applied before exponentiation, sqrt(D) for attention.

    :param allowed: Optional boolean matrix shaped like ``a``. Entries that are False receive a
        weight of exactly zero. Each row must allow at least one entry.

    :return: A matrix whose rows are probability vectors.
    """
    if a.size == 0:
        raise PreconditionException("row_softmax needs a non-empty matrix")
    if scale <= 0:
        raise PreconditionException(f"row_softmax scale must be positive, got {scale}")

    logits = a / scale
    if allowed is None:
        row_max = logits.max(axis=1, keepdims=True)
        weights = np.exp(logits - row_max)
    else:
        if allowed.shape != a.shape:
            raise ShapeException(f"Mask shape {allowed.shape} does not match {a.shape}")
        if not np.all(allowed.any(axis=1)):
            raise PreconditionException("Every softmax row needs at least one allowed entry")
        row_max = np.where(allowed, logits, -np.inf).max(axis=1, keepdims=True)
        weights = np.where(allowed, np.exp(np.where(allowed, logits - row_max, 0.0)), 0.0)
    return _ensure_finite(weights / weights.sum(axis=1, keepdims=True), "row_softmax")


def frobenius_norm(a: Matrix) -> float:
    return float(np.sqrt(np.sum(np.square(a))))


def _check_indices(indices: Sequence[int], cols: int) -> NDArray[np.intp]:
    index_array = np.asarray(indices, dtype=np.intp).reshape(-1)
    if index_array.size and (index_array[0] < 0 or index_array[-1] >= cols):
        raise ChannelIndexException(f"Column indices must lie in [0, {cols}), got {list(indices)}")
    if index_array.size > 1 and np.any(np.diff(index_array) <= 0):
        raise ChannelIndexException(f"Column indices must be strictly ascending, got {list(indices)}")
    return index_array


def gather_cols(a: Matrix, indices: Sequence[int]) -> Matrix:
    index_array = _check_indices(indices, a.shape[1])
    return np.ascontiguousarray(a[:, index_array])


def scatter_cols(a: Matrix, indices: Sequence[int], dim: int) -> Matrix:
    """
    Place the columns of ``a`` at ``indices`` of a zero matrix that is ``dim`` columns wide.
    """
    index_array = _check_indices(indices, dim)
    if index_array.size != a.shape[1]:
        raise ShapeException(f"{a.shape[1]} columns cannot fill {index_array.size} indices")
    result = np.zeros((a.shape[0], dim), dtype=np.float64)
    result[:, index_array] = a
    return result


def svd_values(a: Matrix) -> NDArray[np.float64]:
    """
    Singular values of ``a`` in descending order, computed with one-sided Jacobi rotations.

    Columns are rotated pairwise until every pair is orthogonal to within SVD_TOLERANCE
    relative to their norms; the singular values are the final column norms.
    """
    if a.size == 0:
        raise PreconditionException("svd_values needs a non-empty matrix")

    work = np.array(a.T if a.shape[0] < a.shape[1] else a, dtype=np.float64)
    cols = work.shape[1]
    # columns below tolerance relative to the whole matrix are rounding noise and stay unrotated
    negligible = (SVD_TOLERANCE * frobenius_norm(work)) ** 2

    for sweep in range(1, SVD_MAX_SWEEPS + 1):
        off_diagonal = 0.0
        for i in range(cols - 1):
            for j in range(i + 1, cols):
                alpha = float(work[:, i] @ work[:, i])
                beta = float(work[:, j] @ work[:, j])
                gamma = float(work[:, i] @ work[:, j])
                if gamma == 0.0 or alpha <= negligible or beta <= negligible:
                    continue
                coupling = abs(gamma) / np.sqrt(alpha * beta)
                off_diagonal = max(off_diagonal, coupling)
                if coupling < SVD_TOLERANCE:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = (1.0 if zeta >= 0 else -1.0) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                column_i = work[:, i].copy()
                work[:, i] = c * column_i - s * work[:, j]
                work[:, j] = s * column_i + c * work[:, j]
        if off_diagonal < SVD_TOLERANCE:
            logger.debug("Jacobi SVD of %s converged after %d sweeps", a.shape, sweep)
            values = np.sqrt(np.sum(np.square(work), axis=0))
            return _ensure_finite(np.sort(values)[::-1].copy(), "svd_values")

    raise NumericalException(
        f"Jacobi SVD did not converge after {SVD_MAX_SWEEPS} sweeps", iterations=SVD_MAX_SWEEPS
    )
