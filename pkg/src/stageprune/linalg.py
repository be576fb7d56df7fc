"""Dense symmetric linear algebra for second-order pruning.

Matrices are plain ``numpy.ndarray`` objects in float64. Layer Hessians are
built as ``H = X @ X.T`` from input activations ``X`` of shape ``(d_in, N)``
and are never normalised by ``N``.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from ._validation import check_index_set, check_matrix
from .exceptions import InvalidInput, SingularHessian

DEFAULT_DAMPING = 0.01


def gram(X) -> np.ndarray:
    """Return ``X @ X.T`` as an exactly symmetric matrix.

    Parameters
    ----------
    X : array-like of shape (d_in, n_columns)
        One column per observed input vector.
    """
    X = check_matrix(X, name="X")
    H = X @ X.T
    # mirror the upper triangle so H == H.T bitwise regardless of BLAS kernel
    upper = np.triu(H)
    return upper + np.triu(H, 1).T


def _cholesky(A: np.ndarray):
    try:
        return scipy.linalg.cho_factor(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularHessian(f"Cholesky factorization failed: {exc}") from exc


def spd_inverse(A) -> np.ndarray:
    """Invert a symmetric positive definite matrix through its Cholesky factor."""
    A = check_matrix(A, name="A", square=True)
    factor = _cholesky(A)
    inv = scipy.linalg.cho_solve(factor, np.eye(A.shape[0]), check_finite=False)
    return 0.5 * (inv + inv.T)


def damping_value(H: np.ndarray, lambda_frac: float) -> float:
    """Absolute damping ``lambda_frac * mean(diag(H))``.

    An all-zero diagonal falls back to ``lambda_frac`` itself so that a
    positive fraction always yields an invertible matrix.
    """
    if lambda_frac < 0:
        raise InvalidInput(f"lambda_frac must be >= 0, got {lambda_frac}")
    scale = float(np.mean(np.diag(H)))
    if scale <= 0.0:
        scale = 1.0
    return lambda_frac * scale


def damped_inverse(H, lambda_frac: float = DEFAULT_DAMPING, *, damp: float | None = None) -> np.ndarray:
    """Return ``(H + lam * I)^-1`` with ``lam = lambda_frac * mean(diag(H))``.

    ``damp`` overrides the computed absolute damping; pruning uses it to keep
    the damping fixed while re-inverting shrinking sub-blocks of ``H``.

    Raises
    ------
    SingularHessian
        If the damped matrix is not positive definite.
    """
    H = check_matrix(H, name="H", square=True)
    lam = damping_value(H, lambda_frac) if damp is None else float(damp)
    return spd_inverse(H + lam * np.eye(H.shape[0]))


def inverse_submatrix_inverse(Hinv, idx) -> np.ndarray:
    """Return ``((Hinv)[idx, idx])^-1`` for the principal block selected by ``idx``."""
    Hinv = check_matrix(Hinv, name="Hinv", square=True)
    idx = check_index_set(idx, Hinv.shape[0], name="idx")
    block = Hinv[np.ix_(idx, idx)]
    if idx.size == 1:
        d = block[0, 0]
        if not d > 0:
            raise SingularHessian(f"non-positive pivot {d} at index {idx[0]}")
        return np.array([[1.0 / d]])
    return spd_inverse(block)
