"""Dense linear-algebra primitives: truncated SVD, Frobenius products, orthonormality.

Everything here is a pure function over immutable inputs and is safe to call
concurrently.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionError, InvalidRankError
from .validation import as_matrix, check_same_shape


@dataclass(frozen=True)
class SvdResult:
    """Rank-R factorization ``w ~= u @ diag(sigma) @ v.T``.

    Attributes
    ----------
    u : ndarray of shape (m, R)
        Orthonormal columns (left singular vectors).
    sigma : ndarray of shape (R,)
        Singular values, nonnegative and descending.
    v : ndarray of shape (n, R)
        Orthonormal columns (right singular vectors).
    """

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray


def _fix_signs(u, v):
    # Deterministic sign convention: the largest-magnitude entry of each left
    # singular vector is made positive (first index wins on ties).
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    u *= signs
    v *= signs


def truncated_svd(w, rank):
    """Best rank-``rank`` factorization of ``w`` with a fixed sign convention.

    Uses a deterministic dense solver; the reconstruction ``u @ diag(sigma) @
    v.T`` is the optimal rank-``rank`` approximation of ``w`` in Frobenius
    norm, and its squared residual equals the sum of the squared discarded
    singular values.

    Raises
    ------
    InvalidRankError
        If ``rank`` is not in ``[1, min(w.shape)]``.
    DegenerateInputError
        If ``w`` has non-finite entries.
    """
    w = as_matrix(w, "w")
    rank = int(rank)
    max_rank = min(w.shape)
    if rank < 1 or rank > max_rank:
        raise InvalidRankError(
            f"rank must be in [1, {max_rank}] for a {w.shape[0]}x{w.shape[1]} matrix, got {rank}"
        )
    u, sigma, vt = np.linalg.svd(w, full_matrices=False)
    u = u[:, :rank].copy()
    sigma = sigma[:rank].copy()
    v = vt[:rank].T.copy()
    _fix_signs(u, v)
    return SvdResult(u=u, sigma=sigma, v=v)


def frobenius_inner(x, y):
    """Frobenius inner product ``sum_ij x_ij * y_ij`` of two same-shape matrices."""
    x = as_matrix(x, "x")
    y = as_matrix(y, "y")
    check_same_shape(x, y)
    return float(np.tensordot(x, y, axes=2))


def orthonormality_defect(q):
    """Max-norm deviation of ``q.T @ q`` from the identity.

    ``q`` must have at least as many rows as columns. Returns 0 exactly when
    the columns of ``q`` are orthonormal.
    """
    q = as_matrix(q, "q")
    rows, cols = q.shape
    if cols > rows:
        raise DimensionError(f"q must have cols <= rows, got {q.shape}")
    gram = q.T @ q
    return float(np.abs(gram - np.eye(cols)).max())
