"""Block-matrix helpers for horizon-stacked operators.

Stacked matrices have ``T + 1`` block rows and columns; a block is
``rows x cols`` with the block sizes passed explicitly.
"""

import numpy as np


def block(M, i, j, rows, cols):
    return M[i * rows:(i + 1) * rows, j * cols:(j + 1) * cols]


def lower_mask(nblk, rows, cols, strict=False):
    """Boolean mask of the entries allowed in a block lower-triangular matrix."""
    k = -1 if strict else 0
    pattern = np.tril(np.ones((nblk, nblk), dtype=bool), k=k)
    return np.kron(pattern, np.ones((rows, cols), dtype=bool))


def diag_mask(nblk, rows, cols):
    return np.kron(np.eye(nblk, dtype=bool), np.ones((rows, cols), dtype=bool))


def max_forbidden(M, mask):
    """Largest absolute entry of ``M`` outside ``mask`` (0 if none)."""
    off = np.abs(M[~mask])
    return float(off.max()) if off.size else 0.0


def induced1(M):
    """Induced 1-norm: maximum absolute column sum."""
    M = np.atleast_2d(M)
    if M.size == 0:
        return 0.0
    return float(np.abs(M).sum(axis=0).max())


def unit_lower_solve(M, rhs, size):
    """Solve ``M X = rhs`` for block unit-lower-triangular ``M``.

    Block forward substitution with ``size x size`` identity diagonal
    blocks; the diagonal is assumed, not read.
    """
    rhs = np.asarray(rhs, dtype=float)
    vec = rhs.ndim == 1
    R = rhs.reshape(rhs.shape[0], -1).copy()
    nblk = M.shape[0] // size
    for i in range(1, nblk):
        lo, hi = i * size, (i + 1) * size
        R[lo:hi] -= M[lo:hi, :lo] @ R[:lo]
    return R[:, 0] if vec else R


def unit_lower_inverse(M, size):
    return unit_lower_solve(M, np.eye(M.shape[0]), size)
