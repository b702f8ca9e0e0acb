"""Ridge-regularized nonnegative least squares (Lawson-Hanson active set)."""

from __future__ import annotations

import numpy as np


class NNLSError(ValueError):
    pass


class NNLSIterationError(NNLSError):
    pass


def nnls_solve(A, y, ridge: float = 0.0, tol: float = None, return_info: bool = False):
    """Minimize ||A x - y||^2 + ridge * ||x||^2 subject to x >= 0.

    The ridge term is handled by augmenting the system with sqrt(ridge) * I.
    Columns enter the passive set by largest dual value; ties go to the
    lowest index. Raises NNLSIterationError after 10 * n outer iterations.

    Returns
    -------
    x : ndarray, shape (n,)
    info : dict, only when ``return_info`` is set
        ``iterations`` and ``gradient`` (of the objective at x).
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    m, n = A.shape
    if m < 1 or n < 1:
        raise NNLSError("A must have at least one row and one column")
    if len(y) != m:
        raise NNLSError(f"A has {m} rows, y has {len(y)} entries")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(y)) and np.isfinite(ridge)):
        raise NNLSError("non-finite input")
    if ridge < 0:
        raise NNLSError("ridge must be non-negative")

    if ridge > 0:
        A_aug = np.vstack([A, np.sqrt(ridge) * np.eye(n)])
        y_aug = np.concatenate([y, np.zeros(n)])
    else:
        A_aug, y_aug = A, y
    if tol is None:
        tol = 10 * np.finfo(float).eps * max(m, n) * max(1.0, np.abs(A_aug).max()) * max(1.0, np.abs(y).max())

    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    w = A_aug.T @ y_aug
    max_iter = 10 * n
    it = 0
    while not passive.all():
        cand = np.where(passive, -np.inf, w)
        j = int(np.argmax(cand))
        if cand[j] <= tol:
            break
        it += 1
        if it > max_iter:
            raise NNLSIterationError(f"no convergence within {max_iter} iterations")
        before = passive.copy()
        passive[j] = True
        while True:
            idx = np.flatnonzero(passive)
            z = np.zeros(n)
            z[idx] = np.linalg.lstsq(A_aug[:, idx], y_aug, rcond=None)[0]
            if np.all(z[idx] > 0):
                x = z
                break
            # move from x toward z until the first passive variable reaches zero
            neg = idx[z[idx] <= 0]
            gap = x[neg] - z[neg]
            alpha = np.min(np.where(gap > 0, x[neg] / np.where(gap > 0, gap, 1.0), 0.0))
            x = x + alpha * (z - x)
            passive &= x > tol
            x[~passive] = 0.0
        w = A_aug.T @ (y_aug - A_aug @ x)
        if np.array_equal(passive, before):
            # entering column was rejected at once: its dual value is rounding noise
            break
    if return_info:
        grad = 2.0 * (A.T @ (A @ x - y) + ridge * x)
        return x, {"iterations": it, "gradient": grad}
    return x
