"""Jacobi-preconditioned conjugate gradient for sparse SPD systems.

The right-hand side may carry several columns; each column runs its own
CG recurrence, vectorized across columns, and stops independently.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, SolverDivergence


def conjugate_gradient(A, b, tol: float = 1e-8, max_iters: int | None = None,
                       x0=None, precondition: bool = True) -> np.ndarray:
    """Solve ``A x = b`` until ``||A x - b|| <= tol * ||b||`` for every column.

    ``A`` is a dense array or scipy sparse matrix, assumed SPD.  ``b`` is
    ``(n,)`` or ``(n, k)``.  Raises SolverDivergence if some column has
    not converged after ``max_iters`` iterations (default ``10 n``), or if
    a non-positive curvature shows up.
    """
    b = np.asarray(b, dtype=np.float64)
    vector = b.ndim == 1
    B = b[:, None] if vector else b
    n = A.shape[0]
    if A.shape != (n, n) or B.shape[0] != n:
        raise DimensionMismatch(f"operator {A.shape} incompatible with rhs {b.shape}")
    if max_iters is None:
        max_iters = 10 * n
    if precondition:
        diag = np.asarray(A.diagonal(), dtype=np.float64)
        if np.any(diag <= 0):
            raise SolverDivergence("operator has a non-positive diagonal entry")
        inv_diag = (1.0 / diag)[:, None]
    else:
        inv_diag = np.ones((n, 1))

    X = np.zeros_like(B) if x0 is None else np.array(np.reshape(x0, B.shape), dtype=np.float64)
    bnorm = np.linalg.norm(B, axis=0)
    target = tol * bnorm
    R = B - A @ X if x0 is not None else B.copy()
    active = np.linalg.norm(R, axis=0) > target
    # a zero right-hand side has the zero solution
    zero_rhs = bnorm == 0
    X[:, zero_rhs] = 0.0
    active &= ~zero_rhs
    Z = inv_diag * R
    P = Z.copy()
    rz = np.einsum("ij,ij->j", R, Z)
    it = 0
    while active.any():
        if it >= max_iters:
            worst = np.max(np.linalg.norm(R[:, active], axis=0) / bnorm[active])
            raise SolverDivergence(f"CG did not converge in {max_iters} iterations "
                                   f"(relative residual {worst:.3e})")
        cols = np.flatnonzero(active)
        Pa = P[:, cols]
        AP = A @ Pa
        curv = np.einsum("ij,ij->j", Pa, AP)
        if np.any(curv <= 0):
            raise SolverDivergence("non-positive curvature: operator is not SPD")
        alpha = rz[cols] / curv
        X[:, cols] += alpha * Pa
        R[:, cols] -= alpha * AP
        Zc = inv_diag * R[:, cols]
        rz_new = np.einsum("ij,ij->j", R[:, cols], Zc)
        beta = rz_new / rz[cols]
        P[:, cols] = Zc + beta * Pa
        rz[cols] = rz_new
        done = np.linalg.norm(R[:, cols], axis=0) <= target[cols]
        if done.any():
            # confirm against the true residual before retiring a column
            fin = cols[done]
            true_r = B[:, fin] - A @ X[:, fin]
            ok = np.linalg.norm(true_r, axis=0) <= target[fin]
            active[fin[ok]] = False
            R[:, fin[~ok]] = true_r[:, ~ok]
        it += 1
    return X[:, 0] if vector else X


def as_operator(A):
    if sp.issparse(A):
        return A.tocsr()
    return np.asarray(A, dtype=np.float64)
