"""Sparse factorizations, Krylov solvers, and matrix exchange formats.

Everything here is deterministic: factorizations use a fixed
fill-reducing ordering and the iterative solvers use plain sequential
reductions, so repeated runs on the same inputs are bitwise identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SingularMatrixError(RuntimeError):
    """A factorization hit a (numerically) zero pivot."""


class ConvergenceFailure(RuntimeError):
    """An iterative solver exhausted its iteration budget."""

    def __init__(self, message: str, x: np.ndarray, iterations: int,
                 residuals: list[float]):
        super().__init__(message)
        self.x = x
        self.iterations = iterations
        self.residuals = residuals


@dataclass
class Factorization:
    """LU factorization handle for a sparse symmetric positive matrix."""

    lu: spla.SuperLU
    shape: tuple[int, int]

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self.lu.solve(b)


def factorize(A: sp.spmatrix) -> Factorization:
    """Factorize a sparse matrix with a minimum-degree column ordering.

    Raises SingularMatrixError (with the offending pivot index) when a
    diagonal pivot of U vanishes.
    """
    A = sp.csc_matrix(A)
    try:
        lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A",
                       options=dict(SymmetricMode=True))
    except RuntimeError as exc:
        # SuperLU reports "Factor is exactly singular" with no index;
        # recover one from the diagonal structure.
        raise SingularMatrixError(f"sparse factorization failed: {exc}") from exc
    du = np.abs(lu.U.diagonal())
    scale = du.max() if du.size else 1.0
    bad = np.flatnonzero(du <= 1e-14 * max(scale, 1.0))
    if bad.size:
        raise SingularMatrixError(
            f"zero pivot at elimination index {int(bad[0])}"
        )
    return Factorization(lu=lu, shape=A.shape)


def dense_spd_solve(M: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Direct solve of a small dense symmetric positive definite system."""
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return np.zeros_like(np.asarray(b, dtype=float))
    try:
        c = scipy.linalg.cho_factor(M, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(f"dense SPD solve failed: {exc}") from exc
    return scipy.linalg.cho_solve(c, b)


def cg(apply_A, b: np.ndarray, apply_Minv=None, tol: float = 1e-10,
       maxit: int = 10_000) -> tuple[np.ndarray, int]:
    """Preconditioned conjugate gradients with a relative residual test.

    Convergence is declared when the preconditioned residual norm drops
    below ``tol`` times its initial value (with a tiny absolute floor so
    a zero right-hand side terminates immediately).  Raises
    ConvergenceFailure carrying the best iterate if ``maxit`` is hit.
    """
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b)
    r = b.copy()
    z = apply_Minv(r) if apply_Minv is not None else r
    p = z.copy()
    rz = float(r @ z)
    norm0 = max(np.sqrt(abs(rz)), 1e-50)
    residuals = [1.0]
    if norm0 <= 1e-50:
        return x, 0
    for it in range(1, maxit + 1):
        Ap = apply_A(p)
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            raise ConvergenceFailure(
                f"operator not positive definite at iteration {it}"
                f" (p^T A p = {pAp:.3e})", x, it, residuals)
        alpha = rz / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        z = apply_Minv(r) if apply_Minv is not None else r
        rz_new = float(r @ z)
        res = np.sqrt(abs(rz_new)) / norm0
        residuals.append(res)
        if res < tol:
            return x, it
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise ConvergenceFailure(
        f"CG did not reach tol={tol:g} in {maxit} iterations "
        f"(last residual {residuals[-1]:.3e})", x, maxit, residuals)


def projected_pcg(apply_F, apply_P, d: np.ndarray, lambda0: np.ndarray,
                  apply_Minv=None, tol: float = 1e-10, maxit: int = 10_000,
                  constraint_check=None, reortho: bool = False,
                  trace: list[float] | None = None) -> tuple[np.ndarray, int]:
    """Projected preconditioned CG for constrained dual problems.

    Solves ``P F lambda = P d`` starting from ``lambda0`` (which must
    already satisfy the affine constraint; ``constraint_check(lambda0)``
    is invoked when given and must raise on violation).  Search
    directions are projected before and after preconditioning, so all
    iterates stay on the constraint manifold.  ``reortho=True`` keeps
    the full direction history and re-orthogonalizes each new residual,
    for diagnostics on hard problems.
    """
    lam = np.asarray(lambda0, dtype=float).copy()
    if constraint_check is not None:
        constraint_check(lam)
    r = apply_P(d - apply_F(lam))
    z = apply_P(apply_Minv(r)) if apply_Minv is not None else r
    p = z.copy()
    rz = float(r @ z)
    norm0 = max(np.sqrt(abs(rz)), 1e-50)
    residuals = [1.0]
    history: list[tuple[np.ndarray, float]] = []
    if norm0 <= 1e-50:
        return lam, 0
    for it in range(1, maxit + 1):
        Fp = apply_F(p)
        pFp = float(p @ Fp)
        if pFp <= 0.0:
            raise ConvergenceFailure(
                f"projected operator indefinite at iteration {it}"
                f" (p^T F p = {pFp:.3e})", lam, it, residuals)
        alpha = rz / pFp
        lam = lam + alpha * p
        r = r - alpha * apply_P(Fp)
        z = apply_P(apply_Minv(r)) if apply_Minv is not None else r
        rz_new = float(r @ z)
        res = np.sqrt(abs(rz_new)) / norm0
        residuals.append(res)
        if trace is not None:
            trace.append(res)
        if res < tol:
            return lam, it
        if reortho:
            history.append((p, Fp, pFp))
            p = z.copy()
            for q, Fq, qFq in history:
                p -= (float(Fq @ z) / qFq) * q
        else:
            p = z + (rz_new / rz) * p
        rz = rz_new
    raise ConvergenceFailure(
        f"projected CG did not reach tol={tol:g} in {maxit} iterations "
        f"(last residual {residuals[-1]:.3e})", lam, maxit, residuals)


# ---------------------------------------------------------------------------
# Matrix Market exchange


def write_matrix_market(path, A: sp.spmatrix) -> None:
    """Write a sparse matrix in coordinate format, symmetric when it is."""
    A = sp.coo_matrix(A)
    sym = "general"
    if A.shape[0] == A.shape[1]:
        diff = abs(A - A.T)
        if diff.nnz == 0 or abs(diff).max() <= 1e-14 * max(abs(A).max(), 1.0):
            sym = "symmetric"
    scipy.io.mmwrite(str(path), A, symmetry=sym)


def read_matrix_market(path) -> sp.csr_matrix:
    return sp.csr_matrix(scipy.io.mmread(str(path)))
