"""Linear solvers: one sparse symmetric solve per mesh, many small dense
saddle-point solves per vertex patch.

Both paths are direct factorizations with a backward-error check; an
unexpectedly large residual raises instead of returning garbage.
"""
from __future__ import annotations

import warnings

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

RESIDUAL_RTOL = 1e-10


class LinearSolveError(RuntimeError):
    """Sparse solve failed or did not meet the residual bound."""


class SaddleSolveError(RuntimeError):
    """Dense saddle-point solve failed; carries the offending patch id."""

    def __init__(self, message: str, context: str = ""):
        super().__init__(f"{message}{' [' + context + ']' if context else ''}")
        self.context = context


def solve_spd(A, b, rtol: float = RESIDUAL_RTOL) -> np.ndarray:
    """Direct sparse solve of a symmetric positive definite system.

    The system is symmetrically Jacobi-scaled first (rows can differ by many
    orders of magnitude when basis functions have almost no active support);
    conjugate gradients is the fallback when the factorization fails.  Either
    way the relative residual must satisfy ``||Ax - b|| <= rtol * ||b||``.
    """
    A = sp.csc_matrix(A)
    b = np.asarray(b, float)
    diag = A.diagonal()
    if A.shape[0] and (not np.all(np.isfinite(diag)) or np.any(diag <= 0.0)):
        raise LinearSolveError("matrix diagonal is not positive; system is singular")
    s = 1.0 / np.sqrt(diag) if A.shape[0] else np.ones(0)
    D = sp.diags(s)
    As = sp.csc_matrix(D @ A @ D)
    bs = s * b
    try:
        x = s * spla.splu(As).solve(bs)
    except RuntimeError:
        x, info = spla.cg(As, bs, rtol=1e-13, maxiter=40 * A.shape[0])
        if info != 0:
            raise LinearSolveError(f"conjugate gradients did not converge (info={info})")
        x = s * x
    bnorm = np.linalg.norm(b)
    res = np.linalg.norm(A @ x - b)
    if res > rtol * max(bnorm, 1e-300):
        raise LinearSolveError(
            f"residual {res:.3e} exceeds {rtol:.1e} * ||b|| = {rtol * bnorm:.3e}")
    return x


def _ruiz_scale(M: np.ndarray, passes: int = 3) -> np.ndarray:
    """Symmetric row/column equilibration factors (Ruiz iteration)."""
    s = np.ones(M.shape[0])
    A = M.copy()
    for _ in range(passes):
        r = np.sqrt(np.abs(A).max(axis=1))
        r[r == 0.0] = 1.0
        s /= r
        A = A / r[:, None] / r[None, :]
    return s


def solve_saddle(M, rhs, sym: bool = True, rtol: float = RESIDUAL_RTOL,
                 context: str = "") -> np.ndarray:
    """Direct dense solve of an indefinite (saddle-point) block system.

    Equilibrated symmetrically before factorization: the mass blocks shrink
    with the active area of a cut, so raw rows can span 15+ orders of
    magnitude without the solution itself being ill-defined.
    """
    M = np.asarray(M, float)
    rhs = np.asarray(rhs, float)
    s = _ruiz_scale(M)
    Ms = M * s[:, None] * s[None, :]
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            x = s * sla.solve(Ms, s * rhs, assume_a="sym" if sym else "gen")
    except (sla.LinAlgError, ValueError) as exc:
        raise SaddleSolveError(f"singular saddle system: {exc}", context) from exc
    scale = max(np.linalg.norm(rhs), np.linalg.norm(M, ord=np.inf) * np.linalg.norm(x), 1e-300)
    res = np.linalg.norm(M @ x - rhs)
    if not np.all(np.isfinite(x)) or res > rtol * scale:
        raise SaddleSolveError(
            f"saddle solve residual {res:.3e} exceeds {rtol:.1e} relative", context)
    return x
