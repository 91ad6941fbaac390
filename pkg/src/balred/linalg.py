"""Dense matrix kernels.

Matrix exponential, Lyapunov/Stein solvers, symmetric square-root factors and
symmetric-definite generalized eigenproblems.  Everything here works on plain
``numpy`` arrays; the only structured type is :class:`SymFactor`, a square
root ``F`` of a symmetric positive semidefinite matrix ``M = F F^T``.

The solvers certify their own output: after solving, the residual is
recomputed and a :class:`~balred.errors.ResidualError` is raised if it
exceeds the documented bound.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.linalg

from .errors import (
    DefinitenessError,
    DimensionError,
    NotPSDError,
    ResidualError,
    SingularPencilError,
)

SPECTRUM_TOL = 1e-10
LYAPUNOV_RESIDUAL_TOL = 1e-10
CLIP_TOL = 1e-12


def as_matrix(M, name="matrix"):
    """Return `M` as a finite 2-D float array."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2:
        raise DimensionError(f"{name} must be two-dimensional, got ndim={M.ndim}")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} contains non-finite entries")
    return M


def _square(A, name="A"):
    A = as_matrix(A, name)
    if A.shape[0] != A.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {A.shape}")
    return A


def symmetrize(M):
    return 0.5 * (M + M.T)


@dataclass(frozen=True)
class SymFactor:
    """Square-root factor ``base`` (n x k, k <= n) of ``M = base @ base.T``."""

    base: np.ndarray

    def __post_init__(self):
        base = as_matrix(self.base, "factor")
        if base.shape[1] > base.shape[0]:
            raise DimensionError(
                f"factor has more columns than rows: {base.shape}")
        object.__setattr__(self, "base", base)

    @property
    def n(self):
        return self.base.shape[0]

    @property
    def rank(self):
        return self.base.shape[1]

    @property
    def matrix(self):
        return symmetrize(self.base @ self.base.T)

    @property
    def is_full_rank(self):
        return self.rank == self.n


class EigenPairs(NamedTuple):
    values: np.ndarray
    vectors: np.ndarray


def expm(A, t=1.0):
    """Matrix exponential ``exp(A t)``.

    Scaling and squaring with a diagonal Pade approximant (Al-Mohy & Higham),
    as provided by :func:`scipy.linalg.expm`.
    """
    A = _square(A)
    return scipy.linalg.expm(A * float(t))


def _check_continuous_spectrum(eigs, tol=SPECTRUM_TOL):
    sums = np.abs(eigs[:, None] + eigs[None, :])
    i, j = np.unravel_index(np.argmin(sums), sums.shape)
    if sums[i, j] < tol:
        raise SingularPencilError(
            "spectrum condition violated: eigenvalues "
            f"{eigs[i]:.6g} and {eigs[j]:.6g} satisfy |l_i + l_j| = "
            f"{sums[i, j]:.3g} < {tol:g}")


def _check_discrete_spectrum(eigs, tol=SPECTRUM_TOL):
    prods = np.abs(eigs[:, None] * eigs[None, :] - 1.0)
    i, j = np.unravel_index(np.argmin(prods), prods.shape)
    if prods[i, j] < tol:
        raise SingularPencilError(
            "resonant spectrum: eigenvalues "
            f"{eigs[i]:.6g} and {eigs[j]:.6g} satisfy |l_i l_j - 1| = "
            f"{prods[i, j]:.3g} < {tol:g}")


def continuous_separation(A):
    """Smallest ``|l_i + l_j|`` over all eigenvalue pairs of `A`."""
    eigs = np.linalg.eigvals(_square(A))
    return float(np.min(np.abs(eigs[:, None] + eigs[None, :])))


def _relative_residual(R, W, X):
    scale = max(np.linalg.norm(W), np.linalg.norm(X))
    if scale == 0.0:
        return 0.0
    return np.linalg.norm(R) / scale


def solve_continuous_lyapunov(A, W):
    """Solve ``A X + X A^T + W = 0`` for symmetric `W`.

    Stability of `A` is not required, only that no two eigenvalues of `A`
    sum to zero.

    Raises
    ------
    SingularPencilError
        If ``|l_i + l_j| < 1e-10`` for some eigenvalue pair.
    ResidualError
        If the relative residual of the returned solution exceeds 1e-10.
    """
    A = _square(A)
    W = as_matrix(W, "W")
    if W.shape != A.shape:
        raise DimensionError(f"W has shape {W.shape}, expected {A.shape}")
    _check_continuous_spectrum(np.linalg.eigvals(A))
    X = symmetrize(scipy.linalg.solve_continuous_lyapunov(A, -W))
    res = _relative_residual(A @ X + X @ A.T + W, W, X)
    if res > LYAPUNOV_RESIDUAL_TOL:
        raise ResidualError(f"continuous Lyapunov residual {res:.3g}")
    return X


def solve_discrete_lyapunov(A, W):
    """Solve the Stein equation ``X = A X A^T + W``.

    Raises
    ------
    SingularPencilError
        If ``|l_i l_j - 1| < 1e-10`` for some eigenvalue pair.
    ResidualError
        If the relative residual exceeds 1e-10.
    """
    A = _square(A)
    W = as_matrix(W, "W")
    if W.shape != A.shape:
        raise DimensionError(f"W has shape {W.shape}, expected {A.shape}")
    _check_discrete_spectrum(np.linalg.eigvals(A))
    X = symmetrize(scipy.linalg.solve_discrete_lyapunov(A, W))
    res = _relative_residual(A @ X @ A.T + W - X, W, X)
    if res > LYAPUNOV_RESIDUAL_TOL:
        raise ResidualError(f"discrete Lyapunov residual {res:.3g}")
    return X


def cholesky_psd(M, clip_tol=CLIP_TOL):
    """Square-root factor of a symmetric positive semidefinite matrix.

    The factor is built from the eigendecomposition, ``F = V sqrt(L)``.
    Negative eigenvalues no larger in magnitude than ``clip_tol * ||M||_2``
    are treated as roundoff and clipped to zero; the corresponding columns
    (and those of exactly zero eigenvalues) are dropped, so ``F`` has as many
    columns as `M` has positive eigenvalues.

    Raises
    ------
    NotPSDError
        If an eigenvalue lies below ``-clip_tol * ||M||_2``.
    """
    M = _square(M, "M")
    scale = np.max(np.abs(M)) if M.size else 0.0
    if scale > 0 and np.max(np.abs(M - M.T)) > 1e-12 * scale:
        raise ValueError("matrix is not symmetric")
    lam, V = np.linalg.eigh(symmetrize(M))
    norm2 = max(np.max(np.abs(lam)), 0.0) if lam.size else 0.0
    if norm2 == 0.0:
        return SymFactor(np.zeros((M.shape[0], 0)))
    if lam[0] < -clip_tol * norm2:
        raise NotPSDError(
            f"matrix is not positive semidefinite: eigenvalue {lam[0]:.6g} "
            f"(||M||_2 = {norm2:.6g}, clip_tol = {clip_tol:g})")
    keep = lam > 0
    # eigh sorts ascending; keep the factor columns ordered by decreasing weight
    F = (V[:, keep] * np.sqrt(lam[keep]))[:, ::-1]
    return SymFactor(F)


def factor_from_rows(Y):
    """Square-root factor of ``Y^T Y`` from the triangular factor of ``Y = Q R``.

    Unlike factoring the assembled matrix, this keeps directions whose
    weight is far below ``sqrt(eps)`` of the largest one.
    """
    Y = as_matrix(Y, "rows")
    if Y.shape[0] == 0:
        return SymFactor(np.zeros((Y.shape[1], 0)))
    R = scipy.linalg.qr(Y, mode="r", check_finite=False)[0]
    return SymFactor(R[: min(Y.shape)].T)


def _solver_for(F):
    """Return ``solve(b)`` computing ``F^{-1} b`` and ``solve_t(b)`` for ``F^{-T} b``."""
    if np.array_equal(F, np.triu(F)):
        return (lambda b: scipy.linalg.solve_triangular(F, b, lower=False),
                lambda b: scipy.linalg.solve_triangular(F, b, lower=False, trans="T"))
    if np.array_equal(F, np.tril(F)):
        return (lambda b: scipy.linalg.solve_triangular(F, b, lower=True),
                lambda b: scipy.linalg.solve_triangular(F, b, lower=True, trans="T"))
    lu = scipy.linalg.lu_factor(F)
    return (lambda b: scipy.linalg.lu_solve(lu, b),
            lambda b: scipy.linalg.lu_solve(lu, b, trans=1))


def factor_solvers(factor):
    """Solvers for a full-rank square factor; see :func:`sym_generalized_eig`."""
    F = factor.base
    if not factor.is_full_rank:
        raise DefinitenessError(
            f"factor of shape {F.shape} is not square, so F F^T is singular")
    s = np.linalg.svd(F, compute_uv=False)
    if s[-1] <= F.shape[0] * np.finfo(float).eps * s[0]:
        raise DefinitenessError(
            f"factor is numerically rank deficient (sigma_min/sigma_max = {s[-1] / s[0]:.3g})")
    return _solver_for(F)


def sym_generalized_eig(M, N_factor):
    """Eigenpairs of the symmetric-definite pencil ``(M, N)``, ``N = F F^T``.

    Solves ``M v = l N v`` by whitening: the symmetric matrix
    ``F^{-1} M F^{-T}`` is diagonalised and its eigenvectors mapped back with
    ``F^{-T}``.  Values are returned non-increasing and the vectors are
    N-orthonormal.
    """
    M = _square(M, "M")
    if M.shape[0] != N_factor.n:
        raise DimensionError(f"M is {M.shape}, factor has {N_factor.n} rows")
    solve, solve_t = factor_solvers(N_factor)
    S = solve(solve(M).T).T
    lam, Y = np.linalg.eigh(symmetrize(S))
    order = np.argsort(lam)[::-1]
    return EigenPairs(lam[order], solve_t(Y[:, order]))


def svd(M):
    """Thin singular value decomposition ``M = U diag(S) V^T``."""
    M = as_matrix(M)
    U, S, Vt = np.linalg.svd(M, full_matrices=False)
    return U, S, Vt.T
