"""Incremental 4D-Var for linear time-invariant models.

Strong-constraint cost for the initial state,

    J(x0) = 1/2 ||x0 - xb||^2_{Gamma_pr^{-1}}
          + 1/2 sum_{k=0}^{n} ||m_k - C A^k x0||^2_{Gamma_eps^{-1}},

minimized by an outer loop of Gauss-Newton increments.  The inner loop can
run on a balanced reduced model built once from the discrete Gramians.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import linalg
from .errors import DimensionError, ResidualError
from .gramians import TIME_LIMITED, GramianPair, tl_noisy_observability
from .linalg import SymFactor, as_matrix, symmetrize
from .models import LtiSystem

log = logging.getLogger(__name__)

NORMAL_RESIDUAL_TOL = 1e-10


@dataclass(frozen=True)
class FourDVarProblem:
    """Discrete LTI model, background, prior and observations ``m_0..m_n``."""

    model: LtiSystem
    background: np.ndarray
    prior_factor: SymFactor
    noise_cov: np.ndarray
    observations: np.ndarray

    def __post_init__(self):
        if not self.model.is_discrete:
            raise ValueError("4D-Var needs a discrete-time model")
        d, p = self.model.d, self.model.d_out
        xb = np.asarray(self.background, dtype=float).ravel()
        if xb.size != d:
            raise DimensionError(f"background has {xb.size} entries, expected {d}")
        S = self.prior_factor
        if not isinstance(S, SymFactor):
            S = SymFactor(S)
        if S.base.shape != (d, d):
            raise DimensionError(f"prior factor must be {d} x {d}, got {S.base.shape}")
        R = as_matrix(self.noise_cov, "noise_cov")
        if R.shape != (p, p):
            raise DimensionError(f"noise_cov must be {p} x {p}, got {R.shape}")
        m = np.asarray(self.observations, dtype=float)
        if m.ndim == 1:
            m = m.reshape(-1, p)
        if m.ndim != 2 or m.shape[1] != p or m.shape[0] < 1:
            raise DimensionError(f"observations must be (n+1) x {p}, got {m.shape}")
        object.__setattr__(self, "background", xb)
        object.__setattr__(self, "prior_factor", S)
        object.__setattr__(self, "noise_cov", R)
        object.__setattr__(self, "observations", m)

    @property
    def n(self):
        """Index of the last observation (there are ``n + 1``)."""
        return self.observations.shape[0] - 1


@dataclass(frozen=True)
class OuterLoopResult:
    x0: np.ndarray
    iterations: int
    cost_trace: list
    converged: bool


def _noise_chol(problem):
    return np.linalg.cholesky(problem.noise_cov)


def _whitened_operator(A, C, Lr, count):
    """Rows ``L^{-1} C A^k`` for ``k = 0..count-1`` stacked, ``(count d_out) x d``."""
    blocks = []
    Z = C
    for _ in range(count):
        blocks.append(Z)
        Z = Z @ A
    G = np.vstack(blocks)
    p = C.shape[0]
    return scipy.linalg.solve_triangular(
        Lr, G.reshape(count, p, -1).transpose(1, 0, 2).reshape(p, -1), lower=True
    ).reshape(p, count, -1).transpose(1, 0, 2).reshape(count * p, -1)


def _whiten(Lr, blocks):
    return scipy.linalg.solve_triangular(Lr, blocks.T, lower=True).T.ravel()


def model_outputs(problem, x0):
    """``C A^k x0`` for ``k = 0..n`` as an ``(n+1, d_out)`` array."""
    out = np.empty_like(problem.observations)
    x = np.asarray(x0, dtype=float)
    for k in range(problem.n + 1):
        out[k] = problem.model.C @ x
        x = problem.model.A @ x
    return out


def cost(problem, x0):
    x0 = np.asarray(x0, dtype=float).ravel()
    solve, _ = linalg.factor_solvers(problem.prior_factor)
    b = solve(x0 - problem.background)
    r = _whiten(_noise_chol(problem), problem.observations - model_outputs(problem, x0))
    return 0.5 * float(b @ b) + 0.5 * float(r @ r)


def gradient(problem, x0):
    x0 = np.asarray(x0, dtype=float).ravel()
    solve, solve_t = linalg.factor_solvers(problem.prior_factor)
    Lr = _noise_chol(problem)
    W = _whitened_operator(problem.model.A, problem.model.C, Lr, problem.n + 1)
    r = _whiten(Lr, problem.observations - model_outputs(problem, x0))
    return solve_t(solve(x0 - problem.background)) - W.T @ r


def _solve_whitened(Sb, W, shift, dw):
    """Minimize ``1/2 ||y - Sb^{-1} shift||^2 + 1/2 ||W Sb y - dw||^2`` over ``y``.

    Normal equations ``(I + Gt^T Gt) y = Sb^{-1} shift + Gt^T dw`` with
    ``Gt = W Sb``; returns ``y`` after checking the residual.
    """
    solve, _ = linalg.factor_solvers(Sb)
    Gt = W @ Sb.base
    K = symmetrize(np.eye(Gt.shape[1]) + Gt.T @ Gt)
    rhs = solve(shift) + Gt.T @ dw
    y = scipy.linalg.cho_solve(scipy.linalg.cho_factor(K, lower=True), rhs)
    res = np.linalg.norm(K @ y - rhs)
    scale = np.linalg.norm(rhs)
    if scale > 0 and res > NORMAL_RESIDUAL_TOL * scale:
        raise ResidualError(f"normal-equation residual {res / scale:.3g}")
    return y


def inner_loop_solve(problem, current_x0):
    """Gauss-Newton increment from `current_x0` for the full model.

    Solves ``(Gamma_pr^{-1} + sum_k (A^k)^T C^T Gamma^{-1} C A^k) dx
    = Gamma_pr^{-1}(xb - x) + sum_k (A^k)^T C^T Gamma^{-1} d_k`` with
    innovations ``d_k = m_k - C A^k x``, in prior-whitened form.
    """
    x = np.asarray(current_x0, dtype=float).ravel()
    Lr = _noise_chol(problem)
    W = _whitened_operator(problem.model.A, problem.model.C, Lr, problem.n + 1)
    dw = _whiten(Lr, problem.observations - model_outputs(problem, x))
    S = problem.prior_factor
    return S.base @ _solve_whitened(S, W, problem.background - x, dw)


def reduced_inner_loop(problem, reduction, current_x0):
    """Increment from the reduced model ``(A_r, C_r)`` lifted by ``T``.

    Innovations come from the full model; the background term uses the
    reduced prior ``T_inv Gamma_pr T_inv^T`` and the shifted background
    ``T_inv (xb - x)``.
    """
    x = np.asarray(current_x0, dtype=float).ravel()
    if reduction.T.shape[0] != problem.model.d:
        raise DimensionError("reduction does not match the problem's state dimension")
    Lr = _noise_chol(problem)
    W = _whitened_operator(reduction.reduced_A, reduction.reduced_C, Lr, problem.n + 1)
    dw = _whiten(Lr, problem.observations - model_outputs(problem, x))
    prior = reduction.reduced_prior
    if prior is None:
        prior = symmetrize(reduction.T_inv @ problem.prior_factor.matrix @ reduction.T_inv.T)
    Sr = SymFactor(np.linalg.cholesky(prior))
    y = _solve_whitened(Sr, W, reduction.T_inv @ (problem.background - x), dw)
    return reduction.T @ (Sr.base @ y)


def outer_loop(problem, reduction=None, tol=1e-10, max_iter=20):
    """Outer loop ``x <- x + dx`` from the background.

    Stops as soon as an increment satisfies ``||dx|| <= tol (1 + ||x||)``;
    ``iterations`` counts the increments applied before that.  For a
    linear model the first full increment is exact, so the unreduced loop
    reports one iteration.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    x = problem.background.copy()
    trace = [cost(problem, x)]
    for i in range(max_iter + 1):
        if reduction is None:
            dx = inner_loop_solve(problem, x)
        else:
            dx = reduced_inner_loop(problem, reduction, x)
        if np.linalg.norm(dx) <= tol * (1.0 + np.linalg.norm(x)):
            return OuterLoopResult(x, i, trace, True)
        if i == max_iter:
            break
        x = x + dx
        trace.append(cost(problem, x))
    log.warning("outer loop did not converge within %d iterations", max_iter)
    return OuterLoopResult(x, max_iter, trace, False)


def fourdvar_gramians(problem, method="auto"):
    """Prior and discrete observability Gramian summed over ``k = 0..n``."""
    obs = tl_noisy_observability(problem.model, problem.noise_cov, problem.n + 1, method)
    return GramianPair(problem.prior_factor, obs, TIME_LIMITED, t_e=problem.n + 1)
