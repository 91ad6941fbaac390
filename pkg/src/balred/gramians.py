"""Reachability and observability Gramians.

Infinite, time-limited, noise-weighted and discrete-sum Gramians, the Fisher
matrix, and prior compatibility.  Gramians are handed on as
:class:`~balred.linalg.SymFactor` square roots because balanced truncation
only ever needs ``P = R R^T`` and ``Q = L L^T`` through their factors.

Time-limited continuous Gramians have two routes:

* the modified Lyapunov equation, e.g. for reachability
  ``A P + P A^T = -B B^T + B_e B_e^T`` with ``B_e = exp(A t_e) B``, which
  stays valid for unstable `A` as long as no two eigenvalues sum to zero;
* composite Gauss-Legendre quadrature of the defining integral.

``method="auto"`` uses the first when the spectrum is comfortably separated
and otherwise (or when its residual certificate fails) the second.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import linalg
from .errors import (
    ConvergenceError,
    DefinitenessError,
    DimensionError,
    NumericalError,
    StabilityError,
)
from .linalg import SymFactor, as_matrix, symmetrize
from .models import require_stable

log = logging.getLogger(__name__)

INFINITE = "infinite"
TIME_LIMITED = "time_limited"
FISHER = "fisher"
PRIOR = "prior"

# Gramians computed through a Lyapunov solve carry forward errors well above
# eps * ||X||; a looser clip keeps them from being rejected as indefinite.
GRAMIAN_CLIP_TOL = 1e-9
# The Lyapunov route is used only if min |l_i + l_j| >= ROUTE_SEPARATION * ||A||.
ROUTE_SEPARATION = 1e-8
QUAD_NODES = 8
QUAD_MAX_PANELS = 2**14
COMPATIBILITY_TOL = 1e-10


@dataclass(frozen=True)
class GramianPair:
    """Square-root factors of a reachability/observability Gramian pair."""

    reach_factor: SymFactor
    obs_factor: SymFactor
    provenance: str
    t_e: float | None = None
    residuals: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.reach_factor.n != self.obs_factor.n:
            raise DimensionError(
                f"Gramian factors disagree in dimension: {self.reach_factor.n} "
                f"vs {self.obs_factor.n}")

    @property
    def P(self):
        return self.reach_factor.matrix

    @property
    def Q(self):
        return self.obs_factor.matrix


def _factor(M):
    return linalg.cholesky_psd(symmetrize(M), clip_tol=GRAMIAN_CLIP_TOL)


def _noise_weight(C, noise_cov):
    """``C^T Gamma^{-1} C`` and its thin factor ``C^T L^{-T}``."""
    noise_cov = as_matrix(noise_cov, "noise_cov")
    if noise_cov.shape != (C.shape[0], C.shape[0]):
        raise DimensionError(
            f"noise_cov must be {C.shape[0]} x {C.shape[0]}, got {noise_cov.shape}")
    L = np.linalg.cholesky(noise_cov)
    F = np.linalg.solve(L, C).T
    return F @ F.T, F


# Infinite Gramians -----------------------------------------------------------

def _stable_gramian(system, A, W):
    if system.is_discrete:
        return linalg.solve_discrete_lyapunov(A, W)
    return linalg.solve_continuous_lyapunov(A, W)


def infinite_reachability(system, B):
    require_stable(system, "the infinite reachability Gramian")
    B = as_matrix(B, "B")
    return _factor(_stable_gramian(system, system.A, B @ B.T))


def infinite_observability(system, noise_cov):
    """``Q`` with ``A^T Q + Q A = -C^T Gamma^{-1} C`` (or the Stein form)."""
    require_stable(system, "the infinite observability Gramian")
    W, _ = _noise_weight(system.C, noise_cov)
    return _factor(_stable_gramian(system, system.A.T, W))


def infinite_gramians(system, B, noise_cov):
    return GramianPair(infinite_reachability(system, B),
                       infinite_observability(system, noise_cov), INFINITE)


# Quadrature ------------------------------------------------------------------

def _quadrature(A, F, t_e, panels):
    """Composite Gauss-Legendre rule for ``int_0^t_e exp(A^T s) F F^T exp(A s) ds``.

    The rule is a sum of outer products of weighted rows ``F^T exp(A s_i)``;
    the rows are compressed on the fly by QR and the triangular factor ``R``
    with ``rule = R^T R`` is returned.
    """
    x, w = np.polynomial.legendre.leggauss(QUAD_NODES)
    width = t_e / panels
    offsets = 0.5 * width * (x + 1.0)
    sqrt_w = np.sqrt(0.5 * width * w)
    d, k = F.shape
    E_nodes = np.hstack([linalg.expm(A, s) for s in offsets])  # d x (p d)
    step = linalg.expm(A, width)
    Z = F.T.copy()
    R = np.zeros((0, d))
    batch = max(1, 4 * d // (QUAD_NODES * k))
    rows = []
    for i in range(panels):
        Y = (Z @ E_nodes).reshape(k, QUAD_NODES, d)
        rows.append((Y * sqrt_w[None, :, None]).reshape(-1, d))
        Z = Z @ step
        if len(rows) == batch or i == panels - 1:
            R = scipy.linalg.qr(np.vstack([R] + rows), mode="r", check_finite=False)[0][:d]
            rows = []
    return R


def _adaptive_quadrature(A, F, t_e, tol):
    """Refine the quadrature until it converges; returns ``(X, factor)``."""
    d = A.shape[0]
    if F.shape[1] == 0:
        return np.zeros((d, d)), SymFactor(np.zeros((d, 0)))
    R = _quadrature(A, F, t_e, 1)
    prev = R.T @ R
    panels = 2
    while panels <= QUAD_MAX_PANELS:
        R = _quadrature(A, F, t_e, panels)
        cur = symmetrize(R.T @ R)
        change = np.linalg.norm(cur - prev) / max(np.linalg.norm(cur), np.finfo(float).tiny)
        if change < tol:
            return cur, SymFactor(R.T)
        prev, panels = cur, 2 * panels
    raise ConvergenceError(
        f"Gramian quadrature did not converge to {tol:g} within "
        f"{QUAD_MAX_PANELS} panels (last relative change {change:.3g})")


def quadrature_gramian(system, weight, side, t_e, tol=1e-10):
    """Time-limited Gramian by adaptive composite Gauss-Legendre quadrature.

    Integrates ``exp(A s) W exp(A^T s)`` (``side="reach"``) or
    ``exp(A^T s) W exp(A s)`` (``side="obs"``) over ``[0, t_e]``, doubling the
    number of equal panels until two successive results agree to `tol` in
    relative Frobenius norm.
    """
    if system.is_discrete:
        raise ValueError("quadrature applies to continuous-time systems only")
    if t_e <= 0 or tol <= 0:
        raise ValueError("t_e and tol must be positive")
    if side not in ("obs", "reach"):
        raise ValueError(f"side must be 'reach' or 'obs', got {side!r}")
    weight = as_matrix(weight, "weight")
    if weight.shape != (system.d, system.d):
        raise DimensionError(f"weight must be {system.d} x {system.d}, got {weight.shape}")
    F = linalg.cholesky_psd(symmetrize(weight)).base
    A = system.A if side == "obs" else system.A.T
    return _adaptive_quadrature(A, F, t_e, tol)[1]


# Time-limited Gramians -------------------------------------------------------

def _lyapunov_route_ok(A):
    sep = linalg.continuous_separation(A)
    return sep >= max(linalg.SPECTRUM_TOL, ROUTE_SEPARATION * np.linalg.norm(A, 2)), sep


def _tl_continuous(A, F, t_e, method, tol):
    """``int_0^t_e exp(A^T s) F F^T exp(A s) ds`` by the modified Lyapunov
    equation ``A^T X + X A = -F F^T + E^T F F^T E``, ``E = exp(A t_e)``,
    or by quadrature.  Returns ``(X, factor, route)``."""
    if method not in ("auto", "lyapunov", "quadrature"):
        raise ValueError(f"unknown method {method!r}")
    if method != "quadrature":
        ok, sep = _lyapunov_route_ok(A)
        if ok or method == "lyapunov":
            Fe = linalg.expm(A, t_e).T @ F
            try:
                X = linalg.solve_continuous_lyapunov(A.T, F @ F.T - Fe @ Fe.T)
                return X, _factor(X), "lyapunov"
            except NumericalError as exc:
                if method == "lyapunov":
                    raise
                log.info("Lyapunov route failed (%s); using quadrature", exc)
        else:
            log.info("eigenvalue separation %.3g too small for the Lyapunov "
                     "route; using quadrature", sep)
    return (*_adaptive_quadrature(A, F, t_e, tol), "quadrature")


def _discrete_steps(t_e):
    k = int(round(t_e))
    if k < 0 or abs(k - t_e) > 1e-12:
        raise ValueError(f"discrete end time must be a non-negative integer, got {t_e}")
    return k


def discrete_sum(A, F, steps):
    """``sum_{k=0}^{steps-1} (A^T)^k F F^T A^k`` by explicit accumulation."""
    d = A.shape[0]
    X = np.zeros((d, d))
    Z = F.T.copy()
    for _ in range(steps):
        X += Z.T @ Z
        Z = Z @ A
    return symmetrize(X)


def _tl_discrete(A, F, steps, method):
    """Discrete time-limited Gramian ``X = A^T X A + F F^T - (A^T)^k F F^T A^k``.

    Returns ``(X, factor, route)``.
    """
    if method != "sum":
        Fk = np.linalg.matrix_power(A, steps).T @ F
        try:
            X = linalg.solve_discrete_lyapunov(A.T, F @ F.T - Fk @ Fk.T)
            return X, _factor(X), "stein"
        except NumericalError as exc:
            if method == "lyapunov":
                raise
            log.info("Stein route failed (%s); summing explicitly", exc)
    X = discrete_sum(A, F, steps)
    return X, _factor(X), "sum"


def _tl_matrix(system, F, t_e, side, method, tol):
    A = system.A if side == "obs" else system.A.T
    if system.is_discrete:
        return _tl_discrete(A, F, _discrete_steps(t_e),
                            "sum" if method == "quadrature" else method)
    if t_e <= 0:
        raise ValueError("t_e must be positive")
    return _tl_continuous(A, F, t_e, method, tol)


def tl_reachability(system, B, t_e, method="auto", tol=1e-10):
    """Time-limited reachability Gramian over ``[0, t_e]`` (continuous) or the
    sum ``k = 0..t_e-1`` (discrete)."""
    B = as_matrix(B, "B")
    return _tl_matrix(system, B, t_e, "reach", method, tol)[1]


def tl_noisy_observability(system, noise_cov, t_e, method="auto", tol=1e-10):
    """Noise-weighted time-limited observability Gramian.

    Continuous: ``int_0^t_e exp(A^T s) C^T Gamma^{-1} C exp(A s) ds``.
    Discrete: ``sum_{k=0}^{t_e-1} (A^T)^k C^T Gamma^{-1} C A^k``.
    """
    _, F = _noise_weight(system.C, noise_cov)
    return _tl_matrix(system, F, t_e, "obs", method, tol)[1]


def tl_noisy_observability_matrix(system, noise_cov, t_e, method="auto", tol=1e-10):
    """As :func:`tl_noisy_observability` but returns ``(Q, route)``."""
    _, F = _noise_weight(system.C, noise_cov)
    X, _, route = _tl_matrix(system, F, t_e, "obs", method, tol)
    return X, route


# Data-assimilation Gramian pairs ---------------------------------------------

def fisher_matrix(setup):
    """``H = sum_k exp(A^T t_k) C^T Gamma^{-1} C exp(A t_k)``."""
    from .inference import forward_map

    return forward_map(setup).fisher()


def lg_gramians(setup, kind=TIME_LIMITED, method="auto"):
    """Gramian pair for balancing a linear Gaussian inference problem.

    The prior covariance serves as reachability Gramian in every case; the
    observability Gramian is the noisy time-limited one over the observation
    window (``kind="time_limited"``) or the infinite one (``"infinite"``).
    """
    system = setup.system
    if kind == TIME_LIMITED:
        obs = tl_noisy_observability(system, setup.noise_cov, setup.end_time, method)
        return GramianPair(setup.prior_factor, obs, TIME_LIMITED, t_e=setup.end_time)
    if kind == INFINITE:
        obs = infinite_observability(system, setup.noise_cov)
        return GramianPair(setup.prior_factor, obs, INFINITE)
    raise ValueError(f"unknown Gramian kind {kind!r}")


# Prior compatibility ---------------------------------------------------------

def _prior_dot(A, prior_factor):
    A = as_matrix(A, "A")
    G = prior_factor.matrix
    if G.shape != A.shape:
        raise DimensionError(f"prior is {G.shape}, A is {A.shape}")
    return symmetrize(A @ G + G @ A.T)


def compatibility_check(A, prior_factor):
    """Is ``A G + G A^T`` negative semidefinite?  Returns ``(ok, max_eig)``."""
    M = _prior_dot(A, prior_factor)
    lam = np.linalg.eigvalsh(M)
    defect = float(lam[-1])
    return defect <= COMPATIBILITY_TOL * float(np.max(np.abs(lam))), defect


def make_compatible_prior(A, prior_factor):
    """Modify a prior so that it becomes compatible with stable `A`.

    ``A G + G A^T = V diag(l) V^T`` is split spectrally, positive eigenvalues
    are zeroed, and the new prior solves ``A G' + G' A^T = V diag(min(l, 0)) V^T``.
    """
    A = as_matrix(A, "A")
    if np.max(np.linalg.eigvals(A).real) >= 0:
        raise StabilityError("making a prior compatible requires a stable A")
    lam, V = np.linalg.eigh(_prior_dot(A, prior_factor))
    W = -(V * np.minimum(lam, 0.0)) @ V.T
    G = linalg.solve_continuous_lyapunov(A, symmetrize(W))
    factor = linalg.cholesky_psd(G)
    if not factor.is_full_rank:
        raise DefinitenessError(
            f"modified prior is singular (rank {factor.rank} of {factor.n})")
    ok, defect = compatibility_check(A, factor)
    if not ok:
        raise NumericalError(f"modified prior still incompatible (defect {defect:.3g})")
    return factor
