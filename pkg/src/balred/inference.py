"""Gaussian posteriors for initial-condition inference.

All computations run in coordinates whitened by the prior factor ``S``
(``Gamma_pr = S S^T``) and the noise Cholesky factor ``L`` (``Gamma_eps = L L^T``).
With the whitened forward map ``Gt = (I (x) L^{-1}) G S`` the posterior is

    Gamma_pos = S K^{-1} S^T,   K = I + Gt^T Gt,
    mu_pos    = S K^{-1} Gt^T mw,

where ``mw`` are the whitened measurements.  ``K`` is called the whitened
precision; Foerstner distances between posteriors sharing a prior are
computed from it directly, which avoids forming differences of nearly equal
covariances.  Every approximation is represented by a :class:`PosteriorApprox`
holding its covariance, whitened precision and the linear map taking
whitened measurements to its mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import linalg
from .errors import DimensionError, RankError
from .gramians import FISHER, GramianPair
from .linalg import SymFactor, symmetrize

OLR_ZERO_TOL = 1e-14


# Forward map -----------------------------------------------------------------

def _gap_key(gap):
    return float(f"{gap:.12e}")


def propagate_outputs(A, C, times, discrete=False):
    """Blocks ``C exp(A t_k)`` (or ``C A^{t_k}``), shape ``(n, d_out, d)``.

    The row block is propagated from one time to the next; one exponential
    is computed per distinct time gap.
    """
    times = np.asarray(times, dtype=float)
    out = np.empty((times.size,) + C.shape)
    cache = {}
    Z, t_prev = C, 0.0
    for k, t in enumerate(times):
        gap = t - t_prev
        key = _gap_key(gap)
        if key not in cache:
            if discrete:
                steps = int(round(gap))
                if abs(steps - gap) > 1e-12:
                    raise ValueError("discrete-time measurements need integer times")
                cache[key] = np.linalg.matrix_power(A, steps)
            else:
                cache[key] = linalg.expm(A, gap)
        Z = Z @ cache[key]
        out[k] = Z
        t_prev = t
    return out


@dataclass(frozen=True)
class ForwardMap:
    """Stacked forward operator, block ``k`` is ``C exp(A t_k)``."""

    blocks: np.ndarray
    times: np.ndarray
    noise_chol: np.ndarray

    @property
    def n(self):
        return self.blocks.shape[0]

    @property
    def d(self):
        return self.blocks.shape[2]

    @property
    def whitened(self):
        """``(I (x) L^{-1}) G`` as an ``(n d_out) x d`` matrix."""
        n, p, d = self.blocks.shape
        W = scipy.linalg.solve_triangular(
            self.noise_chol, self.blocks.transpose(1, 0, 2).reshape(p, n * d), lower=True)
        return W.reshape(p, n, d).transpose(1, 0, 2).reshape(n * p, d)

    def apply(self, x):
        """``G x`` as an ``(n, d_out)`` array."""
        return self.blocks @ np.asarray(x, dtype=float)

    def fisher(self):
        W = self.whitened
        return symmetrize(W.T @ W)


def forward_map(setup):
    s = setup.system
    blocks = propagate_outputs(s.A, s.C, setup.times, discrete=s.is_discrete)
    return ForwardMap(blocks, setup.times, setup.noise_chol)


def whiten_measurements(setup, m):
    """``(I (x) L^{-1}) m`` for measurements given as blocks or a MeasurementSet."""
    blocks = getattr(m, "blocks", m)
    blocks = np.asarray(blocks, dtype=float).reshape(setup.n, setup.system.d_out)
    return scipy.linalg.solve_triangular(setup.noise_chol, blocks.T, lower=True).T.ravel()


# Posterior representations ---------------------------------------------------

@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray
    prior_factor: SymFactor | None = None
    whitened_precision: np.ndarray | None = None

    def __post_init__(self):
        cov = symmetrize(np.asarray(self.cov, dtype=float))
        lam = np.linalg.eigvalsh(cov)
        if lam.size and lam[0] < -1e-12 * max(abs(lam[-1]), 1e-300):
            raise ValueError("covariance is not positive semidefinite")
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float).ravel())


@dataclass(frozen=True)
class PosteriorApprox:
    """A (possibly approximate) Gaussian posterior, independent of the data.

    Attributes
    ----------
    prior_factor : SymFactor
        Prior factor ``S`` the whitened quantities refer to.
    whitened_precision : ndarray
        ``K`` with ``cov = S K^{-1} S^T``.
    estimator : ndarray
        ``d x (n d_out)`` map from whitened measurements to the mean.
    label : str
    data_factor : ndarray, optional
        Compact ``k x d`` factor ``X`` with ``K = I + X^T X``; lets metrics
        work with ``X`` instead of the rounded ``K``.
    """

    prior_factor: SymFactor
    whitened_precision: np.ndarray
    estimator: np.ndarray
    label: str = ""
    data_factor: np.ndarray | None = None

    @property
    def cov(self):
        Lk = np.linalg.cholesky(self.whitened_precision)
        X = scipy.linalg.solve_triangular(Lk, self.prior_factor.base.T, lower=True)
        return symmetrize(X.T @ X)

    def mean(self, setup, m):
        return self.estimator @ whiten_measurements(setup, m)

    def belief(self, setup, m):
        return GaussianBelief(self.mean(setup, m), self.cov, self.prior_factor,
                              self.whitened_precision)


def _from_whitened_data(S, Gt, X, label):
    """Posterior for prior factor ``S``, whitened forward map ``Gt`` (N x d)
    and compact factor ``X`` with ``X^T X = Gt^T Gt``."""
    d = S.n
    K = symmetrize(np.eye(d) + X.T @ X)
    Lk = np.linalg.cholesky(K)
    Y = scipy.linalg.cho_solve((Lk, True), Gt.T)
    return PosteriorApprox(S, K, S.base @ Y, label, X)


def _compact(Gt):
    return linalg.factor_from_rows(Gt).base.T


def full_posterior_operator(setup, fmap=None):
    fmap = fmap if fmap is not None else forward_map(setup)
    S = setup.prior_factor
    Wd = fmap.whitened if fmap.n else np.zeros((0, setup.system.d))
    Gt = Wd @ S.base
    return _from_whitened_data(S, Gt, _compact(Gt), "full")


def full_posterior(setup, m):
    """Exact posterior ``N(mu_pos, Gamma_pos)``."""
    return full_posterior_operator(setup).belief(setup, m)


def reduced_posterior_operator(setup, reduction, label="reduced"):
    """Posterior with forward map ``C_r exp(A_r t_k) T_inv``.

    Only the r-dimensional reduced dynamics are propagated; the result is
    lifted to the full space once by ``T_inv``.
    """
    if reduction.T_inv.shape[1] != setup.system.d:
        raise DimensionError("reduction does not match the setup's state dimension")
    S = setup.prior_factor
    if setup.n == 0:
        Wr = np.zeros((0, reduction.r))
    else:
        blocks = propagate_outputs(reduction.reduced_A, reduction.reduced_C, setup.times,
                                   discrete=setup.system.is_discrete)
        Wr = ForwardMap(blocks, setup.times, setup.noise_chol).whitened
    TS = reduction.T_inv @ S.base
    return _from_whitened_data(S, Wr @ TS, _compact(Wr) @ TS, label)


def reduced_posterior(setup, reduction, m):
    return reduced_posterior_operator(setup, reduction).belief(setup, m)


@dataclass(frozen=True)
class OlrSpectrum:
    """Pairs from the pencils ``(H, Gamma_pr^{-1})`` and ``(G Gamma_pr G^T, Gamma_obs)``.

    ``tau`` are the non-increasing square roots of the first pencil's
    eigenvalues, ``v`` its prior-orthonormal eigenvectors (columns), ``u``
    the same vectors in whitened coordinates (``v = S u``), and ``w_white``
    the second pencil's eigenvectors in whitened measurement coordinates.
    """

    tau: np.ndarray
    u: np.ndarray
    v: np.ndarray
    w_white: np.ndarray


def olr_spectrum(setup, fmap=None):
    fmap = fmap if fmap is not None else forward_map(setup)
    S = setup.prior_factor
    d = S.n
    Gt = fmap.whitened @ S.base if fmap.n else np.zeros((0, d))
    # SVD of Gt gives both pencils at once: Gt^T Gt u = tau^2 u, Gt u = tau w.
    U, s, Vt = np.linalg.svd(Gt, full_matrices=False)
    tau = np.zeros(d)
    tau[:s.size] = s
    u = np.zeros((d, d))
    u[:, :s.size] = Vt.T
    if s.size < d:
        # complete with an orthonormal basis of the null space
        u[:, s.size:] = scipy.linalg.null_space(Vt) if s.size else np.eye(d)
    w = np.zeros((Gt.shape[0], d))
    w[:, :s.size] = U
    return OlrSpectrum(tau, u, S.base @ u, w)


def olr_posterior_operator(setup, r, spectrum=None, label="OLR"):
    """Optimal low-rank update of the covariance and optimal rank-r mean map."""
    d, N = setup.system.d, setup.n * setup.system.d_out
    if r < 0 or r > d or r > N:
        raise RankError(f"OLR rank {r} exceeds min(d, n d_out) = {min(d, N)}",
                        max_rank=min(d, N))
    sp = spectrum if spectrum is not None else olr_spectrum(setup)
    tau = sp.tau[:r]
    # tau are singular values (accurate to eps * tau_1), so the zero guard is
    # applied to tau itself, as for Hankel values
    keep = tau > OLR_ZERO_TOL * sp.tau[0] if sp.tau.size and sp.tau[0] > 0 \
        else np.zeros(r, dtype=bool)
    tau, u, v, w = tau[keep], sp.u[:, :r][:, keep], sp.v[:, :r][:, keep], sp.w_white[:, :r][:, keep]
    X = tau[:, None] * u.T
    K = symmetrize(np.eye(d) + X.T @ X)
    estimator = (v * (tau / (1.0 + tau**2))) @ w.T
    return PosteriorApprox(setup.prior_factor, K, estimator, label, X)


def olr_posterior(setup, m, r):
    return olr_posterior_operator(setup, r).belief(setup, m)


def olr_foerstner_closed_form(spectrum, r):
    """``sqrt(sum_{i>r} ln^2(1 + tau_i^2))``."""
    tail = spectrum.tau[r:]
    return float(np.sqrt(np.sum(np.log1p(tail**2) ** 2)))


def bth_gramians(setup, fmap=None):
    """Prior as reachability Gramian, Fisher matrix as observability Gramian."""
    fmap = fmap if fmap is not None else forward_map(setup)
    Wd = fmap.whitened if fmap.n else np.zeros((0, setup.system.d))
    obs = linalg.factor_from_rows(Wd)
    return GramianPair(setup.prior_factor, obs, FISHER, t_e=setup.end_time)
