"""Förstner distance and Bayes risk of posterior approximations."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import DefinitenessError, DimensionError
from .inference import PosteriorApprox, forward_map, full_posterior_operator
from .linalg import SymFactor, symmetrize
from .models import draw_noise, draw_truth, make_rng

SPD_TOL = 1e-14


def _spd(M, name):
    M = symmetrize(linalg.as_matrix(M, name))
    lam = np.linalg.eigvalsh(M)
    if lam[0] <= SPD_TOL * max(abs(lam[-1]), np.finfo(float).tiny):
        raise DefinitenessError(
            f"{name} is not positive definite (eigenvalues {lam[0]:.3g} .. {lam[-1]:.3g})")
    return M


def foerstner_distance(A, B):
    """``sqrt(sum_i ln^2 sigma_i)`` over the eigenvalues of the pencil ``(A, B)``.

    Symmetric, zero iff ``A = B`` and invariant under congruence and under
    inverting both arguments.
    """
    A, B = _spd(A, "A"), _spd(B, "B")
    if A.shape != B.shape:
        raise DimensionError(f"shapes differ: {A.shape} vs {B.shape}")
    sigma = linalg.sym_generalized_eig(A, SymFactor(np.linalg.cholesky(B))).values
    if np.any(sigma <= 0):
        raise DefinitenessError("pencil has non-positive eigenvalues")
    return math.sqrt(math.fsum(np.log(sigma) ** 2))


def _shares_prior(a, b):
    fa, fb = getattr(a, "prior_factor", None), getattr(b, "prior_factor", None)
    return (fa is not None and fb is not None
            and getattr(a, "whitened_precision", None) is not None
            and getattr(b, "whitened_precision", None) is not None
            and (fa is fb or np.array_equal(fa.base, fb.base)))


def foerstner_factored(Xa, Xb):
    """Förstner distance between ``I + Xa^T Xa`` and ``I + Xb^T Xb``.

    With ``Xb = U diag(s) V^T`` and ``D = I + diag(s)^2`` the pencil is
    congruent to ``D^{-1} + Y^T Y``, ``Y = Xa V D^{-1/2}``, whose entries are
    O(1).  Eigenvalues near 1 are then resolved to O(eps) rather than to
    ``eps * ||X||^2`` as when the precisions are formed explicitly.
    """
    Xa, Xb = np.atleast_2d(Xa), np.atleast_2d(Xb)
    d = Xb.shape[1]
    if Xa.shape[1] != d:
        raise DimensionError(f"factors act on {Xa.shape[1]} and {d} dimensions")
    _, s, Vt = np.linalg.svd(Xb, full_matrices=True)
    D = np.ones(d)
    D[:s.size] += s**2
    Y = (Xa @ Vt.T) / np.sqrt(D)
    sigma = np.linalg.eigvalsh(symmetrize(np.diag(1.0 / D) + Y.T @ Y))
    return math.sqrt(math.fsum(np.log(sigma) ** 2))


def posterior_foerstner(a, b):
    """Förstner distance between two posterior covariances.

    When both carry a whitened precision relative to the same prior factor
    ``S`` the distance is taken between the whitened precisions: by
    congruence (with ``S``) and inversion invariance it equals the
    covariance distance, but avoids forming the covariances.  If both
    precisions come with a data factor, :func:`foerstner_factored` is used.
    """
    if _shares_prior(a, b):
        Xa, Xb = getattr(a, "data_factor", None), getattr(b, "data_factor", None)
        if Xa is not None and Xb is not None:
            return foerstner_factored(Xa, Xb)
        return foerstner_distance(a.whitened_precision, b.whitened_precision)
    return foerstner_distance(a.cov, b.cov)


@dataclass(frozen=True)
class RiskEstimate:
    value: float
    kind: str
    std_error: float | None = None
    n_trials: int | None = None
    seed: int | None = None


class FullReference:
    """Full-problem quantities shared by the risk evaluations."""

    def __init__(self, setup, fmap=None):
        self.setup = setup
        self.fmap = fmap if fmap is not None else forward_map(setup)
        self.post = full_posterior_operator(setup, self.fmap)
        S = setup.prior_factor
        self.S = S
        self.solve_S, _ = linalg.factor_solvers(S)
        self.Lk = np.linalg.cholesky(self.post.whitened_precision)
        Wd = self.fmap.whitened if self.fmap.n else np.zeros((0, setup.system.d))
        self.Gt = Wd @ S.base

    def weighted(self, X):
        """``||Gamma_pos^{-1/2} X||_F^2`` via ``K = Lk Lk^T``."""
        return float(np.sum((self.Lk.T @ self.solve_S(X)) ** 2))


def _reference(setup, reference):
    if reference is None:
        return FullReference(setup)
    if reference.setup is not setup:
        raise ValueError("reference was built for a different setup")
    return reference


def whitened_estimator(estimator, setup):
    """Convert an estimator to the map acting on whitened measurements.

    Accepts a :class:`PosteriorApprox` or a raw ``d x (n d_out)`` matrix ``N``
    acting on the stacked measurements.
    """
    if isinstance(estimator, PosteriorApprox):
        return estimator.estimator
    N = linalg.as_matrix(estimator, "N")
    d, p, n = setup.system.d, setup.system.d_out, setup.n
    if N.shape != (d, n * p):
        raise DimensionError(f"N must be {d} x {n * p}, got {N.shape}")
    return (N.reshape(d, n, p) @ setup.noise_chol).reshape(d, n * p)


def exact_bayes_risk(estimator, setup, reference=None):
    """``E ||x0 - N m||^2`` in the full posterior precision norm.

    Evaluated as ``d + E ||mu_pos - N m||^2_{Gamma_pos^{-1}}``: the posterior
    mean error is independent of the data, so the risk splits into the
    posterior's own risk ``trace(I) = d`` and the excess of ``N`` over the
    posterior mean map.  This equals
    ``trace(Gamma_pos^{-1} [(I - N G) Gamma_pr (I - N G)^T + N Gamma_obs N^T])``
    but has no cancellation.
    """
    ref = _reference(setup, reference)
    return RiskEstimate(setup.system.d + excess_risk(estimator, setup, ref), "exact")


def excess_risk(estimator, setup, reference=None):
    """``E ||mu_pos - N m||^2_{Gamma_pos^{-1}}`` with ``m`` from the prior predictive."""
    ref = _reference(setup, reference)
    D = whitened_estimator(estimator, setup) - ref.post.estimator
    # whitened data covariance is I + Gt Gt^T
    return ref.weighted(D) + ref.weighted(D @ ref.Gt)


def exact_bayes_risk_trace(estimator, setup):
    """The trace formula for the exact risk, evaluated literally (for checking)."""
    ref = FullReference(setup)
    Nw = whitened_estimator(estimator, setup)
    Wd = ref.fmap.whitened if ref.fmap.n else np.zeros((0, setup.system.d))
    E = np.eye(setup.system.d) - Nw @ Wd
    Gpos_inv = np.linalg.inv(ref.post.cov)
    Gpr = setup.prior_cov
    return float(np.trace(Gpos_inv @ (E @ Gpr @ E.T + Nw @ Nw.T)))


def _trial_error(setup, fmap, mean_fn, ref, seed, j):
    rng = make_rng(seed, j)
    x0 = draw_truth(setup, rng)
    m = fmap.apply(x0) + draw_noise(setup, rng)
    err = x0 - mean_fn(m)
    return float(np.sum((ref.Lk.T @ ref.solve_S(err)) ** 2))


def empirical_bayes_risk(method, setup, n_trials, seed, reference=None):
    """Monte Carlo estimate of the Bayes risk.

    Trial ``j`` draws ``x0`` and the noise from ``make_rng(seed, j)``, so the
    result does not depend on evaluation order.

    Parameters
    ----------
    method : PosteriorApprox or callable
        Mean estimator; a callable receives the ``(n, d_out)`` measurement
        blocks and returns the mean.
    """
    if n_trials < 2:
        raise ValueError("n_trials must be at least 2")
    ref = _reference(setup, reference)
    if isinstance(method, PosteriorApprox):
        def mean_fn(m, _p=method):
            return _p.mean(setup, m)
    else:
        mean_fn = method
    errs = [_trial_error(setup, ref.fmap, mean_fn, ref, seed, j) for j in range(n_trials)]
    mean = math.fsum(errs) / n_trials
    var = math.fsum((e - mean) ** 2 for e in errs) / (n_trials - 1)
    return RiskEstimate(mean, "empirical", math.sqrt(var / n_trials), n_trials, seed)


__all__ = [
    "RiskEstimate", "foerstner_distance", "foerstner_factored", "posterior_foerstner", "exact_bayes_risk",
    "excess_risk", "exact_bayes_risk_trace", "empirical_bayes_risk", "FullReference",
    "whitened_estimator",
]
