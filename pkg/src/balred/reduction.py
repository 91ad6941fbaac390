"""Square-root balanced truncation."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import DegenerateSystemError, DimensionError, RankError
from .models import LtiSystem

log = logging.getLogger(__name__)

# Hankel values below HANKEL_TOL * delta_1 are treated as zero.
HANKEL_TOL = 1e-14
# Relative gap below which delta_r and delta_{r+1} count as tied.
TIE_TOL = 1e-10


def _hankel_svd(reach_factor, obs_factor):
    if reach_factor.n != obs_factor.n:
        raise DimensionError(
            f"factors disagree in dimension: {reach_factor.n} vs {obs_factor.n}")
    M = obs_factor.base.T @ reach_factor.base
    if M.size == 0 or not np.any(M):
        raise DegenerateSystemError(
            "L^T R vanishes: the system has no reachable and observable part")
    U, s, Z = linalg.svd(M)
    usable = int(np.count_nonzero(s > HANKEL_TOL * s[0]))
    return U, s, Z, usable


def hankel_values(reach_factor, obs_factor):
    """Non-increasing Hankel singular values ``sqrt(eig(P Q))``.

    Computed as the singular values of ``L^T R`` for ``P = R R^T`` and
    ``Q = L L^T``; values below ``1e-14 * delta_1`` are dropped.
    """
    _, s, _, usable = _hankel_svd(reach_factor, obs_factor)
    return s[:usable]


@dataclass(frozen=True)
class BalancedReduction:
    """Projection ``T`` (d x r), ``T_inv`` (r x d) and the reduced model.

    ``hankel`` holds the retained values ``delta_1..delta_r``,
    ``all_hankel`` every usable value.  ``tie`` is set when ``delta_r`` and
    ``delta_{r+1}`` are numerically equal, in which case the truncation is
    not unique.
    """

    T: np.ndarray
    T_inv: np.ndarray
    hankel: np.ndarray
    all_hankel: np.ndarray
    reduced_A: np.ndarray
    reduced_C: np.ndarray
    reduced_B: np.ndarray | None
    reduced_prior: np.ndarray | None
    tie: bool = False

    @property
    def r(self):
        return self.T.shape[1]

    @property
    def reduced_system(self):
        return LtiSystem(self.reduced_A, self.reduced_C, B=self.reduced_B)


def square_root_bt(system, gramians, prior_factor=None, r=1):
    """Balance and truncate `system` to order `r`.

    With ``L^T R = U diag(delta) Z^T`` the projection is
    ``T = R Z_r delta_r^{-1/2}`` and ``T_inv = delta_r^{-1/2} U_r^T L^T``.
    Each column of ``Z_r`` is signed so its largest-magnitude entry is
    positive, which makes the result deterministic.

    Parameters
    ----------
    system : LtiSystem
    gramians : GramianPair
    prior_factor : SymFactor, optional
        If given, the reduced prior ``T_inv Gamma_pr T_inv^T`` is returned too.
    r : int

    Raises
    ------
    RankError
        If `r` exceeds the number of usable Hankel values.
    """
    R, L = gramians.reach_factor.base, gramians.obs_factor.base
    if R.shape[0] != system.d:
        raise DimensionError(f"Gramians are {R.shape[0]}-dimensional, system has d={system.d}")
    U, s, Z, usable = _hankel_svd(gramians.reach_factor, gramians.obs_factor)
    if r < 1 or r > usable:
        raise RankError(f"rank {r} outside 1..{usable} (usable Hankel values)",
                        max_rank=usable)
    U, Z, s_r = U[:, :r].copy(), Z[:, :r].copy(), s[:r]
    flip = np.sign(Z[np.argmax(np.abs(Z), axis=0), np.arange(r)])
    Z *= flip
    U *= flip
    tie = bool(r < usable and (s[r - 1] - s[r]) < TIE_TOL * s[r - 1])
    if tie:
        log.warning("Hankel values %d and %d are tied (%.17g, %.17g); "
                    "the truncation is not unique", r, r + 1, s[r - 1], s[r])
    w = 1.0 / np.sqrt(s_r)
    T = (R @ Z) * w
    T_inv = (w[:, None] * U.T) @ L.T
    red_B = T_inv @ system.B if system.B is not None else None
    red_prior = None
    if prior_factor is not None:
        X = T_inv @ prior_factor.base
        red_prior = linalg.symmetrize(X @ X.T)
    return BalancedReduction(T, T_inv, s_r.copy(), s[:usable].copy(),
                             T_inv @ system.A @ T, system.C @ T, red_B, red_prior, tie)


def balance_defect(reduction, gramians):
    """Relative deviation of the projected Gramians from ``diag(delta_r)``.

    Returns ``(reach, obs)`` with
    ``reach = ||T_inv P T_inv^T - D||_F / ||D||_F`` and
    ``obs = ||T^T Q T - D||_F / ||D||_F``, evaluated through the factors.
    """
    D = np.diag(reduction.hankel)
    scale = np.linalg.norm(D)
    X = reduction.T_inv @ gramians.reach_factor.base
    Y = gramians.obs_factor.base.T @ reduction.T
    return (float(np.linalg.norm(X @ X.T - D) / scale),
            float(np.linalg.norm(Y.T @ Y - D) / scale))
