"""LTI systems, inference problems and synthetic data."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.special

from . import linalg
from .errors import ConfigError, DimensionError, FormatError, StabilityError
from .linalg import SymFactor, as_matrix

CONTINUOUS = "continuous"
DISCRETE = "discrete"


@dataclass(frozen=True)
class LtiSystem:
    """``x' = A x (+ B u)``, ``y = C x`` in continuous or discrete time."""

    A: np.ndarray
    C: np.ndarray
    B: np.ndarray | None = None
    time_kind: str = CONTINUOUS

    def __post_init__(self):
        A = as_matrix(self.A, "A")
        C = as_matrix(self.C, "C")
        if A.shape[0] != A.shape[1]:
            raise DimensionError(f"A must be square, got {A.shape}")
        if C.shape[1] != A.shape[0]:
            raise DimensionError(
                f"C has {C.shape[1]} columns but A has {A.shape[0]} rows")
        if C.shape[0] < 1:
            raise DimensionError("C must have at least one row")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "C", C)
        if self.B is not None:
            B = as_matrix(self.B, "B")
            if B.shape[0] != A.shape[0]:
                raise DimensionError(
                    f"B has {B.shape[0]} rows but A has {A.shape[0]}")
            object.__setattr__(self, "B", B)
        if self.time_kind not in (CONTINUOUS, DISCRETE):
            raise ValueError(f"unknown time_kind {self.time_kind!r}")

    @property
    def d(self):
        return self.A.shape[0]

    @property
    def d_out(self):
        return self.C.shape[0]

    @property
    def is_discrete(self):
        return self.time_kind == DISCRETE


def spectral_abscissa(A):
    return float(np.max(np.linalg.eigvals(A).real))


def spectral_radius(A):
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def is_stable(system):
    if system.is_discrete:
        return spectral_radius(system.A) < 1.0
    return spectral_abscissa(system.A) < 0.0


def require_stable(system, what="this operation"):
    if not is_stable(system):
        if system.is_discrete:
            measure = f"spectral radius {spectral_radius(system.A):.6g}"
        else:
            measure = f"spectral abscissa {spectral_abscissa(system.A):.6g}"
        raise StabilityError(
            f"{what} requires a stable system ({measure}); "
            "use the time-limited variants for unstable dynamics")


# Random numbers --------------------------------------------------------------

def make_rng(seed, *keys):
    """Counter-based generator keyed by ``(seed, *keys)``.

    Distinct key tuples give independent streams, so trial ``j`` of an
    experiment seeded with ``s`` uses ``make_rng(s, j)`` regardless of the
    order in which trials are evaluated.
    """
    entropy = [int(seed)] + [int(k) for k in keys]
    if any(e < 0 for e in entropy):
        raise ValueError("seeds and keys must be non-negative integers")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def standard_normal(rng, size):
    """Standard normal variates by inverse-CDF transform of 53-bit uniforms."""
    k = rng.integers(0, 2**53, size=size, dtype=np.int64)
    u = (k.astype(float) + 0.5) * 2.0**-53
    return scipy.special.ndtri(u)


# Benchmarks ------------------------------------------------------------------

def build_heat_1d(d, kappa=1.0):
    """1-D heat equation on the unit interval with Dirichlet boundaries.

    Second-order central differences on ``d`` interior nodes, spacing
    ``1/(d+1)``; the output is the temperature at the middle node.
    """
    if d < 2:
        raise DimensionError(f"heat model needs d >= 2, got {d}")
    h = 1.0 / (d + 1)
    A = kappa / h**2 * (np.diag(np.full(d, -2.0))
                        + np.diag(np.ones(d - 1), 1)
                        + np.diag(np.ones(d - 1), -1))
    C = np.zeros((1, d))
    C[0, math.ceil(d / 2) - 1] = 1.0
    return LtiSystem(A, C)


def build_advection_diffusion(d, diffusion=0.02, velocity=0.01):
    """``K_t = D K_zz - u K_z`` on the unit interval, output = mean concentration.

    Interior rows use the central stencil for diffusion and the forward
    (downwind) difference for advection.  The two boundary rows carry no
    boundary condition; they use one-sided stencils instead, i.e. the
    second derivative is extrapolated from the first three (last three)
    nodes and the first derivative from the first two (last two).  This
    closure is what makes the semi-discrete operator unstable: the Neumann
    ghost-node closure yields a generator with zero row sums and spectral
    abscissa exactly 0.
    """
    if d < 3:
        raise DimensionError(f"advection-diffusion model needs d >= 3, got {d}")
    if diffusion < 0:
        raise ValueError("diffusion must be non-negative")
    h = 1.0 / d
    a, b = diffusion / h**2, velocity / h
    A = np.zeros((d, d))
    i = np.arange(1, d - 1)
    A[i, i - 1] = a
    A[i, i] = -2.0 * a + b
    A[i, i + 1] = a - b
    A[0, :3] = [a + b, -2.0 * a - b, a]
    A[-1, -3:] = [a, -2.0 * a + b, a - b]
    C = np.full((1, d), 1.0 / d)
    return LtiSystem(A, C)


def build_band_prior(d, seed):
    """Upper-triangular banded prior factor ``R`` with ``Gamma_pr = R R^T``.

    Unit diagonal, first superdiagonal ``N(0, 0.5^2)`` and second
    superdiagonal ``N(0, 0.25^2)``, drawn from ``make_rng(seed)``.
    """
    if d < 3:
        raise DimensionError(f"band prior needs d >= 3, got {d}")
    rng = make_rng(seed)
    R = np.eye(d)
    R += np.diag(0.5 * standard_normal(rng, d - 1), 1)
    R += np.diag(0.25 * standard_normal(rng, d - 2), 2)
    return SymFactor(R)


def identity_prior(d):
    return SymFactor(np.eye(d))


def prior_from_lyapunov(system, B):
    """Prior covariance solving ``A G + G A^T = -B B^T`` (continuous) or the
    Stein analogue (discrete), returned as a square-root factor."""
    require_stable(system, "a Lyapunov prior")
    B = as_matrix(B, "B")
    if B.shape[0] != system.d:
        raise DimensionError(f"B has {B.shape[0]} rows, system has d={system.d}")
    W = B @ B.T
    if system.is_discrete:
        G = linalg.solve_discrete_lyapunov(system.A, W)
    else:
        G = linalg.solve_continuous_lyapunov(system.A, W)
    return linalg.cholesky_psd(G)


# Matrix Market ---------------------------------------------------------------

def read_matrix_market(path):
    """Read a real Matrix Market file (array or coordinate) into a dense array."""
    path = Path(path)
    with path.open() as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].lower().startswith("%%matrixmarket"):
        raise FormatError(f"{path}: missing %%MatrixMarket banner", line=1)
    banner = lines[0].lower().split()
    if len(banner) < 5 or banner[1] != "matrix":
        raise FormatError(f"{path}: malformed banner {lines[0]!r}", line=1)
    fmt, kind, symmetry = banner[2], banner[3], banner[4]
    if fmt not in ("array", "coordinate"):
        raise FormatError(f"{path}: unsupported format {fmt!r}", line=1)
    if kind not in ("real", "integer", "double"):
        raise FormatError(f"{path}: unsupported field {kind!r}", line=1)
    if symmetry not in ("general", "symmetric", "skew-symmetric"):
        raise FormatError(f"{path}: unsupported symmetry {symmetry!r}", line=1)

    body = [(n, ln.strip()) for n, ln in enumerate(lines[1:], start=2)
            if ln.strip() and not ln.lstrip().startswith("%")]
    if not body:
        raise FormatError(f"{path}: missing size line", line=len(lines))

    def numbers(lineno, text, count, cast):
        parts = text.split()
        if len(parts) != count:
            raise FormatError(f"{path}: expected {count} fields, got {len(parts)}",
                              line=lineno)
        try:
            return [cast(p) for p in parts]
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}", line=lineno) from None

    size_line, size_text = body[0]
    if fmt == "array":
        rows, cols = numbers(size_line, size_text, 2, int)
        M = np.zeros((rows, cols))
        if symmetry == "general":
            cells = [(i, j) for j in range(cols) for i in range(rows)]
        else:
            start = 0 if symmetry == "symmetric" else 1
            cells = [(i, j) for j in range(cols) for i in range(j + start, rows)]
        if len(body) - 1 != len(cells):
            raise FormatError(
                f"{path}: expected {len(cells)} entries, found {len(body) - 1}",
                line=body[-1][0])
        for (lineno, text), (i, j) in zip(body[1:], cells):
            M[i, j] = numbers(lineno, text, 1, float)[0]
    else:
        rows, cols, nnz = numbers(size_line, size_text, 3, int)
        if len(body) - 1 != nnz:
            raise FormatError(f"{path}: expected {nnz} entries, found {len(body) - 1}",
                              line=body[-1][0])
        M = np.zeros((rows, cols))
        for lineno, text in body[1:]:
            parts = text.split()
            if len(parts) != 3:
                raise FormatError(f"{path}: expected 3 fields, got {len(parts)}",
                                  line=lineno)
            try:
                i, j, v = int(parts[0]) - 1, int(parts[1]) - 1, float(parts[2])
            except ValueError as exc:
                raise FormatError(f"{path}: {exc}", line=lineno) from None
            if not (0 <= i < rows and 0 <= j < cols):
                raise FormatError(f"{path}: index ({i + 1}, {j + 1}) out of range",
                                  line=lineno)
            M[i, j] += v
    if symmetry == "symmetric":
        M = M + np.tril(M, -1).T
    elif symmetry == "skew-symmetric":
        M = M - np.tril(M, -1).T
    return M


def load_lti_matrix_market(A_path, C_path, B_path=None, time_kind=CONTINUOUS):
    A = read_matrix_market(A_path)
    C = read_matrix_market(C_path)
    B = read_matrix_market(B_path) if B_path is not None else None
    return LtiSystem(A, C, B=B, time_kind=time_kind)


# Inference problems ----------------------------------------------------------

@dataclass(frozen=True)
class InferenceSetup:
    """Initial-condition inference for ``m_k = C exp(A t_k) x0 + eps_k``.

    ``x0 ~ N(0, S S^T)`` with ``S = prior_factor.base`` and
    ``eps_k ~ N(0, noise_cov)``.  An empty time grid is accepted and means
    "no data".
    """

    system: LtiSystem
    prior_factor: SymFactor
    noise_cov: np.ndarray
    times: np.ndarray
    noise_chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        S = self.prior_factor
        if not isinstance(S, SymFactor):
            S = SymFactor(S)
            object.__setattr__(self, "prior_factor", S)
        if S.n != self.system.d or not S.is_full_rank:
            raise DimensionError(
                f"prior factor must be {self.system.d} x {self.system.d}, "
                f"got {S.base.shape}")
        linalg.factor_solvers(S)  # raises if singular
        G = as_matrix(self.noise_cov, "noise_cov")
        if G.shape != (self.system.d_out, self.system.d_out):
            raise DimensionError(
                f"noise_cov must be {self.system.d_out} x {self.system.d_out}, got {G.shape}")
        if not np.allclose(G, G.T, rtol=1e-12, atol=0.0):
            raise ValueError("noise_cov must be symmetric")
        try:
            L = np.linalg.cholesky(G)
        except np.linalg.LinAlgError:
            raise ValueError("noise_cov must be positive definite") from None
        object.__setattr__(self, "noise_cov", G)
        object.__setattr__(self, "noise_chol", L)
        t = np.asarray(self.times, dtype=float).ravel()
        if t.size and (np.any(t <= 0) or np.any(np.diff(t) <= 0)):
            raise ValueError("times must be positive and strictly increasing")
        object.__setattr__(self, "times", t)

    @property
    def n(self):
        return self.times.size

    @property
    def end_time(self):
        return float(self.times[-1]) if self.n else 0.0

    @property
    def prior_cov(self):
        return self.prior_factor.matrix

    @property
    def noise_precision(self):
        return np.linalg.inv(self.noise_cov)


def uniform_times(h, t_end):
    """Grid ``t_k = k h`` for ``k = 1..n`` with ``n h = t_end``."""
    n = round(t_end / h)
    if n < 1 or abs(n * h - t_end) > 1e-12 * max(1.0, t_end):
        raise ConfigError(f"end time {t_end} is not an integer multiple of h = {h}")
    return h * np.arange(1, n + 1)


@dataclass(frozen=True)
class MeasurementSet:
    """Synthetic data ``m`` (n blocks of d_out values) and the drawn truth."""

    blocks: np.ndarray
    seed: int | None
    truth: np.ndarray

    @property
    def values(self):
        return self.blocks.ravel()


def draw_truth(setup, rng):
    return setup.prior_factor.base @ standard_normal(rng, setup.system.d)


def draw_noise(setup, rng):
    z = standard_normal(rng, (setup.n, setup.system.d_out))
    return z @ setup.noise_chol.T


def generate_measurements(setup, seed, truth=None, noiseless=False, forward=None):
    """Draw ``x0 ~ N(0, Gamma_pr)`` and noisy outputs at the setup's times.

    Parameters
    ----------
    setup : InferenceSetup
    seed : int
    truth : array, optional
        Use this initial condition instead of drawing one.
    noiseless : bool
        Skip the observation noise.
    forward : ForwardMap, optional
        Precomputed forward map of `setup` (saves the propagation).
    """
    from .inference import forward_map

    rng = make_rng(seed)
    x0 = draw_truth(setup, rng) if truth is None else np.asarray(truth, float).ravel()
    fmap = forward if forward is not None else forward_map(setup)
    clean = fmap.apply(x0)
    noise = np.zeros_like(clean) if noiseless else draw_noise(setup, rng)
    return MeasurementSet(clean + noise, seed, x0)
