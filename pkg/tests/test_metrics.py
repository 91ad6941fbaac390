"""Tests for the Förstner distance and the Bayes risk.

Oracles
-------
- Förstner: ``sqrt(trace(ln^2(A^{-1/2} B A^{-1/2})))`` by eigendecomposition;
  ``A = e^2 I_2, B = I_2`` gives ``2 sqrt 2``.
- Exact risk: the literal trace formula
  ``trace(Gamma_pos^{-1}[(I - N G) Gamma_pr (I - N G)^T + N Gamma_obs N^T])``
  with G and Gamma_obs materialized; the exact posterior mean has risk d.
- Empirical risk: Monte Carlo average over independent trials.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from balred import gramians, inference, metrics, models, reduction
from balred.errors import DefinitenessError
from balred.linalg import SymFactor
from balred.models import InferenceSetup, LtiSystem


def random_spd(rng, n):
    M = rng.standard_normal((n, n))
    return M @ M.T + 0.5 * np.eye(n)


def matrix_function_oracle(A, B):
    lam, V = np.linalg.eigh(A)
    Ais = V @ np.diag(lam**-0.5) @ V.T
    s = np.linalg.eigvalsh(Ais @ B @ Ais)
    return math.sqrt(np.sum(np.log(s) ** 2))


def random_setup(seed, d=4, p=1, n=5):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((d, d)) / np.sqrt(d)
    A = M - (np.max(np.linalg.eigvals(M).real) + 0.3) * np.eye(d)
    return InferenceSetup(LtiSystem(A, rng.standard_normal((p, d))),
                          SymFactor(rng.standard_normal((d, d)) + 2 * np.eye(d)),
                          0.3 * np.eye(p), 0.25 * np.arange(1, n + 1))


def dense_forward(setup):
    return np.vstack(list(inference.forward_map(setup).blocks))


def dense_trace_risk(N, setup):
    G = dense_forward(setup)
    Gobs = np.kron(np.eye(setup.n), setup.noise_cov)
    Gpr = setup.prior_cov
    Gpos = np.linalg.inv(G.T @ np.linalg.solve(Gobs, G) + np.linalg.inv(Gpr))
    E = np.eye(setup.system.d) - N @ G
    return float(np.trace(np.linalg.solve(Gpos, E @ Gpr @ E.T + N @ Gobs @ N.T)))


def posterior_mean_map(setup):
    G = dense_forward(setup)
    Gobs = np.kron(np.eye(setup.n), setup.noise_cov)
    Gpos = np.linalg.inv(G.T @ np.linalg.solve(Gobs, G) + np.linalg.inv(setup.prior_cov))
    return Gpos @ G.T @ np.linalg.inv(Gobs)


class TestFoerstner:
    def test_identical(self):
        A = random_spd(np.random.default_rng(0), 4)
        assert metrics.foerstner_distance(A, A) == pytest.approx(0.0, abs=1e-12)

    def test_scaled_identity(self):
        d = metrics.foerstner_distance(np.exp(2.0) * np.eye(2), np.eye(2))
        assert d == pytest.approx(2.8284271247, abs=1e-10)

    def test_not_spd(self):
        with pytest.raises(DefinitenessError):
            metrics.foerstner_distance(np.diag([1.0, 0.0]), np.eye(2))
        with pytest.raises(DefinitenessError):
            metrics.foerstner_distance(np.eye(2), np.diag([1.0, -1.0]))

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31), n=st.integers(1, 6))
    def test_oracle_and_symmetry(self, seed, n):
        rng = np.random.default_rng(seed)
        A, B = random_spd(rng, n), random_spd(rng, n)
        d = metrics.foerstner_distance(A, B)
        assert d == pytest.approx(matrix_function_oracle(A, B), abs=1e-10, rel=1e-10)
        assert abs(d - metrics.foerstner_distance(B, A)) <= 1e-10 * max(1.0, d)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31), n=st.integers(1, 6))
    def test_congruence(self, seed, n):
        rng = np.random.default_rng(seed)
        A, B = random_spd(rng, n), random_spd(rng, n)
        M = rng.standard_normal((n, n)) + 2 * np.eye(n)
        if np.linalg.cond(M) > 1e3:
            return
        d1 = metrics.foerstner_distance(A, B)
        d2 = metrics.foerstner_distance(M @ A @ M.T, M @ B @ M.T)
        assert abs(d1 - d2) <= 1e-8 * max(1.0, d1)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31), n=st.integers(1, 6), ka=st.integers(0, 6),
           kb=st.integers(0, 6))
    def test_factored(self, seed, n, ka, kb):
        rng = np.random.default_rng(seed)
        Xa, Xb = rng.standard_normal((ka, n)), rng.standard_normal((kb, n))
        Ka, Kb = np.eye(n) + Xa.T @ Xa, np.eye(n) + Xb.T @ Xb
        d = metrics.foerstner_factored(Xa, Xb)
        assert d == pytest.approx(metrics.foerstner_distance(Ka, Kb), abs=1e-10, rel=1e-9)

    def test_factored_resolves_small_differences(self):
        # eigenvalue 1 + 1e-12 next to 1e8: assembled precisions lose it
        Xb = np.diag([1e4, 0.0])
        Xa = np.vstack([Xb, [0.0, 1e-6]])
        assert metrics.foerstner_factored(Xa, Xb) == pytest.approx(1e-12, rel=1e-6)

    def test_posterior_dispatch(self):
        setup = random_setup(1)
        full = inference.full_posterior_operator(setup)
        olr = inference.olr_posterior_operator(setup, 1)
        a = metrics.posterior_foerstner(olr, full)
        b = metrics.foerstner_distance(olr.cov, full.cov)
        assert a == pytest.approx(b, rel=1e-8)
        belief = full.belief(setup, np.zeros((setup.n, 1)))
        plain = inference.GaussianBelief(belief.mean, belief.cov)
        assert metrics.posterior_foerstner(olr, plain) == pytest.approx(b, rel=1e-8)


class TestExactRisk:
    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31), d=st.integers(1, 6), n=st.integers(1, 8))
    def test_posterior_mean_is_d(self, seed, d, n):
        setup = random_setup(seed, d=d, n=n)
        risk = metrics.exact_bayes_risk(inference.full_posterior_operator(setup), setup)
        assert risk.kind == "exact" and risk.std_error is None
        assert abs(risk.value - d) <= 1e-8
        raw = metrics.exact_bayes_risk(posterior_mean_map(setup), setup)
        assert abs(raw.value - d) <= 1e-8

    def test_zero_estimator(self):
        setup = random_setup(2)
        N = np.zeros((4, setup.n))
        G = dense_forward(setup)
        Gpos = np.linalg.inv(G.T @ G / 0.3 + np.linalg.inv(setup.prior_cov))
        ref = np.trace(np.linalg.solve(Gpos, setup.prior_cov))
        assert metrics.exact_bayes_risk(N, setup).value == pytest.approx(ref, rel=1e-10)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_trace_oracle(self, seed):
        setup = random_setup(seed)
        N = np.random.default_rng(seed).standard_normal((4, setup.n))
        ref = dense_trace_risk(N, setup)
        assert metrics.exact_bayes_risk(N, setup).value == pytest.approx(ref, rel=1e-8)
        assert metrics.exact_bayes_risk_trace(N, setup) == pytest.approx(ref, rel=1e-8)

    def test_reduced_and_olr_estimators(self):
        setup = random_setup(3, d=6, n=10)
        ref = metrics.FullReference(setup)
        red = reduction.square_root_bt(setup.system, gramians.lg_gramians(setup),
                                       setup.prior_factor, 2)
        for op in (inference.reduced_posterior_operator(setup, red),
                   inference.olr_posterior_operator(setup, 2)):
            a = metrics.exact_bayes_risk(op, setup, ref).value
            b = metrics.exact_bayes_risk_trace(op, setup)
            assert a == pytest.approx(b, rel=1e-8)
            assert a >= 6 - 1e-10
            assert metrics.excess_risk(op, setup, ref) == pytest.approx(a - 6, abs=1e-10)

    def test_reference_mismatch(self):
        a, b = random_setup(4), random_setup(4)
        with pytest.raises(ValueError):
            metrics.exact_bayes_risk(np.zeros((4, a.n)), a, metrics.FullReference(b))


class TestEmpiricalRisk:
    def scalar_setup(self):
        return InferenceSetup(LtiSystem([[-0.5]], [[1.0]]), SymFactor([[1.5]]), [[0.4]],
                              [0.5, 1.0, 2.0])

    def test_calibration(self):
        setup = self.scalar_setup()
        post = inference.full_posterior_operator(setup)
        exact = metrics.exact_bayes_risk(post, setup).value
        emp = metrics.empirical_bayes_risk(post, setup, 10_000, seed=0)
        assert emp.kind == "empirical" and emp.n_trials == 10_000
        assert abs(emp.value - exact) <= 4 * emp.std_error

    def test_suboptimal_calibration(self):
        setup = self.scalar_setup()
        N = np.array([[0.2, 0.1, 0.0]])
        exact = metrics.exact_bayes_risk(N, setup).value
        emp = metrics.empirical_bayes_risk(lambda m: N @ m.ravel(), setup, 10_000, seed=1)
        assert abs(emp.value - exact) <= 4 * emp.std_error

    def test_deterministic(self):
        setup = random_setup(5)
        post = inference.full_posterior_operator(setup)
        a = metrics.empirical_bayes_risk(post, setup, 100, seed=7)
        b = metrics.empirical_bayes_risk(post, setup, 100, seed=7)
        assert a.value == b.value and a.std_error == b.std_error
        assert metrics.empirical_bayes_risk(post, setup, 100, seed=8).value != a.value

    def test_too_few_trials(self):
        setup = self.scalar_setup()
        with pytest.raises(ValueError):
            metrics.empirical_bayes_risk(inference.full_posterior_operator(setup), setup, 1, 0)


class TestOptimality:
    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 2**31), data=st.data())
    def test_olr_beats_balanced_truncation(self, seed, data):
        setup = random_setup(seed, d=6, p=1, n=12)
        g = gramians.lg_gramians(setup)
        usable = reduction.hankel_values(g.reach_factor, g.obs_factor).size
        r = data.draw(st.integers(1, min(usable, 6)))
        ref = metrics.FullReference(setup)
        red = reduction.square_root_bt(setup.system, g, setup.prior_factor, r)
        tlbt = inference.reduced_posterior_operator(setup, red)
        olr = inference.olr_posterior_operator(setup, r)
        assert (metrics.posterior_foerstner(olr, ref.post)
                <= metrics.posterior_foerstner(tlbt, ref.post) + 1e-10)
        assert (metrics.exact_bayes_risk(olr, setup, ref).value
                <= metrics.exact_bayes_risk(tlbt, setup, ref).value + 1e-10)
