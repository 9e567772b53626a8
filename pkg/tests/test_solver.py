import math
import warnings

import numpy as np
import pytest
from scipy import stats

from i2c import solver
from i2c.gauss import Gaussian, condition
from i2c.model import LinearDynamics, LinearObservation, QuadraticCost, cost_to_likelihood
from i2c.oracle import batch_posterior_for_scenario, kalman_filter, lqr_for_scenario, rts_smooth
from i2c.solver import (
    JointBelief,
    PolicyWarning,
    Posterior,
    SolverError,
    e_step,
    elbo,
    em_solve,
    expected_cost,
    extract_policy,
    m_step_alpha,
    problem_from_scenario,
)

from helpers import estimation_problem, generic_scenario, lqr_regime_scenario, make_scenario, spd, stable_A


def scalar_cost(T, W=1.0, z=0.0, D=0.0):
    return QuadraticCost(np.array([[W]]), np.full((T, 1), z), np.eye(1), np.array([[D]]), np.zeros(1))


def fake_posterior(problem, means, covs, alpha=1.0):
    beliefs = [JointBelief(t, Gaussian(m, c), Gaussian(m, c)) for t, (m, c) in enumerate(zip(means, covs))]
    terminal = Gaussian(np.zeros(problem.dx), np.eye(problem.dx))
    return Posterior(beliefs, terminal, 0.0, np.zeros(problem.T + 1), alpha, problem, None, None)


class TestEStep:
    def test_scalar_conjugate(self, backend):
        dyn = LinearDynamics(np.eye(1), np.eye(1), np.zeros(1), np.eye(1))
        scen = make_scenario(dyn, scalar_cost(1), Gaussian([0.0], [[1.0]]), 1, u_var=1.0)
        post = e_step(scen, cost_to_likelihood(scen.cost, 1.0), backend=backend)
        f = post[0].filtered
        assert f.mean[0] == pytest.approx(0.0, abs=1e-15) and f.cov[0, 0] == pytest.approx(0.5, abs=1e-15)
        assert len(post) == 1 and post[0].smoothed.dim == 2

    def test_known_inputs_reduce_to_rts(self, backend):
        rng = np.random.default_rng(3)
        dx, du, T = 3, 2, 8
        dyn = LinearDynamics(stable_A(rng, dx), rng.standard_normal((dx, du)), 0.1 * rng.standard_normal(dx),
                             0.1 * spd(rng, dx))
        cost = QuadraticCost(np.eye(dx), np.zeros((T, dx)), np.eye(dx), np.zeros((dx, du)), np.zeros(dx))
        u = rng.standard_normal((T, du))
        x0 = Gaussian(rng.standard_normal(dx), spd(rng, dx))
        scen = make_scenario(dyn, cost, x0, T, u_var=1e-12, u_mean=u)
        post = e_step(scen, cost_to_likelihood(cost, 1e-12), backend=backend)
        obs = LinearObservation(np.eye(dx), np.zeros((dx, du)), np.zeros(dx), np.eye(dx))
        ref = rts_smooth(kalman_filter(dyn, obs, x0, [], u), dyn)
        for b, g in zip(post, ref.smoothed):
            assert np.allclose(b.smoothed.mean[:dx], g.mean, atol=1e-6, rtol=0)
            assert np.allclose(b.smoothed.cov[:dx, :dx], g.cov, atol=1e-6, rtol=0)

    def test_no_information_gives_prior_rollout(self, backend):
        dyn = LinearDynamics(np.array([[1.0, 0.1], [0.0, 0.95]]), np.array([[0.0], [0.1]]), np.array([0.01, 0.0]),
                             np.zeros((2, 2)))
        cost = QuadraticCost(np.eye(3), np.zeros((5, 3)), np.vstack([np.eye(2), np.zeros((1, 2))]),
                             np.array([[0.0], [0.0], [1.0]]), np.zeros(3))
        scen = make_scenario(dyn, cost, Gaussian([1.0, -0.5], np.diag([0.3, 0.2])), 5, u_var=0.5,
                             u_mean=np.full((5, 1), 0.2))
        post = e_step(scen, cost_to_likelihood(cost, 1e-14), backend=backend)
        prior = scen.prior_rollout()
        for b, g in zip(post, prior):
            assert np.allclose(b.smoothed.mean[:2], g.mean, atol=1e-10)
            assert np.allclose(b.smoothed.cov[:2, :2], g.cov, atol=1e-10)
        assert np.allclose(post.terminal.mean, prior[-1].mean, atol=1e-10)

    def test_non_finite_reports_timestep(self, backend):
        dyn = LinearDynamics(np.array([[1e200]]), np.eye(1), np.zeros(1), np.eye(1))
        scen = make_scenario(dyn, scalar_cost(4), Gaussian([1.0], [[1.0]]), 4)
        with pytest.raises(SolverError, match="timestep"):
            e_step(scen, cost_to_likelihood(scen.cost, 1.0), backend=backend)

    def test_beliefs_psd(self, backend):
        rng = np.random.default_rng(0)
        scen = generic_scenario(rng, 3, 2, 8, 3)
        post = e_step(scen, cost_to_likelihood(scen.cost, 2.0), backend=backend)
        for b in post:
            for g in (b.filtered, b.smoothed):
                assert g.dim == 5 and np.min(np.linalg.eigvalsh(g.cov)) > -1e-9


class TestExtractPolicy:
    def test_hand_value(self):
        g = solver.conditional_gain(Gaussian([0, 0], [[1, 0.5], [0.5, 1]]), 1)
        assert g.K[0, 0] == pytest.approx(0.5, abs=1e-15)
        assert g.k[0] == pytest.approx(0.0, abs=1e-15)
        assert g.SigmaK[0, 0] == pytest.approx(0.75, abs=1e-15)

    def test_uncorrelated(self):
        g = solver.conditional_gain(Gaussian([1, 2, 3], np.diag([1.0, 2.0, 3.0])), 2)
        assert np.array_equal(g.K, np.zeros((1, 2))) and g.SigmaK[0, 0] == 3.0 and g.k[0] == 3.0

    def test_matches_condition(self):
        rng = np.random.default_rng(1)
        scen = generic_scenario(rng, 3, 2, 6, 0)
        post = e_step(scen, cost_to_likelihood(scen.cost, 1.0))
        for b, p in zip(post, extract_policy(post)):
            for _ in range(100):
                x = rng.standard_normal(3) * 3
                c = condition(b.smoothed, x, b_block=[0, 1, 2])
                assert np.allclose(p.mean_action(x), c.mean, atol=1e-10, rtol=0)
                assert np.allclose(p.SigmaK, c.cov, atol=1e-10, rtol=0)

    def test_singular_state_covariance_warns(self):
        joint = Gaussian([0, 0, 0], [[1, 1, 0.5], [1, 1, 0.5], [0.5, 0.5, 1]])
        with pytest.warns(PolicyWarning, match=r"t=4.*condition number"):
            g = solver.conditional_gain(joint, 2, t=4)
        assert np.all(np.isfinite(g.K))
        assert np.allclose(g.K @ np.array([1.0, 1.0]), [0.5])


class TestMStep:
    def problem(self, T=2, W=1.0):
        dyn = LinearDynamics(np.eye(1), np.eye(1), np.zeros(1), np.eye(1))
        scen = make_scenario(dyn, scalar_cost(T, W), Gaussian([0.0], [[1.0]]), T)
        return problem_from_scenario(scen)

    def test_hand_value(self):
        # z = x, z* = 0, each step contributes x^2 = 2: sum E = 4 over N = 2, dz = 1
        post = fake_posterior(self.problem(), [[math.sqrt(2), 0.0]] * 2, [np.zeros((2, 2))] * 2)
        assert expected_cost(post) == pytest.approx(4.0, rel=1e-15)
        a = m_step_alpha(post)
        assert a == pytest.approx(0.5, rel=1e-15)
        grid = np.linspace(1e-4, 10, 100001)
        bound = 0.5 * (2 * np.log(grid) - grid * 4.0)
        assert grid[np.argmax(bound)] == pytest.approx(0.5, abs=1e-4)

    def test_fixed_point(self):
        post = fake_posterior(self.problem(3), [[0.0, 0.0]] * 3, [np.diag([1.0, 5.0])] * 3)
        assert m_step_alpha(post) == pytest.approx(1.0, rel=1e-15)

    def test_doubling_cost_halves_alpha(self):
        means, covs = [[0.7, 0.1], [-0.3, 0.2]], [np.diag([0.2, 1.0])] * 2
        a1 = m_step_alpha(fake_posterior(self.problem(W=1.0), means, covs))
        a2 = m_step_alpha(fake_posterior(self.problem(W=2.0), means, covs))
        assert a2 == pytest.approx(a1 / 2, rel=1e-14)

    def test_zero_cost_clamps_and_reports(self):
        trace = solver.EMTrace()
        post = fake_posterior(self.problem(), [[0.0, 0.0]] * 2, [np.zeros((2, 2))] * 2)
        assert m_step_alpha(post, trace=trace) == solver.ALPHA_MAX
        assert trace.warnings and "clamped" in trace.warnings[0]

    def test_includes_covariance_term(self, backend):
        rng = np.random.default_rng(2)
        scen = generic_scenario(rng, 2, 1, 5, 0)
        post = e_step(scen, cost_to_likelihood(scen.cost, 1.5), backend=backend)
        W, H = scen.cost.W, scen.cost.H
        total = 0.0
        for t, b in enumerate(post):
            r = H @ b.smoothed.mean + scen.cost.e - scen.cost.z_star[t]
            total += r @ W @ r + np.trace(W @ H @ b.smoothed.cov @ H.T)
        assert m_step_alpha(post, scen) == pytest.approx(5 * scen.dz / total, rel=1e-12)


class TestElbo:
    def test_one_step_scalar_predictive(self, backend):
        dyn = LinearDynamics(np.array([[0.8]]), np.array([[0.5]]), np.zeros(1), np.array([[0.3]]))
        cost = QuadraticCost(np.array([[2.0]]), np.array([[0.7]]), np.array([[1.0]]), np.array([[0.4]]),
                             np.array([0.1]))
        scen = make_scenario(dyn, cost, Gaussian([0.2], [[1.5]]), 1, u_var=0.8)
        alpha = 1.3
        post = e_step(scen, cost_to_likelihood(cost, alpha), backend=backend)
        # z = x + 0.4 u + 0.1 + v, v ~ N(0, 1/(alpha W))
        mean = 0.2 + 0.1
        var = 1.5 + 0.16 * 0.8 + 1 / (alpha * 2.0)
        ref = stats.norm(mean, math.sqrt(var)).logpdf(0.7)
        assert elbo(post) == pytest.approx(ref, abs=1e-12)
        assert post.loglik == pytest.approx(ref, abs=1e-12)

    def test_equals_filter_loglik_of_equivalent_system(self, backend):
        rng = np.random.default_rng(8)
        for _ in range(5):
            dyn, mm, x0, u, ys = estimation_problem(rng, dx=3, du=1, dy=2, T=6)
            mm = LinearObservation(mm.C, np.zeros_like(mm.D), mm.e, mm.SigmaV)
            T = len(ys)
            cost = QuadraticCost(np.eye(1), np.zeros((0, 1)), np.zeros((1, 3)), np.eye(1), np.zeros(1))
            scen = make_scenario(dyn, cost, x0, T, tau=T, mm=mm, meas=ys, u_var=0.5, u_mean=u)
            post = e_step(scen, cost_to_likelihood(cost, 1.0), backend=backend)
            # control noise folds into process noise for the known-input filter
            eq = LinearDynamics(dyn.A, dyn.B, dyn.c, dyn.SigmaW + 0.5 * dyn.B @ dyn.B.T)
            ref = kalman_filter(eq, mm, x0, ys, u).loglik
            assert elbo(post) == pytest.approx(ref, abs=1e-8)
            assert post.loglik == pytest.approx(ref, abs=1e-8)

    def test_uninformative_likelihood_is_normalizer_only(self, backend):
        rng = np.random.default_rng(4)
        scen = generic_scenario(rng, 2, 1, 4, 0)
        lik = cost_to_likelihood(scen.cost, 1e-10)
        post = e_step(scen, lik, backend=backend)
        assert post.loglik == pytest.approx(4 * lik.log_beta, abs=1e-6)
        terms = solver.elbo_terms(post)
        assert terms.likelihood == pytest.approx(4 * lik.log_beta, abs=1e-6)

    def test_moment_form_equals_innovation_form(self, backend):
        rng = np.random.default_rng(5)
        for _ in range(10):
            scen = generic_scenario(rng, int(rng.integers(1, 4)), int(rng.integers(1, 3)), 7, int(rng.integers(0, 7)))
            post = e_step(scen, cost_to_likelihood(scen.cost, rng.uniform(0.1, 3)), backend=backend)
            assert elbo(post) == pytest.approx(post.loglik, abs=1e-8)


class TestEm:
    def test_scalar_lqr_regime(self, backend):
        dyn = LinearDynamics(np.eye(1), np.eye(1), np.zeros(1), 1e-8 * np.eye(1))
        cost = QuadraticCost(np.eye(2), np.zeros((2, 2)), np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]]),
                             np.zeros(2), terminal=None)
        from i2c.model import TerminalCost

        cost = QuadraticCost(cost.W, cost.z_star, cost.C, cost.D, cost.e, TerminalCost(np.eye(1), np.zeros(1)))
        scen = make_scenario(dyn, cost, Gaussian([1.0], [[1e-6]]), 2)
        _, policy, trace = em_solve(scen, backend=backend)
        assert trace.converged
        assert policy[0].K[0, 0] == pytest.approx(-0.6, abs=1e-6)
        assert policy[1].K[0, 0] == pytest.approx(-0.5, abs=1e-6)

    def test_huge_tol_single_iteration(self, backend):
        scen, _, _ = lqr_regime_scenario(np.random.default_rng(0))
        _, _, trace = em_solve(scen, tol=1e30, backend=backend)
        assert trace.iterations == 1 and len(trace.elbos) == 1 and trace.converged

    def test_max_iters_respected(self):
        scen, _, _ = lqr_regime_scenario(np.random.default_rng(0))
        _, _, trace = em_solve(scen, max_iters=2, tol=0.0)
        assert trace.iterations == 2 and not trace.converged

    def test_alpha0_basin(self, backend):
        rng = np.random.default_rng(5)
        scen = generic_scenario(rng, 2, 1, 10, 0)
        ref = em_solve(scen, alpha0=1.0, tol=1e-14, max_iters=1000, backend=backend).policy
        for a0 in (1e-3, 1e-1, 10.0, 1e3):
            pol = em_solve(scen, alpha0=a0, tol=1e-14, max_iters=1000, backend=backend).policy
            for p, q in zip(pol, ref):
                assert np.allclose(p.K, q.K, atol=1e-6) and np.allclose(p.k, q.k, atol=1e-6)

    def test_monotone_on_generic_scenarios(self, backend):
        rng = np.random.default_rng(6)
        for _ in range(10):
            scen = generic_scenario(rng, int(rng.integers(1, 4)), int(rng.integers(1, 3)), 8, int(rng.integers(0, 8)))
            trace = em_solve(scen, tol=1e-12, backend=backend).trace
            assert np.all(np.diff(trace.elbos) >= -1e-9)

    def test_decrease_is_hard_failure(self, monkeypatch):
        rng = np.random.default_rng(6)
        scen = generic_scenario(rng, 2, 1, 6, 0)
        # an M-step that overshoots far past the optimum must lower the ELBO
        monkeypatch.setattr(solver, "m_step_alpha", lambda post, trace=None: post.alpha * 1e4)
        with pytest.raises(SolverError, match="ELBO decreased"):
            em_solve(scen, tol=0.0)

    def test_bad_alpha0(self):
        scen, _, _ = lqr_regime_scenario(np.random.default_rng(0))
        with pytest.raises(ValueError):
            em_solve(scen, alpha0=0.0)

    def test_unpacks(self):
        scen, _, _ = lqr_regime_scenario(np.random.default_rng(1))
        beliefs, policy, trace = em_solve(scen)
        assert len(beliefs) == len(policy) == scen.T and trace.iterations == len(trace.alphas)


def test_smoothed_joints_match_dense_posterior(backend):
    rng = np.random.default_rng(10)
    for _ in range(5):
        scen = generic_scenario(rng, 2, 2, 5, 2)
        post = e_step(scen, cost_to_likelihood(scen.cost, 0.7), backend=backend)
        joints, xT, ll = batch_posterior_for_scenario(scen, 0.7)
        for b, j in zip(post, joints):
            assert np.allclose(b.smoothed.mean, j.mean, atol=1e-8)
            assert np.allclose(b.smoothed.cov, j.cov, atol=1e-8)
        assert post.loglik == pytest.approx(ll, abs=1e-8)


def test_lqr_for_scenario_is_controlled_segment():
    scen, Q, R = lqr_regime_scenario(np.random.default_rng(3))
    assert lqr_for_scenario(scen).T == scen.T
