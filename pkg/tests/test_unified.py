import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from i2c.gauss import Gaussian, GaussianError
from i2c.model import QuadraticCost, load_scenario
from i2c.oracle import kalman_filter, lqr_for_scenario, rts_smooth
from i2c.solver import em_solve
from i2c.unified import apply_feedback, build_time_varying, likelihood, solve_unified

from helpers import estimation_problem, generic_scenario, make_scenario, spd

SCENARIOS = Path(__file__).parent.parent / "scenarios"


class TestTimeVarying:
    def scen(self, T, tau):
        return generic_scenario(np.random.default_rng(0), 2, 1, T, tau)

    def test_tau_zero(self):
        s = self.scen(4, 0)
        tv = build_time_varying(s, likelihood(s, 2.0))
        assert len(tv) == 4 and all(o is tv[0] for o in tv.per_step)
        assert np.allclose(tv[0].SigmaV, np.linalg.inv(2.0 * s.cost.W))

    def test_tau_full(self):
        s = self.scen(4, 4)
        tv = build_time_varying(s, likelihood(s, 2.0))
        assert all(o is s.measure_model for o in tv.per_step)

    def test_switch(self):
        s = self.scen(4, 2)
        lik = likelihood(s, 3.0)
        tv = build_time_varying(s, lik)
        assert tv.switch_time == 2
        assert np.array_equal(tv[0].SigmaV, s.measure_model.SigmaV)
        assert np.array_equal(tv[1].SigmaV, s.measure_model.SigmaV)
        for t in (2, 3):
            assert np.allclose(tv[t].SigmaV @ (3.0 * s.cost.W), np.eye(s.dz), atol=1e-12)

    def test_out_of_range(self):
        s = self.scen(4, 2)
        with pytest.raises(ValueError):
            build_time_varying(replace(s, tau=5), likelihood(s, 1.0))


class TestSolveUnified:
    def test_pure_estimation_matches_kalman(self, backend):
        rng = np.random.default_rng(2)
        for _ in range(5):
            dyn, mm, x0, u, ys = estimation_problem(rng, dx=3, du=2, T=8)
            T = len(ys)
            cost = QuadraticCost(np.eye(1), np.zeros((0, 1)), np.zeros((1, 3)), np.array([[1.0, 0.0]]), np.zeros(1))
            scen = make_scenario(dyn, cost, x0, T, tau=T, mm=mm, meas=ys, u_var=1e-12, u_mean=u)
            sol = solve_unified(scen, backend=backend)
            assert sol.policy == [] and sol.tau == T
            ref = rts_smooth(kalman_filter(dyn, mm, x0, ys, u), dyn)
            for b, g in zip(sol.beliefs, ref.smoothed):
                assert np.allclose(b.smoothed.mean[:3], g.mean, atol=1e-8)
                assert np.allclose(b.smoothed.cov[:3, :3], g.cov, atol=1e-8)

    def test_tau_zero_is_control(self, backend):
        scen = generic_scenario(np.random.default_rng(3), 2, 1, 6, 0)
        a = solve_unified(scen, backend=backend)
        b = em_solve(scen, backend=backend)
        assert a.trace.alphas == b.trace.alphas and a.trace.elbos == b.trace.elbos
        for p, q in zip(a.policy, b.policy):
            assert np.array_equal(p.K, q.K) and np.array_equal(p.k, q.k)
        assert a.estimation_loglik == 0.0

    def test_estimation_loglik_is_measurement_evidence(self, backend):
        scen = generic_scenario(np.random.default_rng(4), 2, 1, 8, 4)
        sol = solve_unified(scen, backend=backend)
        assert sol.estimation_loglik == pytest.approx(float(np.sum(sol.beliefs.step_loglik[:4])))
        assert len(sol.policy) == 4 and sol.policy[0].t == 4

    def test_policy_only_on_control_segment(self):
        scen = generic_scenario(np.random.default_rng(5), 2, 1, 9, 3)
        sol = solve_unified(scen)
        assert [p.t for p in sol.policy] == list(range(3, 9))

    def test_separation_on_golden_scenario(self):
        scen = load_scenario(SCENARIOS / "switch_tracking.json")
        sol = solve_unified(scen)
        tau = scen.tau
        chain = sol.beliefs.chain
        ctrl_prior = Gaussian(chain.pm[tau], chain.pP[tau])
        rest = replace(scen, T=scen.T - tau, tau=0, x0_prior=ctrl_prior, u_prior=scen.u_prior[tau:],
                       measurements=np.zeros((0, scen.dy))).validate()
        alone = em_solve(rest)
        for p, q in zip(sol.policy, alone.policy):
            assert np.allclose(p.K, q.K, atol=1e-9) and np.allclose(p.k, q.k, atol=1e-9)
        # from the smoothed state at tau the cost information is counted twice, but the
        # estimate is sharp enough that the gains still agree closely
        sm = sol.beliefs[tau].smoothed
        rest2 = replace(rest, x0_prior=Gaussian(sm.mean[:2], sm.cov[:2, :2])).validate()
        alone2 = em_solve(rest2)
        for p, q in zip(sol.policy, alone2.policy):
            assert np.allclose(p.K, q.K, atol=1e-5)

    def test_estimation_covariances_below_prior(self):
        scen = load_scenario(SCENARIOS / "estimate_sim.json")
        sol = solve_unified(scen)
        prior = scen.prior_rollout()
        for b, g in zip(sol.beliefs, prior):
            assert np.min(np.linalg.eigvalsh(g.cov - b.smoothed.cov[:2, :2])) >= -1e-10


class TestApplyFeedback:
    def test_unchanged_state(self):
        rng = np.random.default_rng(0)
        j = Gaussian(rng.standard_normal(4), spd(rng, 4))
        out = apply_feedback(j, Gaussian(j.mean[:2], j.cov[:2, :2]))
        assert np.allclose(out.mean, j.mean[2:], atol=1e-12) and np.allclose(out.cov, j.cov[2:, 2:], atol=1e-12)

    def test_delta_state(self):
        rng = np.random.default_rng(1)
        j = Gaussian(rng.standard_normal(3), spd(rng, 3))
        out = apply_feedback(j, Gaussian(j.mean[:2], np.zeros((2, 2))))
        S = j.cov
        schur = S[2:, 2:] - S[2:, :2] @ np.linalg.solve(S[:2, :2], S[:2, 2:])
        assert np.allclose(out.mean, j.mean[2:], atol=1e-12) and np.allclose(out.cov, schur, atol=1e-12)

    def test_hand_value(self):
        out = apply_feedback(Gaussian([0, 0], [[1, 0.5], [0.5, 1]]), Gaussian([1.0], [[0.0]]))
        assert out.mean[0] == pytest.approx(0.5, abs=1e-15)
        assert out.cov[0, 0] == pytest.approx(0.75, abs=1e-15)

    def test_singular_prior_state(self):
        with pytest.raises(GaussianError, match="condition number"):
            apply_feedback(Gaussian([0, 0, 0], [[1, 1, 0], [1, 1, 0], [0, 0, 1]]), Gaussian([0, 0], np.eye(2)))

    def test_monte_carlo(self):
        rng = np.random.default_rng(42)
        j = Gaussian(rng.standard_normal(3), spd(rng, 3))
        new = Gaussian(rng.standard_normal(2), spd(rng, 2))
        out = apply_feedback(j, new)
        n = 10**6
        xs = rng.multivariate_normal(new.mean, new.cov, size=n)
        S = j.cov
        K = S[2:, :2] @ np.linalg.inv(S[:2, :2])
        sd = math.sqrt(S[2, 2] - (K @ S[:2, 2:])[0, 0])
        us = j.mean[2] + (xs - j.mean[:2]) @ K[0] + sd * rng.standard_normal(n)
        var = out.cov[0, 0]
        assert abs(us.mean() - out.mean[0]) < 3 * math.sqrt(var / n)
        assert abs(us.var() - var) < 3 * var * math.sqrt(2.0 / n)
