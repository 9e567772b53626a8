"""One objective for past estimation and future control.

Steps before the switch time ``tau`` are observed through the measurement model;
from ``tau`` on the observation model is the cost likelihood. A single EM run over
the whole chain then gives state estimates for the past and feedback gains for the
future.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .gauss import Gaussian, GaussianError, symmetrize
from .model import CostLikelihood, LinearObservation, Scenario, cost_to_likelihood
from .solver import EMTrace, Posterior, em_solve


@dataclass(frozen=True, eq=False)
class TimeVaryingObservation:
    per_step: tuple
    switch_time: int

    def __len__(self):
        return len(self.per_step)

    def __getitem__(self, t) -> LinearObservation:
        return self.per_step[t]


def build_time_varying(scenario: Scenario, lik: CostLikelihood) -> TimeVaryingObservation:
    tau = scenario.tau
    if not 0 <= tau <= scenario.T:
        raise ValueError(f"tau={tau} outside [0, {scenario.T}]")
    steps = [scenario.measure_model] * tau + [lik.obs] * (scenario.T - tau)
    return TimeVaryingObservation(tuple(steps), tau)


@dataclass(eq=False)
class UnifiedSolution:
    beliefs: Posterior
    policy: list
    estimation_loglik: float
    trace: EMTrace

    @property
    def tau(self) -> int:
        return self.beliefs.problem.T - len(self.policy)


def solve_unified(scenario: Scenario, alpha0: float = 1.0, max_iters: int = 100,
                  tol: float = 1e-8, backend: Optional[str] = None) -> UnifiedSolution:
    """EM over the chain with measurements before ``tau`` and cost targets after.

    Only the cost steps enter the alpha update; the measurement noise is fixed.
    ``estimation_loglik`` is ``log p(y*_0 .. y*_{tau-1})``, the sum of the filter
    innovations over the estimation segment.
    """
    beliefs, policy, trace = em_solve(scenario, alpha0, max_iters, tol, use_measurements=True,
                                      backend=backend)
    est_ll = float(np.sum(beliefs.step_loglik[: scenario.tau]))
    return UnifiedSolution(beliefs, policy[scenario.tau:], est_ll, trace)


def apply_feedback(prior_joint: Gaussian, updated_state: Gaussian) -> Gaussian:
    """Control marginal after swapping the state marginal of ``prior_joint``.

    Integrates the linear conditional ``p(u | x)`` of the prior joint against
    ``updated_state``: the mean moves by ``K (mu_x' - mu_x)`` and the covariance is
    ``S_uu - S_ux S_xx^-1 S_xu + K S'_xx K^T``.
    """
    dx = updated_state.dim
    if not 0 < dx < prior_joint.dim:
        raise GaussianError("updated state dimension does not fit inside the joint")
    S = prior_joint.cov
    Sxx, Sux, Suu = S[:dx, :dx], S[dx:, :dx], S[dx:, dx:]
    try:
        L = np.linalg.cholesky(Sxx)
    except np.linalg.LinAlgError:
        raise GaussianError(
            f"prior state covariance is singular (condition number {np.linalg.cond(Sxx):.3e})"
        ) from None
    K = np.linalg.solve(L.T, np.linalg.solve(L, Sux.T)).T
    mean = prior_joint.mean[dx:] + K @ (updated_state.mean - prior_joint.mean[:dx])
    cov = Suu - K @ Sux.T + K @ updated_state.cov @ K.T
    return Gaussian(mean, symmetrize(cov), check=False)


def likelihood(scenario: Scenario, alpha: float) -> CostLikelihood:
    return cost_to_likelihood(scenario.cost, alpha)
