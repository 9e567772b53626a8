"""Policy selection over a fixed ensemble by accumulated future free energy.

Each policy is scored by pinning the controls of the chain on ``[tau, T)`` to the
policy and reading off the negative log-evidence of the cost targets under it.
The posterior over policies is ``softmax(log_prior + gamma * F)``. There is no sign
flip on ``gamma * F``; pass a negative gamma to prefer low free energy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .model import DEFAULT_PIN_VAR, CostLikelihood, Scenario, ScenarioError
from .solver import PolicyGain, problem_from_scenario, run_chain

SIMPLEX_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class FixedPolicy:
    """Open-loop controls (one row per step in ``[tau, T)``) or a gain sequence."""

    name: str
    controls: Optional[np.ndarray] = None
    gains: Optional[tuple] = None

    def __post_init__(self):
        if (self.controls is None) == (self.gains is None):
            raise ValueError(f"policy {self.name!r}: give exactly one of controls or gains")

    @property
    def horizon(self) -> int:
        return len(self.controls) if self.controls is not None else len(self.gains)


@dataclass(frozen=True, eq=False)
class PolicyEnsemble:
    policies: tuple
    log_prior: np.ndarray
    gamma: float

    def __post_init__(self):
        lp = np.asarray(self.log_prior, dtype=float)
        if lp.shape != (len(self.policies),):
            raise ValueError(f"log_prior has {lp.size} entries for {len(self.policies)} policies")
        if not np.isfinite(self.gamma):
            raise ValueError("gamma must be finite")
        total = float(np.exp(lp).sum())
        if abs(total - 1.0) > SIMPLEX_TOL:
            raise ValueError(f"exp(log_prior) sums to {total!r}, expected 1")
        object.__setattr__(self, "log_prior", lp)

    def __len__(self):
        return len(self.policies)

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.policies]


def ensemble_from_dict(block: dict, du: int, horizon: int) -> PolicyEnsemble:
    """Parse a scenario ``ensemble`` block. A missing ``log_prior`` means uniform."""
    try:
        entries = block["policies"]
        gamma = float(block.get("gamma", 1.0))
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"ensemble: {exc}") from None
    if not entries:
        raise ScenarioError("ensemble.policies: empty")
    policies = []
    for i, entry in enumerate(entries):
        name = str(entry.get("name", f"policy_{i}"))
        u = np.array(entry.get("controls"), dtype=float)
        if u.ndim == 1 and du == 1:
            u = u.reshape(-1, 1)
        if u.shape != (horizon, du):
            raise ScenarioError(
                f"ensemble.policies[{i}].controls: dimension mismatch, expected ({horizon}, {du}), got {u.shape}"
            )
        if not np.all(np.isfinite(u)):
            raise ScenarioError(f"ensemble.policies[{i}].controls: non-finite entries")
        policies.append(FixedPolicy(name, controls=u))
    n = len(policies)
    lp = block.get("log_prior", [-np.log(n)] * n)
    try:
        return PolicyEnsemble(tuple(policies), np.array(lp, dtype=float), gamma)
    except ValueError as exc:
        raise ScenarioError(f"ensemble: {exc}") from None


def policy_free_energy(policy: Union[FixedPolicy, Sequence], scenario: Scenario, lik: CostLikelihood,
                       pin_var: float = DEFAULT_PIN_VAR, backend: Optional[str] = None) -> float:
    """Free energy of the cost targets on ``[tau, T)`` with controls fixed by ``policy``.

    Open-loop controls become near-delta control priors (variance ``pin_var``). A gain
    sequence becomes the conditional prior ``u_t = K_t x_t + k_t + N(0, SigmaK_t)``,
    with ``SigmaK_t`` floored at ``pin_var``. The returned value is the negated sum
    of the per-step log-evidence terms from ``tau`` on, terminal cost included.
    """
    if not isinstance(policy, FixedPolicy):
        policy = FixedPolicy("policy", controls=np.asarray(policy, dtype=float))
    tau, n = scenario.tau, scenario.n_controlled
    if policy.horizon != n:
        raise ValueError(f"policy {policy.name!r} covers {policy.horizon} steps, horizon needs {n}")
    problem = problem_from_scenario(scenario)
    du, dx = scenario.du, scenario.dx
    mu_u = problem.mu_u.copy()
    Su = problem.Su.copy()
    Kp = problem.Kp.copy()
    floor = pin_var * np.eye(du)
    if policy.controls is not None:
        u = np.asarray(policy.controls, dtype=float).reshape(n, du)
        mu_u[tau:] = u
        Su[tau:] = floor
    else:
        for i, g in enumerate(policy.gains):
            g: PolicyGain
            Kp[tau + i] = np.asarray(g.K).reshape(du, dx)
            mu_u[tau + i] = g.k
            Su[tau + i] = np.asarray(g.SigmaK) + floor
    problem.mu_u, problem.Su, problem.Kp = mu_u, Su, Kp
    post = run_chain(problem, lik.precision, lik.terminal_precision, lik.alpha, backend)
    return float(-post.step_loglik[tau:].sum())


def policy_posterior(ensemble: PolicyEnsemble, free_energies) -> np.ndarray:
    """``softmax(log_prior + gamma * F)``, computed with max-subtraction."""
    F = np.asarray(free_energies, dtype=float)
    if F.shape != (len(ensemble),):
        raise ValueError(f"got {F.size} free energies for {len(ensemble)} policies")
    if not np.all(np.isfinite(F)):
        raise ValueError("free energies must be finite")
    if ensemble.gamma == 0.0:
        return np.exp(ensemble.log_prior)
    s = ensemble.log_prior + ensemble.gamma * F
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite policy scores")
    w = np.exp(s - s.max())
    return w / w.sum()


@dataclass(frozen=True, eq=False)
class EnsembleScore:
    names: list
    free_energies: np.ndarray
    posterior: np.ndarray


def score_ensemble(ensemble: PolicyEnsemble, scenario: Scenario, lik: CostLikelihood,
                   pin_var: float = DEFAULT_PIN_VAR, backend: Optional[str] = None) -> EnsembleScore:
    F = np.array([policy_free_energy(p, scenario, lik, pin_var, backend) for p in ensemble.policies])
    return EnsembleScore(ensemble.names, F, policy_posterior(ensemble, F))
