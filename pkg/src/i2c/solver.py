"""Input inference for control (i2c): EM over the joint state-action chain.

The E-step is exact Gaussian filtering and smoothing over ``s_t = [x_t; u_t]`` with the
cost entering as a pseudo-observation of precision ``alpha * W``. The M-step updates
``alpha`` in closed form. Feedback gains are read off the smoothed joints as the
linear conditional of ``u_t`` given ``x_t``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .gauss import LOG_2PI, Gaussian, psd_pinv, symmetrize
from .model import CostLikelihood, Scenario, cost_to_likelihood

log = logging.getLogger(__name__)

ALPHA_MIN = 1e-12
ALPHA_MAX = 1e12
MONOTONE_TOL = 1e-9
PINV_FLOOR = 1e-10


class SolverError(RuntimeError):
    """Numerical failure inside the solver (non-finite values, ELBO decrease)."""


class PolicyWarning(RuntimeWarning):
    pass


@dataclass(frozen=True, eq=False)
class JointBelief:
    t: int
    filtered: Gaussian
    smoothed: Gaussian


@dataclass(frozen=True, eq=False)
class PolicyGain:
    """Affine-Gaussian policy ``u ~ N(K x + k, SigmaK)`` at step ``t``."""

    K: np.ndarray
    k: np.ndarray
    SigmaK: np.ndarray
    t: int

    def mean_action(self, x) -> np.ndarray:
        return self.K @ x + self.k


@dataclass
class EMTrace:
    alphas: list = field(default_factory=list)
    elbos: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    warnings: list = field(default_factory=list)


# --------------------------------------------------------------------------- chain assembly


@dataclass(frozen=True, eq=False)
class StepFactor:
    """Gaussian observation ``target = H s + e + v``, ``v ~ N(0, precision^-1)``."""

    H: np.ndarray
    e: np.ndarray
    precision: np.ndarray
    target: np.ndarray

    def info(self):
        P, H = self.precision, self.H
        r = self.target - self.e
        Pr = P @ r
        sign, logdet = np.linalg.slogdet(P)
        if sign <= 0:
            raise SolverError("observation precision is not positive definite")
        const = P.shape[0] * LOG_2PI - logdet
        return H.T @ P @ H, H.T @ Pr, float(r @ Pr), float(const)


@dataclass(eq=False)
class ChainProblem:
    """Everything the E-step needs, with the cost precision left symbolic in ``alpha``.

    ``fixed`` maps step index to a fixed factor (measurements). Cost steps use
    ``cost_H[t]``, ``cost_e[t]``, ``cost_target[t]`` with precision ``alpha * W``.
    """

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    SW: np.ndarray
    Kp: np.ndarray
    mu_u: np.ndarray
    Su: np.ndarray
    m0: np.ndarray
    P0: np.ndarray
    W: np.ndarray
    cost_steps: list
    cost_H: dict
    cost_e: dict
    cost_target: dict
    fixed: dict = field(default_factory=dict)
    terminal_W: Optional[np.ndarray] = None
    terminal_target: Optional[np.ndarray] = None

    @property
    def T(self) -> int:
        return self.B.shape[0]

    @property
    def dx(self) -> int:
        return self.B.shape[1]

    @property
    def du(self) -> int:
        return self.B.shape[2]

    @property
    def cost_dims(self) -> int:
        d = len(self.cost_steps) * self.W.shape[0]
        if self.terminal_W is not None:
            d += self.terminal_W.shape[0]
        return d

    def factor(self, t: int, precision: np.ndarray) -> Optional[StepFactor]:
        if t in self.fixed:
            return self.fixed[t]
        if t in self.cost_H:
            return StepFactor(self.cost_H[t], self.cost_e[t], precision, self.cost_target[t])
        return None

    def assemble(self, precision: Optional[np.ndarray], terminal_precision=None):
        T, dx = self.T, self.dx
        n = dx + self.du
        Jf = np.zeros((T, n, n))
        hf = np.zeros((T, n))
        const = np.zeros(T + 1)
        kappa = np.zeros(T + 1)
        for t in range(T):
            f = self.factor(t, precision)
            if f is None:
                continue
            Jf[t], hf[t], kappa[t], const[t] = f.info()
        JT = np.zeros((dx, dx))
        hT = np.zeros(dx)
        if self.terminal_W is not None and terminal_precision is not None:
            f = StepFactor(np.eye(dx), np.zeros(dx), terminal_precision, self.terminal_target)
            JT, hT, kappa[T], const[T] = f.info()
        return Jf, hf, JT, hT, const, kappa


def problem_from_scenario(scenario: Scenario, use_measurements: bool = True) -> ChainProblem:
    T, dx, du = scenario.T, scenario.dx, scenario.du
    dyn = scenario.dynamics
    cost = scenario.cost
    fixed = {}
    if use_measurements and scenario.tau > 0:
        mm = scenario.measure_model
        prec = np.linalg.inv(mm.SigmaV)
        prec = symmetrize(prec)
        for t in range(scenario.tau):
            fixed[t] = StepFactor(mm.H, mm.e, prec, scenario.measurements[t])
    steps = list(range(scenario.tau, T))
    H = cost.H
    term = cost.terminal
    return ChainProblem(
        A=np.broadcast_to(dyn.A, (T, dx, dx)),
        B=np.broadcast_to(dyn.B, (T, dx, du)),
        c=np.broadcast_to(dyn.c, (T, dx)),
        SW=np.broadcast_to(dyn.SigmaW, (T, dx, dx)),
        Kp=np.zeros((T, du, dx)),
        mu_u=np.array([g.mean for g in scenario.u_prior]),
        Su=np.array([g.cov for g in scenario.u_prior]),
        m0=scenario.x0_prior.mean,
        P0=scenario.x0_prior.cov,
        W=cost.W,
        cost_steps=steps,
        cost_H={t: H for t in steps},
        cost_e={t: cost.e for t in steps},
        cost_target={t: cost.z_star[t - scenario.tau] for t in steps},
        fixed=fixed,
        terminal_W=None if term is None else term.W,
        terminal_target=None if term is None else term.target,
    )


# --------------------------------------------------------------------------- E-step


@dataclass(eq=False)
class Posterior:
    """Result of one E-step: a sequence of :class:`JointBelief` plus bookkeeping."""

    beliefs: list
    terminal: Gaussian
    loglik: float
    step_loglik: np.ndarray
    alpha: float
    problem: ChainProblem
    chain: kernels.ChainResult
    assembled: tuple

    def __len__(self):
        return len(self.beliefs)

    def __iter__(self):
        return iter(self.beliefs)

    def __getitem__(self, i):
        return self.beliefs[i]


def run_chain(problem: ChainProblem, precision, terminal_precision=None, alpha: float = np.nan,
              backend: Optional[str] = None) -> Posterior:
    assembled = problem.assemble(precision, terminal_precision)
    Jf, hf, JT, hT, const, kappa = assembled
    with np.errstate(over="ignore", invalid="ignore"):
        # overflow shows up as non-finite output and is reported below
        res = kernels.forward_backward(
            problem.A, problem.B, problem.c, problem.SW, problem.Kp, problem.mu_u, problem.Su,
            problem.m0, problem.P0, Jf, hf, JT, hT, backend=backend,
        )
    for name in ("sm", "sP", "lfrag"):
        arr = getattr(res, name)
        if not np.all(np.isfinite(arr)):
            bad = np.argwhere(~np.isfinite(arr.reshape(arr.shape[0], -1)).all(axis=1))
            raise SolverError(f"non-finite values in the E-step at timestep {int(bad[0, 0])}")
    step_ll = -0.5 * (const + kappa + res.lfrag)
    beliefs = [
        JointBelief(t, Gaussian(res.fm[t], res.fP[t], check=False), Gaussian(res.sm[t], res.sP[t], check=False))
        for t in range(problem.T)
    ]
    terminal = Gaussian(res.xTm, res.xTP, check=False)
    return Posterior(beliefs, terminal, float(step_ll.sum()), step_ll, float(alpha), problem, res, assembled)


def e_step(scenario: Scenario, lik: CostLikelihood, use_measurements: bool = True,
           backend: Optional[str] = None) -> Posterior:
    """Filter and smooth the joint chain under the cost likelihood ``lik``.

    Steps before ``tau`` are updated on the recorded measurements (unless
    ``use_measurements`` is False, in which case they carry no observation).
    """
    problem = problem_from_scenario(scenario, use_measurements)
    return run_chain(problem, lik.precision, lik.terminal_precision, lik.alpha, backend)


# --------------------------------------------------------------------------- policy


def conditional_gain(joint: Gaussian, dx: int, t: int = 0) -> PolicyGain:
    """Linear conditional of the trailing block given the leading ``dx`` entries."""
    mu, S = joint.mean, joint.cov
    Sxx, Sux, Suu = S[:dx, :dx], S[dx:, :dx], S[dx:, dx:]
    try:
        L = np.linalg.cholesky(Sxx)
        K = np.linalg.solve(L.T, np.linalg.solve(L, Sux.T)).T
    except np.linalg.LinAlgError:
        inv, _ = psd_pinv(Sxx, PINV_FLOOR)
        cond = np.linalg.cond(Sxx)
        warnings.warn(
            f"state covariance at t={t} is singular (condition number {cond:.3e}); "
            "using a pseudo-inverse",
            PolicyWarning,
            stacklevel=3,
        )
        K = Sux @ inv
    k = mu[dx:] - K @ mu[:dx]
    SigmaK = symmetrize(Suu - K @ Sux.T)
    return PolicyGain(K, k, SigmaK, t)


def extract_policy(beliefs: Sequence[JointBelief], dx: Optional[int] = None) -> list[PolicyGain]:
    """Feedback law ``u_t | x_t`` from each smoothed joint.

    ``dx`` defaults to the state dimension stored on a :class:`Posterior`.
    """
    if dx is None:
        dx = beliefs.problem.dx
    return [conditional_gain(b.smoothed, dx, b.t) for b in beliefs]


# --------------------------------------------------------------------------- M-step


def expected_cost(post: Posterior) -> float:
    """Sum over cost steps of ``E_q[(z - z*)^T W (z - z*)]`` under the smoothed beliefs."""
    prob = post.problem
    W = prob.W
    total = 0.0
    for t in prob.cost_steps:
        b = post.beliefs[t].smoothed
        H = prob.cost_H[t]
        r = H @ b.mean + prob.cost_e[t] - prob.cost_target[t]
        total += r @ W @ r + np.sum(W * (H @ b.cov @ H.T))
    if prob.terminal_W is not None:
        r = post.terminal.mean - prob.terminal_target
        total += r @ prob.terminal_W @ r + np.sum(prob.terminal_W * post.terminal.cov)
    return float(total)


def m_step_alpha(beliefs: Posterior, scenario: Optional[Scenario] = None,
                 trace: Optional[EMTrace] = None) -> float:
    """Closed-form maximizer ``alpha* = (cost dims) / E[quadratic cost]``.

    The cost map and weights come from the chain the beliefs were computed on;
    ``scenario`` is accepted for symmetry with the other entry points.
    """
    ecost = expected_cost(beliefs)
    dims = beliefs.problem.cost_dims
    if dims == 0:
        return beliefs.alpha
    if not ecost > dims / ALPHA_MAX:
        msg = f"expected cost {ecost:.3e} is (near) zero; alpha clamped to {ALPHA_MAX:g}"
        log.warning(msg)
        if trace is not None:
            trace.warnings.append(msg)
        return ALPHA_MAX
    return float(np.clip(dims / ecost, ALPHA_MIN, ALPHA_MAX))


# --------------------------------------------------------------------------- ELBO


def _expected_logpdf(mean_r, cov_r, Sigma) -> float:
    """``E[log N(r; 0, Sigma)]`` for ``r ~ N(mean_r, cov_r)``."""
    d = Sigma.shape[0]
    sign, logdet = np.linalg.slogdet(Sigma)
    if sign <= 0:
        return -np.inf
    sol = np.linalg.solve(Sigma, np.column_stack([cov_r, mean_r]))
    return float(-0.5 * (d * LOG_2PI + logdet + np.trace(sol[:, :-1]) + mean_r @ sol[:, -1]))


def _entropy(cov) -> float:
    d = cov.shape[0]
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        return -np.inf
    return float(0.5 * (d * (1.0 + LOG_2PI) + logdet))


@dataclass
class ElboTerms:
    likelihood: float
    dynamics: float
    prior: float
    entropy: float

    @property
    def total(self) -> float:
        return self.likelihood + self.dynamics + self.prior + self.entropy


def elbo_terms(post: Posterior) -> ElboTerms:
    prob, res = post.problem, post.chain
    Jf, hf, JT, hT, const, kappa = post.assembled
    T, dx = prob.T, prob.dx
    du = prob.du

    lik = 0.0
    for t in range(T):
        if const[t] == 0.0 and kappa[t] == 0.0 and not Jf[t].any():
            continue
        m, S = res.sm[t], res.sP[t]
        lik += -0.5 * (const[t] + kappa[t] - 2 * hf[t] @ m + m @ Jf[t] @ m + np.sum(Jf[t] * S))
    if JT.any():
        m, S = res.xTm, res.xTP
        lik += -0.5 * (const[T] + kappa[T] - 2 * hT @ m + m @ JT @ m + np.sum(JT * S))

    prior = _expected_logpdf(res.sm[0, :dx] - prob.m0, res.sP[0, :dx, :dx], prob.P0)
    for t in range(T):
        L = np.hstack([-prob.Kp[t], np.eye(du)])
        prior += _expected_logpdf(L @ res.sm[t] - prob.mu_u[t], L @ res.sP[t] @ L.T, prob.Su[t])

    dyn = 0.0
    ent = _entropy(res.xTP)
    for t in range(T):
        if t + 1 < T:
            nm, nP = res.sm[t + 1, :dx], res.sP[t + 1, :dx, :dx]
        else:
            nm, nP = res.xTm, res.xTP
        M = np.hstack([prob.A[t], prob.B[t]])
        cross = res.G[t] @ nP
        mr = nm - M @ res.sm[t] - prob.c[t]
        Cr = nP - M @ cross - cross.T @ M.T + M @ res.sP[t] @ M.T
        dyn += _expected_logpdf(mr, symmetrize(Cr), prob.SW[t])
        cond = res.fP[t] - res.G[t] @ res.pP[t + 1] @ res.G[t].T
        ent += _entropy(symmetrize(cond))
    return ElboTerms(float(lik), float(dyn), float(prior), float(ent))


def elbo(beliefs: Posterior, scenario: Optional[Scenario] = None,
         lik: Optional[CostLikelihood] = None) -> float:
    """``E_q[log p(Z*, X, U)] - E_q[log q(X, U)]`` from the smoothed moments.

    Needs well-conditioned noise covariances; in near-deterministic chains the
    dynamics and entropy terms cancel catastrophically and the filter's
    innovation log-likelihood (``Posterior.loglik``) is the reliable value.
    """
    terms = elbo_terms(beliefs)
    total = terms.total
    if not np.isfinite(total):
        raise SolverError(f"non-finite ELBO: {terms}")
    return total


# --------------------------------------------------------------------------- EM


@dataclass
class EMResult:
    beliefs: Posterior
    policy: list
    trace: EMTrace

    def __iter__(self):
        return iter((self.beliefs, self.policy, self.trace))


def _bound_gain(post: Posterior, alpha_new: float, ecost: float) -> float:
    """ELBO(q, alpha_new) - ELBO(q, alpha_old) for fixed q."""
    a = post.alpha
    d = post.problem.cost_dims
    return 0.5 * d * np.log(alpha_new / a) - 0.5 * (alpha_new - a) * ecost


def run_em(problem: ChainProblem, alpha0: float = 1.0, max_iters: int = 100, tol: float = 1e-8,
           backend: Optional[str] = None) -> EMResult:
    """EM over ``alpha`` on an assembled chain.

    Each iteration runs the E-step at the current ``alpha`` and records the (tight)
    ELBO, then computes the M-step update. The loop stops when the M-step would raise
    the bound by less than ``tol`` or would move alpha only by rounding; the returned
    beliefs match the last recorded alpha.
    """
    if not alpha0 > 0:
        raise ValueError(f"alpha0 must be positive, got {alpha0}")
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    trace = EMTrace()
    alpha = float(alpha0)
    W = problem.W
    post = None
    for it in range(max_iters):
        tW = None if problem.terminal_W is None else alpha * problem.terminal_W
        post = run_chain(problem, alpha * W, tW, alpha, backend)
        trace.alphas.append(alpha)
        trace.elbos.append(post.loglik)
        trace.iterations = it + 1
        if not np.isfinite(post.loglik):
            raise SolverError(f"non-finite ELBO at iteration {it}")
        if it > 0 and trace.elbos[-1] < trace.elbos[-2] - MONOTONE_TOL * max(1.0, abs(trace.elbos[-2])):
            raise SolverError(
                f"ELBO decreased at iteration {it}: {trace.elbos[-2]:.12g} -> {trace.elbos[-1]:.12g}"
            )
        if not problem.cost_steps and problem.terminal_W is None:
            trace.converged = True
            break
        new_alpha = m_step_alpha(post, trace=trace)
        gain = _bound_gain(post, new_alpha, expected_cost(post))
        # a fixed point to rounding also counts: the gain itself has a roundoff floor
        if abs(gain) < tol or abs(new_alpha - alpha) <= 4 * np.finfo(float).eps * alpha:
            trace.converged = True
            break
        alpha = new_alpha
    return EMResult(post, extract_policy(post), trace)


def em_solve(scenario: Scenario, alpha0: float = 1.0, max_iters: int = 100, tol: float = 1e-8,
             use_measurements: bool = True, backend: Optional[str] = None) -> EMResult:
    """Solve the scenario by EM. Unpacks as ``(beliefs, policy, trace)``."""
    problem = problem_from_scenario(scenario, use_measurements)
    return run_em(problem, alpha0, max_iters, tol, backend)


def likelihood_for(scenario: Scenario, alpha: float) -> CostLikelihood:
    return cost_to_likelihood(scenario.cost, alpha)
