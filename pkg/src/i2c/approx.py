"""First-order approximate inference for nonlinear dynamics and cost maps.

The nonlinear model is linearized along a nominal trajectory, the exact linear
i2c solver runs on the linearization, and the smoothed means become the next
nominal trajectory. No line search or trust region: divergence is reported.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .model import Scenario, ScenarioError
from .solver import ChainProblem, EMResult, run_em

log = logging.getLogger(__name__)

Map = Callable[[np.ndarray, np.ndarray], np.ndarray]


class DivergenceError(RuntimeError):
    """The nominal trajectory left the system's operating box."""


@dataclass(frozen=True, eq=False)
class NonlinearSystem:
    """Discrete-time ``x' = f(x, u) + w`` with cost map ``z = h(x, u)``.

    ``box`` bounds the operating region as ``(lower, upper)`` state vectors.
    ``jacobian`` optionally returns the analytic ``(A, B)`` of ``f``.
    """

    f: Map
    h: Map
    dx: int
    du: int
    dz: int
    SigmaW: np.ndarray
    name: str = "custom"
    params: dict = field(default_factory=dict)
    box: Optional[tuple] = None
    jacobian: Optional[Callable] = None

    def in_box(self, x) -> bool:
        if not np.all(np.isfinite(x)):
            return False
        if self.box is None:
            return True
        lo, hi = self.box
        return bool(np.all(x >= lo) and np.all(x <= hi))


def linearize(f: Map, x0, u0, eps: float = 1e-6):
    """Central-difference Jacobians of ``f`` at ``(x0, u0)``.

    Returns ``(A, B, c)`` with ``f(x, u) ~ A x + B u + c`` near the expansion point.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    x0 = np.asarray(x0, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    f0 = np.asarray(f(x0, u0), dtype=float)
    if not np.all(np.isfinite(f0)):
        raise FloatingPointError(f"non-finite map value at x={x0}, u={u0}")
    dx, du = x0.shape[0], u0.shape[0]
    A = np.empty((f0.shape[0], dx))
    B = np.empty((f0.shape[0], du))
    for i in range(dx):
        d = np.zeros(dx)
        d[i] = eps
        A[:, i] = (np.asarray(f(x0 + d, u0)) - np.asarray(f(x0 - d, u0))) / (2 * eps)
    for i in range(du):
        d = np.zeros(du)
        d[i] = eps
        B[:, i] = (np.asarray(f(x0, u0 + d)) - np.asarray(f(x0, u0 - d))) / (2 * eps)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise FloatingPointError(f"non-finite Jacobian at x={x0}, u={u0}")
    c = f0 - A @ x0 - B @ u0
    return A, B, c


# --------------------------------------------------------------------------- builtins


def pendulum(mass: float = 1.0, length: float = 1.0, gravity: float = 9.81, dt: float = 0.05,
             control_gain: float = 1.0, sigma_w: float = 1e-8, z_map: str = "state_action",
             box: float = 50.0) -> NonlinearSystem:
    """Euler-discretized pendulum, state ``(theta, omega)``.

    ``theta'' = -(g/l) sin(theta) + gain * u / (m l^2)``; ``theta = 0`` is the stable
    hanging equilibrium. ``z_map`` is ``"state_action"`` (``z = [theta, omega, u]``) or
    ``"cartesian"`` (``z = [l sin(theta), -l cos(theta), omega, u]``).
    """
    g_l = gravity / length
    b = control_gain / (mass * length**2)

    def f(x, u):
        th, om = x[0], x[1]
        return np.array([th + dt * om, om + dt * (-g_l * np.sin(th) + b * u[0])])

    def jac(x, u):
        A = np.array([[1.0, dt], [-dt * g_l * np.cos(x[0]), 1.0]])
        B = np.array([[0.0], [dt * b]])
        return A, B

    if z_map == "state_action":
        def h(x, u):
            return np.array([x[0], x[1], u[0]])
        dz = 3
    elif z_map == "cartesian":
        def h(x, u):
            return np.array([length * np.sin(x[0]), -length * np.cos(x[0]), x[1], u[0]])
        dz = 4
    else:
        raise ValueError(f"unknown pendulum z_map {z_map!r}")

    params = dict(mass=mass, length=length, gravity=gravity, dt=dt, control_gain=control_gain,
                  sigma_w=sigma_w, z_map=z_map)
    lim = np.array([box, box])
    return NonlinearSystem(f, h, 2, 1, dz, sigma_w * np.eye(2), "pendulum", params, (-lim, lim), jac)


BUILTINS = {"pendulum": pendulum}


def system_from_block(block: dict) -> NonlinearSystem:
    """Builtin system from a scenario ``nonlinear`` block (``{"name", "params"}``)."""
    if not isinstance(block, dict) or "name" not in block:
        raise ScenarioError("nonlinear: expected an object with 'name'")
    name = block["name"]
    if name not in BUILTINS:
        raise ScenarioError(f"nonlinear: unknown builtin system {name!r}")
    try:
        return BUILTINS[name](**block.get("params", {}))
    except TypeError as exc:
        raise ScenarioError(f"nonlinear.params: {exc}") from None


def wrap_linear(scenario: Scenario) -> NonlinearSystem:
    """The scenario's linear dynamics and cost map seen as a :class:`NonlinearSystem`."""
    dyn, cost = scenario.dynamics, scenario.cost

    def f(x, u):
        return dyn.A @ x + dyn.B @ u + dyn.c

    def h(x, u):
        return cost.C @ x + cost.D @ u + cost.e

    return NonlinearSystem(f, h, scenario.dx, scenario.du, scenario.dz, dyn.SigmaW, "linear",
                           jacobian=lambda x, u: (dyn.A, dyn.B))


# --------------------------------------------------------------------------- iterated solver


@dataclass(eq=False)
class NonlinearResult:
    beliefs: object
    policy: list
    nominals: list
    nominal_costs: list
    alphas: list
    em_traces: list
    converged: bool
    cost_increase_flags: list

    @property
    def iterations(self) -> int:
        return len(self.em_traces)


def nominal_cost(system: NonlinearSystem, scenario: Scenario, xs, us) -> float:
    cost = scenario.cost
    total = 0.0
    for k, t in enumerate(range(scenario.tau, scenario.T)):
        r = system.h(xs[t], us[t]) - cost.z_star[k]
        total += r @ cost.W @ r
    if cost.terminal is not None:
        r = xs[-1] - cost.terminal.target
        total += r @ cost.terminal.W @ r
    return float(total)


def _prior_rollout(system: NonlinearSystem, scenario: Scenario):
    xs = [scenario.x0_prior.mean]
    us = np.array([g.mean for g in scenario.u_prior])
    for t in range(scenario.T):
        xs.append(np.asarray(system.f(xs[-1], us[t]), dtype=float))
    return np.array(xs), us


def _linearized_problem(system, scenario, xs, us, eps) -> ChainProblem:
    T, dx, du = scenario.T, system.dx, system.du
    A = np.empty((T, dx, dx))
    B = np.empty((T, dx, du))
    c = np.empty((T, dx))
    H, e = {}, {}
    cost = scenario.cost
    for t in range(T):
        A[t], B[t], c[t] = linearize(system.f, xs[t], us[t], eps)
        if t >= scenario.tau:
            C, D, e0 = linearize(system.h, xs[t], us[t], eps)
            H[t], e[t] = np.hstack([C, D]), e0
    steps = list(range(scenario.tau, T))
    term = cost.terminal
    return ChainProblem(
        A=A, B=B, c=c, SW=np.broadcast_to(system.SigmaW, (T, dx, dx)), Kp=np.zeros((T, du, dx)),
        mu_u=np.array([g.mean for g in scenario.u_prior]),
        Su=np.array([g.cov for g in scenario.u_prior]),
        m0=scenario.x0_prior.mean, P0=scenario.x0_prior.cov, W=cost.W,
        cost_steps=steps, cost_H=H, cost_e=e,
        cost_target={t: cost.z_star[t - scenario.tau] for t in steps},
        terminal_W=None if term is None else term.W,
        terminal_target=None if term is None else term.target,
    )


def nonlinear_i2c(system: NonlinearSystem, scenario: Scenario, iters: int = 20, alpha0: float = 1.0,
                  em_iters: int = 100, tol: float = 1e-8, eps: float = 1e-6,
                  nominal_tol: float = 1e-6, backend: Optional[str] = None) -> NonlinearResult:
    """Iterated linearization around smoothed means.

    ``scenario`` supplies horizon, priors and cost (its linear dynamics are ignored;
    measurements, if any, are not used). Each outer iteration runs EM on the current
    linearization, warm-starting alpha from the previous iteration.
    """
    if scenario.tau != 0:
        raise ScenarioError("nonlinear solve needs a pure control scenario (tau = 0)")
    if system.dz != scenario.dz:
        raise ScenarioError(f"system cost map has dz={system.dz}, scenario has dz={scenario.dz}")
    dx = system.dx
    xs, us = _prior_rollout(system, scenario)
    nominals = [(xs, us)]
    costs = [nominal_cost(system, scenario, xs, us)]
    alphas, traces, flags = [], [], []
    alpha = alpha0
    converged = False
    res: Optional[EMResult] = None
    for it in range(iters):
        if not all(system.in_box(x) for x in xs):
            raise DivergenceError(f"nominal trajectory left the operating box at iteration {it}")
        problem = _linearized_problem(system, scenario, xs, us, eps)
        res = run_em(problem, alpha, em_iters, tol, backend)
        alpha = res.trace.alphas[-1]
        alphas.append(alpha)
        traces.append(res.trace)
        post = res.beliefs
        new_xs = np.vstack([post.chain.sm[:, :dx], post.terminal.mean[None, :]])
        new_us = post.chain.sm[:, dx:]
        change = max(np.max(np.abs(new_xs - xs)), np.max(np.abs(new_us - us)))
        xs, us = new_xs, new_us
        nominals.append((xs, us))
        costs.append(nominal_cost(system, scenario, xs, us))
        # relinearization is not monotone; flag increases after the second iteration
        flags.append(it >= 2 and costs[-1] > costs[-2] * (1 + 1e-9))
        if change < nominal_tol:
            converged = True
            break
    if not all(system.in_box(x) for x in xs):
        raise DivergenceError(f"nominal trajectory left the operating box at iteration {len(traces)}")
    return NonlinearResult(res.beliefs, res.policy, nominals, costs, alphas, traces, converged, flags)


def closed_loop_cost(system: NonlinearSystem, scenario: Scenario, policy, n_rollouts: int = 1000,
                     seed: int = 0, controls=None) -> float:
    """Monte-Carlo mean of the quadratic cost under ``x0 ~ prior`` and process noise.

    ``policy`` is a list of :class:`~i2c.solver.PolicyGain` (mean action used); pass
    ``policy=None`` with open-loop ``controls`` instead.
    """
    rng = np.random.default_rng(seed)
    x0 = scenario.x0_prior
    T = scenario.T
    X = rng.multivariate_normal(x0.mean, x0.cov, size=n_rollouts, method="eigh")
    noise = rng.multivariate_normal(np.zeros(system.dx), system.SigmaW, size=(T, n_rollouts),
                                    method="eigh")
    cost = scenario.cost
    total = np.zeros(n_rollouts)
    for t in range(T):
        if policy is not None:
            U = X @ policy[t].K.T + policy[t].k
        else:
            U = np.broadcast_to(controls[t], (n_rollouts, system.du))
        if t >= scenario.tau:
            for i in range(n_rollouts):
                r = system.h(X[i], U[i]) - cost.z_star[t - scenario.tau]
                total[i] += r @ cost.W @ r
        X = np.array([system.f(X[i], U[i]) for i in range(n_rollouts)]) + noise[t]
    if cost.terminal is not None:
        R = X - cost.terminal.target
        total += np.einsum("ij,jk,ik->i", R, cost.terminal.W, R)
    return float(total.mean())

