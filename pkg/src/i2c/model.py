"""Generative model: dynamics, observation maps, quadratic cost and scenarios.

A scenario is a finite-horizon chain over states ``x_t`` and controls ``u_t``.
Steps ``t < tau`` carry recorded measurements ``y*_t``; steps ``t >= tau`` carry
desired observations ``z*_t`` of a quadratic cost. The cost becomes a Gaussian
likelihood with precision ``alpha * W`` (see :func:`cost_to_likelihood`).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .gauss import LOG_2PI, PSD_TOL, Gaussian, min_eig

DEFAULT_U_PRIOR_VAR = 1e6
DEFAULT_PIN_VAR = 1e-12


class ScenarioError(ValueError):
    """A scenario file or object violates the format or its invariants."""


def _mat(value, name: str, shape: tuple[int, int]) -> np.ndarray:
    try:
        m = np.array(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{name}: not a numeric matrix ({exc})") from None
    if m.ndim == 0 and shape == (1, 1):
        m = m.reshape(1, 1)
    if m.shape != shape:
        raise ScenarioError(f"{name}: dimension mismatch, expected {shape}, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ScenarioError(f"{name}: non-finite entries")
    return m


def _vec(value, name: str, n: int) -> np.ndarray:
    try:
        v = np.array(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{name}: not a numeric vector ({exc})") from None
    if v.ndim == 0 and n == 1:
        v = v.reshape(1)
    if v.shape != (n,):
        raise ScenarioError(f"{name}: dimension mismatch, expected ({n},), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ScenarioError(f"{name}: non-finite entries")
    return v


def _rows(value, name: str, count: int, n: int) -> np.ndarray:
    if count == 0 and (value is None or len(value) == 0):
        return np.zeros((0, n))
    try:
        r = np.array(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{name}: not a numeric array ({exc})") from None
    if r.ndim == 1 and n == 1:
        r = r.reshape(-1, 1)
    if r.ndim != 2 or r.shape[0] != count:
        length = r.shape[0] if r.ndim >= 1 else 0
        raise ScenarioError(f"{name}: dimension mismatch, expected {count} entries, got {length}")
    if r.shape[1] != n:
        raise ScenarioError(f"{name}: dimension mismatch, entries have length {r.shape[1]}, expected {n}")
    if not np.all(np.isfinite(r)):
        raise ScenarioError(f"{name}: non-finite entries")
    return r


def _check_psd(m: np.ndarray, name: str, strict: bool = False) -> None:
    if not np.allclose(m, m.T, atol=1e-10, rtol=0.0):
        raise ScenarioError(f"{name}: matrix is not symmetric")
    lam = min_eig(m)
    if strict and lam <= 0.0:
        raise ScenarioError(f"{name}: not positive definite (smallest eigenvalue {lam:.6g})")
    if lam < -PSD_TOL:
        raise ScenarioError(f"{name}: not positive semi-definite (smallest eigenvalue {lam:.6g})")


@dataclass(frozen=True, eq=False)
class LinearDynamics:
    """x_{t+1} = A x_t + B u_t + c + w, w ~ N(0, SigmaW)."""

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    SigmaW: np.ndarray

    @property
    def dx(self) -> int:
        return self.A.shape[0]

    @property
    def du(self) -> int:
        return self.B.shape[1]

    def validate(self) -> None:
        dx, du = self.dx, self.du
        _mat(self.A, "dynamics.A", (dx, dx))
        _mat(self.B, "dynamics.B", (dx, du))
        _vec(self.c, "dynamics.c", dx)
        _mat(self.SigmaW, "dynamics.SigmaW", (dx, dx))
        _check_psd(self.SigmaW, "dynamics.SigmaW")

    def step(self, x, u) -> np.ndarray:
        return self.A @ x + self.B @ u + self.c


@dataclass(frozen=True, eq=False)
class LinearObservation:
    """y = C x + D u + e + v, v ~ N(0, SigmaV)."""

    C: np.ndarray
    D: np.ndarray
    e: np.ndarray
    SigmaV: np.ndarray

    @property
    def dim(self) -> int:
        return self.C.shape[0]

    def validate(self, dx: int, du: int, prefix: str = "measure_model") -> None:
        d = self.dim
        _mat(self.C, f"{prefix}.C", (d, dx))
        _mat(self.D, f"{prefix}.D", (d, du))
        _vec(self.e, f"{prefix}.e", d)
        _mat(self.SigmaV, f"{prefix}.SigmaV", (d, d))
        _check_psd(self.SigmaV, f"{prefix}.SigmaV", strict=True)

    @property
    def H(self) -> np.ndarray:
        """Stacked map onto ``[x; u]``."""
        return np.hstack([self.C, self.D])


@dataclass(frozen=True, eq=False)
class TerminalCost:
    """Optional cost ``(x_T - target)^T W (x_T - target)`` on the final state."""

    W: np.ndarray
    target: np.ndarray


@dataclass(frozen=True, eq=False)
class QuadraticCost:
    """Per-step cost ``(z_t - z*_t)^T W (z_t - z*_t)`` with ``z = C x + D u + e``.

    ``z_star`` holds one row per controlled step. When the map is omitted in a
    scenario file it defaults to ``z = [x; u]`` (or ``z = x`` if ``dz == dx``).
    """

    W: np.ndarray
    z_star: np.ndarray
    C: np.ndarray
    D: np.ndarray
    e: np.ndarray
    terminal: Optional[TerminalCost] = None

    @property
    def dz(self) -> int:
        return self.W.shape[0]

    @property
    def H(self) -> np.ndarray:
        return np.hstack([self.C, self.D])

    def scaled(self, factor: float) -> "QuadraticCost":
        term = self.terminal
        if term is not None:
            term = TerminalCost(factor * term.W, term.target)
        return replace(self, W=factor * self.W, terminal=term)

    def stage_value(self, x, u, k: int) -> float:
        r = self.C @ x + self.D @ u + self.e - self.z_star[k]
        return float(r @ self.W @ r)

    def terminal_value(self, x) -> float:
        if self.terminal is None:
            return 0.0
        r = x - self.terminal.target
        return float(r @ self.terminal.W @ r)


@dataclass(frozen=True, eq=False)
class CostLikelihood:
    """Gaussian likelihood standing in for a quadratic cost.

    ``obs.SigmaV`` is ``(alpha W)^-1``; ``log_beta`` is the matching log-normalizer
    ``-0.5 (dz log 2 pi - log|alpha W|)``, so that the log-density at ``z`` equals
    ``-(alpha/2) (z - z*)^T W (z - z*) + log_beta``.
    """

    obs: LinearObservation
    alpha: float
    log_beta: float
    precision: np.ndarray
    terminal_precision: Optional[np.ndarray] = None
    terminal_log_beta: float = 0.0


@dataclass(frozen=True, eq=False)
class Scenario:
    """A validated estimation-and-control problem.

    Steps ``0..tau-1`` are observed through ``measure_model`` (``measurements``
    holds their values); steps ``tau..T-1`` carry the cost targets.
    """

    dx: int
    du: int
    dz: int
    dy: int
    T: int
    tau: int
    dynamics: LinearDynamics
    measure_model: Optional[LinearObservation]
    cost: QuadraticCost
    x0_prior: Gaussian
    u_prior: tuple
    measurements: np.ndarray
    name: str = "scenario"
    truth: Optional[np.ndarray] = None
    true_controls: Optional[np.ndarray] = None
    nonlinear: Optional[dict] = None
    ensemble: Optional[dict] = None
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def n_controlled(self) -> int:
        return self.T - self.tau

    def validate(self) -> "Scenario":
        dx, du = self.dx, self.du
        for k, v in (("dx", dx), ("du", du), ("dz", self.dz), ("horizon", self.T)):
            if int(v) < 1:
                raise ScenarioError(f"{k} must be a positive integer, got {v}")
        if self.dy < 0:
            raise ScenarioError(f"dy must be non-negative, got {self.dy}")
        if not 0 <= self.tau <= self.T:
            raise ScenarioError(f"tau={self.tau} outside [0, {self.T}]")
        if self.dynamics.dx != dx or self.dynamics.du != du:
            raise ScenarioError(
                f"dynamics: dimension mismatch, A/B imply dx={self.dynamics.dx}, du={self.dynamics.du}"
            )
        self.dynamics.validate()
        if self.tau > 0:
            if self.measure_model is None:
                raise ScenarioError("measure_model is required when tau > 0")
            if self.measure_model.dim != self.dy:
                raise ScenarioError(
                    f"measure_model: dimension mismatch, output {self.measure_model.dim} != dy={self.dy}"
                )
        if self.measure_model is not None:
            self.measure_model.validate(dx, du)
        if self.measurements.shape != (self.tau, self.dy):
            raise ScenarioError(
                f"measurements: dimension mismatch, expected {self.tau} entries of length {self.dy}, "
                f"got shape {self.measurements.shape}"
            )
        cost = self.cost
        if cost.dz != self.dz:
            raise ScenarioError(f"cost.W: dimension mismatch, expected ({self.dz}, {self.dz})")
        _mat(cost.W, "cost.W", (self.dz, self.dz))
        _check_psd(cost.W, "cost.W", strict=True)
        _mat(cost.C, "cost.C", (self.dz, dx))
        _mat(cost.D, "cost.D", (self.dz, du))
        _vec(cost.e, "cost.e", self.dz)
        if cost.z_star.shape != (self.n_controlled, self.dz):
            raise ScenarioError(
                f"cost.z_star: dimension mismatch, expected {self.n_controlled} entries "
                f"of length {self.dz}, got shape {cost.z_star.shape}"
            )
        if cost.terminal is not None:
            _mat(cost.terminal.W, "cost.terminal.W", (dx, dx))
            _check_psd(cost.terminal.W, "cost.terminal.W", strict=True)
            _vec(cost.terminal.target, "cost.terminal.target", dx)
        if self.x0_prior.dim != dx:
            raise ScenarioError(f"x0_prior: dimension mismatch, expected {dx}")
        _check_psd(self.x0_prior.cov, "x0_prior.cov")
        if len(self.u_prior) != self.T:
            raise ScenarioError(f"u_prior: expected {self.T} entries, got {len(self.u_prior)}")
        for t, g in enumerate(self.u_prior):
            if g.dim != du:
                raise ScenarioError(f"u_prior[{t}]: dimension mismatch, expected {du}")
            _check_psd(g.cov, f"u_prior[{t}].cov")
        return self

    def with_cost(self, cost: QuadraticCost) -> "Scenario":
        return replace(self, cost=cost).validate()

    def with_u_prior(self, u_prior) -> "Scenario":
        return replace(self, u_prior=tuple(u_prior)).validate()

    def pin_controls(self, controls, var: float = DEFAULT_PIN_VAR, start: int = 0) -> "Scenario":
        """Replace the u-prior by near-delta priors at ``controls`` from ``start`` on."""
        controls = np.atleast_2d(np.asarray(controls, dtype=float))
        prior = list(self.u_prior)
        for k, u in enumerate(controls):
            prior[start + k] = Gaussian(u, var * np.eye(self.du))
        return self.with_u_prior(prior)

    def prior_rollout(self, controls=None) -> list[Gaussian]:
        """Open-loop propagation of the x0 prior; ``controls`` default to prior means."""
        dyn = self.dynamics
        x = self.x0_prior
        out = [x]
        for t in range(self.T):
            if controls is None:
                ug = self.u_prior[t]
            else:
                ug = Gaussian(controls[t], np.zeros((self.du, self.du)))
            mean = dyn.A @ x.mean + dyn.B @ ug.mean + dyn.c
            cov = dyn.A @ x.cov @ dyn.A.T + dyn.B @ ug.cov @ dyn.B.T + dyn.SigmaW
            x = Gaussian(mean, cov, check=False)
            out.append(x)
        return out


def cost_to_likelihood(cost: QuadraticCost, alpha: float) -> CostLikelihood:
    """Map a quadratic cost to the Gaussian likelihood with precision ``alpha * W``."""
    alpha = float(alpha)
    if not np.isfinite(alpha) or alpha <= 0.0:
        raise ValueError(f"alpha must be positive and finite, got {alpha}")
    prec = alpha * cost.W
    sign, logdet = np.linalg.slogdet(prec)
    if sign <= 0 or not np.isfinite(logdet):
        raise ValueError("cost weight W is singular")
    sigma_v = np.linalg.inv(prec)
    sigma_v = 0.5 * (sigma_v + sigma_v.T)
    obs = LinearObservation(cost.C, cost.D, cost.e, sigma_v)
    log_beta = -0.5 * (cost.dz * LOG_2PI - logdet)
    t_prec, t_beta = None, 0.0
    if cost.terminal is not None:
        t_prec = alpha * cost.terminal.W
        s2, ld2 = np.linalg.slogdet(t_prec)
        if s2 <= 0:
            raise ValueError("terminal cost weight is singular")
        t_beta = -0.5 * (t_prec.shape[0] * LOG_2PI - ld2)
    return CostLikelihood(obs, alpha, float(log_beta), prec, t_prec, float(t_beta))


def optimality_loglik(cost_value: float, alpha: float) -> float:
    """Unnormalized ``log p(o=1 | x, u)`` for a cost value: ``-alpha * C``."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return -alpha * cost_value


# --------------------------------------------------------------------------- loading


def _gaussian_block(block: dict, name: str, n: int) -> Gaussian:
    if not isinstance(block, dict) or "mean" not in block or "cov" not in block:
        raise ScenarioError(f"{name}: expected an object with 'mean' and 'cov'")
    mean = _vec(block["mean"], f"{name}.mean", n)
    cov = _mat(block["cov"], f"{name}.cov", (n, n))
    _check_psd(cov, f"{name}.cov")
    return Gaussian(mean, cov)


def _u_prior(block: Optional[dict], du: int, T: int) -> list[Gaussian]:
    if block is None:
        return [Gaussian(np.zeros(du), DEFAULT_U_PRIOR_VAR * np.eye(du))] * T
    if not isinstance(block, dict):
        raise ScenarioError("u_prior: expected an object")
    mean = np.array(block.get("mean", np.zeros(du)), dtype=float)
    cov = np.array(block.get("cov", DEFAULT_U_PRIOR_VAR * np.eye(du)), dtype=float)
    means = _rows(mean, "u_prior.mean", T, du) if mean.ndim == 2 else np.tile(_vec(mean, "u_prior.mean", du), (T, 1))
    if cov.ndim == 3:
        if cov.shape != (T, du, du):
            raise ScenarioError(f"u_prior.cov: dimension mismatch, expected ({T}, {du}, {du})")
        covs = cov
    else:
        covs = np.broadcast_to(_mat(cov, "u_prior.cov", (du, du)), (T, du, du))
    out = []
    for t in range(T):
        _check_psd(covs[t], f"u_prior.cov[{t}]")
        out.append(Gaussian(means[t], covs[t]))
    pinned = block.get("pinned")
    if pinned is not None:
        pinned = np.array(pinned, dtype=float).reshape(-1, du)
        if pinned.shape[0] > T:
            raise ScenarioError("u_prior.pinned: more entries than the horizon")
        var = float(block.get("pin_var", DEFAULT_PIN_VAR))
        for t, u in enumerate(pinned):
            out[t] = Gaussian(u, var * np.eye(du))
    return out


def _obs_block(block: dict, name: str, d: int, dx: int, du: int) -> LinearObservation:
    if not isinstance(block, dict):
        raise ScenarioError(f"{name}: expected an object")
    try:
        C = _mat(block["C"], f"{name}.C", (d, dx))
        SigmaV = _mat(block["SigmaV"], f"{name}.SigmaV", (d, d))
    except KeyError as exc:
        raise ScenarioError(f"{name}: missing key {exc}") from None
    D = _mat(block.get("D", np.zeros((d, du))), f"{name}.D", (d, du))
    e = _vec(block.get("e", np.zeros(d)), f"{name}.e", d)
    return LinearObservation(C, D, e, SigmaV)


def _cost_block(block: dict, dx: int, du: int, dz: int, n_ctrl: int) -> QuadraticCost:
    if not isinstance(block, dict) or "W" not in block:
        raise ScenarioError("cost: expected an object with 'W'")
    W = _mat(block["W"], "cost.W", (dz, dz))
    if "C" in block or "D" in block:
        C = _mat(block.get("C", np.zeros((dz, dx))), "cost.C", (dz, dx))
        D = _mat(block.get("D", np.zeros((dz, du))), "cost.D", (dz, du))
    elif dz == dx + du:
        C = np.vstack([np.eye(dx), np.zeros((du, dx))])
        D = np.vstack([np.zeros((dx, du)), np.eye(du)])
    elif dz == dx:
        C, D = np.eye(dx), np.zeros((dx, du))
    else:
        raise ScenarioError(f"cost: dz={dz} needs an explicit z-map ('C', 'D')")
    e = _vec(block.get("e", np.zeros(dz)), "cost.e", dz)
    z_star = block.get("z_star")
    if z_star is None:
        z_star = np.zeros((n_ctrl, dz))
    z_star = _rows(z_star, "cost.z_star", n_ctrl, dz)
    terminal = None
    if block.get("terminal") is not None:
        tb = block["terminal"]
        terminal = TerminalCost(
            _mat(tb["W"], "cost.terminal.W", (dx, dx)),
            _vec(tb.get("target", np.zeros(dx)), "cost.terminal.target", dx),
        )
    return QuadraticCost(W, z_star, C, D, e, terminal)


def scenario_from_dict(data: dict[str, Any], seed: int = 0, name: str = "scenario") -> Scenario:
    """Build and validate a :class:`Scenario` from the parsed JSON object."""
    if not isinstance(data, dict):
        raise ScenarioError("scenario: top level must be an object")
    try:
        dims = data["dims"]
        dx, du, dz = int(dims["dx"]), int(dims["du"]), int(dims["dz"])
        dy = int(dims.get("dy", 0))
        T = int(data["horizon"])
        tau = int(data.get("tau", 0))
        dyn_b = data["dynamics"] if "dynamics" in data or "nonlinear" not in data else None
    except KeyError as exc:
        raise ScenarioError(f"scenario: missing key {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"scenario: bad dimension entry ({exc})") from None
    if min(dx, du, dz, T) < 1:
        raise ScenarioError("dims and horizon must be positive integers")
    if not 0 <= tau <= T:
        raise ScenarioError(f"tau={tau} outside [0, {T}]")
    if dyn_b is None:
        dyn_b = _linearized_block(data, dx, du)
    try:
        dyn = LinearDynamics(
            _mat(dyn_b["A"], "dynamics.A", (dx, dx)),
            _mat(dyn_b["B"], "dynamics.B", (dx, du)),
            _vec(dyn_b.get("c", np.zeros(dx)), "dynamics.c", dx),
            _mat(dyn_b["SigmaW"], "dynamics.SigmaW", (dx, dx)),
        )
    except KeyError as exc:
        raise ScenarioError(f"dynamics: missing key {exc}") from None
    dyn.validate()
    mm = None
    if data.get("measure_model") is not None:
        mm = _obs_block(data["measure_model"], "measure_model", dy, dx, du)
        mm.validate(dx, du)
    if "cost" not in data:
        raise ScenarioError("scenario: missing key 'cost'")
    cost = _cost_block(data["cost"], dx, du, dz, T - tau)
    if "x0_prior" not in data:
        raise ScenarioError("scenario: missing key 'x0_prior'")
    x0 = _gaussian_block(data["x0_prior"], "x0_prior", dx)
    u_prior = _u_prior(data.get("u_prior"), du, T)

    truth = true_u = None
    sim = data.get("simulate")
    if "measurements" in data:
        meas = _rows(data["measurements"], "measurements", tau, dy)
    elif sim is not None and tau > 0:
        if mm is None:
            raise ScenarioError("simulate: measure_model is required")
        rng = np.random.default_rng(int(sim.get("seed", seed)))
        truth, true_u, meas = simulate_measurements(
            dyn, mm, x0, tau, rng, control_std=float(sim.get("control_std", 1.0))
        )
        if sim.get("pin_controls", True):
            var = float(sim.get("pin_var", DEFAULT_PIN_VAR))
            for t in range(tau):
                u_prior[t] = Gaussian(true_u[t], var * np.eye(du))
    elif tau == 0:
        meas = np.zeros((0, dy))
    else:
        raise ScenarioError(f"measurements: dimension mismatch, expected {tau} entries, got none")

    scen = Scenario(
        dx=dx, du=du, dz=dz, dy=dy, T=T, tau=tau, dynamics=dyn, measure_model=mm,
        cost=cost, x0_prior=x0, u_prior=tuple(u_prior), measurements=meas,
        name=str(data.get("name", name)), truth=truth, true_controls=true_u,
        nonlinear=data.get("nonlinear"), ensemble=data.get("ensemble"), raw=data,
    )
    return scen.validate()


def _linearized_block(data: dict, dx: int, du: int) -> dict:
    # nonlinear scenarios may omit "dynamics"; use the builtin linearized at the prior mean
    from .approx import linearize, system_from_block

    system = system_from_block(data["nonlinear"])
    if (system.dx, system.du) != (dx, du):
        raise ScenarioError(f"nonlinear: builtin has dx={system.dx}, du={system.du}")
    x0 = _vec(data.get("x0_prior", {}).get("mean", np.zeros(dx)), "x0_prior.mean", dx)
    A, B, c = linearize(system.f, x0, np.zeros(du))
    return {"A": A, "B": B, "c": c, "SigmaW": system.SigmaW}


def load_scenario(path, seed: int = 0) -> Scenario:
    """Read and validate a JSON scenario file.

    ``seed`` drives the builtin measurement generator when the file has a
    ``simulate`` block and no explicit ``seed`` of its own.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario file {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"parse error in {path}: {exc}") from None
    return scenario_from_dict(data, seed=seed, name=path.stem)


def simulate_measurements(dyn: LinearDynamics, obs: LinearObservation, x0: Gaussian, steps: int,
                          rng: np.random.Generator, control_std: float = 1.0):
    """Sample a rollout under random controls and its noisy measurements.

    Returns ``(states, controls, measurements)`` with ``steps + 1`` states.
    """
    dx, du = dyn.dx, dyn.du
    x = rng.multivariate_normal(x0.mean, x0.cov, method="eigh")
    states = [x]
    controls = control_std * rng.standard_normal((steps, du))
    meas = []
    for t in range(steps):
        v = rng.multivariate_normal(np.zeros(obs.dim), obs.SigmaV, method="eigh")
        meas.append(obs.C @ x + obs.D @ controls[t] + obs.e + v)
        w = rng.multivariate_normal(np.zeros(dx), dyn.SigmaW, method="eigh")
        x = dyn.step(x, controls[t]) + w
        states.append(x)
    return np.array(states), controls, np.array(meas).reshape(steps, obs.dim)
