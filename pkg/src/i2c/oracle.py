"""Classical reference solvers: finite-horizon LQR, Kalman filter, RTS smoother.

These are written independently of :mod:`i2c.solver` and share only the
:mod:`i2c.gauss` primitives with it. ``batch_posterior`` conditions one dense
Gaussian over the whole trajectory, which makes it a brute-force check on both
the recursive smoother and the i2c E-step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .gauss import Gaussian, GaussianError, condition, log_density, propagate_affine
from .model import LinearDynamics, LinearObservation, QuadraticCost, Scenario


class OracleError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class LqrSolution:
    K: list
    k: list
    P: list
    p: list

    @property
    def T(self) -> int:
        return len(self.K)

    def rollout(self, dyn: LinearDynamics, x0, noise=None) -> tuple[np.ndarray, np.ndarray]:
        xs, us = [np.asarray(x0, dtype=float)], []
        for t in range(self.T):
            u = self.K[t] @ xs[-1] + self.k[t]
            x = dyn.step(xs[-1], u)
            if noise is not None:
                x = x + noise[t]
            us.append(u)
            xs.append(x)
        return np.array(xs), np.array(us)


def lqr_affine(A, B, c, Q, R, S, q, r, Qf, qf, T: int) -> LqrSolution:
    """Backward Riccati recursion for time-varying affine-quadratic problems.

    Minimizes ``sum_t [x'Q_t x + 2x'S_t u + u'R_t u + 2q_t'x + 2r_t'u] + x_T'Qf x_T + 2qf'x_T``
    subject to ``x_{t+1} = A x_t + B u_t + c``. ``Q, R, S, q, r`` are indexable by t.
    """
    P = np.array(Qf, dtype=float)
    p = np.array(qf, dtype=float)
    Ks, ks, Ps, ps = [None] * T, [None] * T, [None] * (T + 1), [None] * (T + 1)
    Ps[T], ps[T] = P, p
    for t in range(T - 1, -1, -1):
        PA, PB = P @ A, P @ B
        lin = P @ c + p
        Qxx = Q[t] + A.T @ PA
        Quu = R[t] + B.T @ PB
        Qux = S[t].T + B.T @ PA
        qx = q[t] + A.T @ lin
        qu = r[t] + B.T @ lin
        try:
            L = np.linalg.cholesky(0.5 * (Quu + Quu.T))
        except np.linalg.LinAlgError:
            raise OracleError(f"R + B'PB is singular at t={t}") from None
        sol = np.linalg.solve(L.T, np.linalg.solve(L, np.column_stack([Qux, qu])))
        K, k = -sol[:, :-1], -sol[:, -1]
        P = Qxx + Qux.T @ K
        P = 0.5 * (P + P.T)
        p = qx + Qux.T @ k
        Ks[t], ks[t], Ps[t], ps[t] = K, k, P, p
    return LqrSolution(Ks, ks, Ps, ps)


def lqr_solve(dyn: LinearDynamics, costQ, costR, costQf, zStar=None, T: int = 1) -> LqrSolution:
    """Finite-horizon LQR tracking state targets ``zStar`` (T or T+1 rows; zeros if None).

    Stage cost ``(x - x*)'Q(x - x*) + u'Ru`` plus terminal ``(x_T - x*_T)'Qf(x_T - x*_T)``.
    With T rows the last target is reused for the terminal term.
    """
    dx, du = dyn.dx, dyn.du
    Q, R, Qf = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (costQ, costR, costQf))
    if zStar is None:
        targets = np.zeros((T + 1, dx))
    else:
        targets = np.atleast_2d(np.asarray(zStar, dtype=float)).reshape(-1, dx)
        if targets.shape[0] == T:
            targets = np.vstack([targets, targets[-1:]])
        if targets.shape[0] != T + 1:
            raise ValueError(f"zStar needs {T} or {T + 1} rows, got {targets.shape[0]}")
    S = [np.zeros((dx, du))] * T
    q = [-Q @ targets[t] for t in range(T)]
    r = [np.zeros(du)] * T
    return lqr_affine(dyn.A, dyn.B, dyn.c, [Q] * T, [R] * T, S, q, r, Qf, -Qf @ targets[T], T)


def lqr_from_cost(dyn: LinearDynamics, cost: QuadraticCost, T: Optional[int] = None) -> LqrSolution:
    """LQR for the cost ``(C x + D u + e - z*)'W(...)`` used by a scenario (plus terminal)."""
    T = cost.z_star.shape[0] if T is None else T
    dx = dyn.dx
    W, C, D = cost.W, cost.C, cost.D
    Q, R, S = C.T @ W @ C, D.T @ W @ D, C.T @ W @ D
    off = [cost.e - cost.z_star[t] for t in range(T)]
    q = [C.T @ W @ o for o in off]
    r = [D.T @ W @ o for o in off]
    if cost.terminal is not None:
        Qf = cost.terminal.W
        qf = -Qf @ cost.terminal.target
    else:
        Qf, qf = np.zeros((dx, dx)), np.zeros(dx)
    return lqr_affine(dyn.A, dyn.B, dyn.c, [Q] * T, [R] * T, [S] * T, q, r, Qf, qf, T)


def lqr_for_scenario(scenario: Scenario) -> LqrSolution:
    """Gains for the controlled segment ``t = tau .. T-1`` of a scenario."""
    return lqr_from_cost(scenario.dynamics, scenario.cost)


# --------------------------------------------------------------------------- estimation


@dataclass(frozen=True, eq=False)
class SmootherResult:
    filtered: list
    smoothed: Optional[list]
    loglik: float
    predicted: list
    step_loglik: Optional[np.ndarray] = None


def kalman_filter(dyn: LinearDynamics, obs: LinearObservation, x0: Gaussian,
                  measurements: Sequence, controls: Optional[Sequence] = None) -> SmootherResult:
    """Kalman filter with known inputs.

    ``controls`` sets the number of transitions N (default: one per measurement);
    the result holds N + 1 beliefs ``x_0 .. x_N``. Step t is updated on
    ``measurements[t]`` when present (entries may be None).
    """
    meas = list(measurements) if measurements is not None else []
    if controls is None:
        controls = np.zeros((max(len(meas), 1), dyn.du))
    controls = np.atleast_2d(np.asarray(controls, dtype=float)).reshape(-1, dyn.du)
    N = controls.shape[0]
    if len(meas) > N + 1:
        raise ValueError("more measurements than states")
    pred, filt = [], []
    x = x0
    steps = np.zeros(N + 1)
    for t in range(N + 1):
        pred.append(x)
        y = meas[t] if t < len(meas) else None
        if y is not None:
            u = controls[t] if t < N else np.zeros(dyn.du)
            y = np.atleast_1d(np.asarray(y, dtype=float))
            offset = obs.D @ u + obs.e
            innov = propagate_affine(x, obs.C, offset, obs.SigmaV)
            try:
                steps[t] = log_density(innov, y)
            except GaussianError:
                raise OracleError(f"singular innovation covariance at t={t}") from None
            S = innov.cov
            gain = np.linalg.solve(S, obs.C @ x.cov).T
            mean = x.mean + gain @ (y - innov.mean)
            cov = x.cov - gain @ S @ gain.T
            x = Gaussian(mean, cov, check=False)
        filt.append(x)
        if t < N:
            x = propagate_affine(x, dyn.A, dyn.B @ controls[t] + dyn.c, dyn.SigmaW)
    return SmootherResult(filt, None, float(steps.sum()), pred, steps)


def rts_smooth(filter_out: SmootherResult, dyn: LinearDynamics, controls=None) -> SmootherResult:
    """Rauch-Tung-Striebel backward pass over a :func:`kalman_filter` result.

    The predicted beliefs stored on ``filter_out`` already include the inputs, so
    ``controls`` is accepted only for interface symmetry.
    """
    filt, pred = filter_out.filtered, filter_out.predicted
    N = len(filt)
    smoothed = [None] * N
    smoothed[-1] = filt[-1]
    for t in range(N - 2, -1, -1):
        Pp = pred[t + 1].cov
        try:
            G = np.linalg.solve(Pp, dyn.A @ filt[t].cov).T
        except np.linalg.LinAlgError:
            raise OracleError(f"singular predicted covariance at t={t + 1}") from None
        nxt = smoothed[t + 1]
        mean = filt[t].mean + G @ (nxt.mean - pred[t + 1].mean)
        cov = filt[t].cov + G @ (nxt.cov - Pp) @ G.T
        smoothed[t] = Gaussian(mean, cov, check=False)
    return SmootherResult(filt, smoothed, filter_out.loglik, pred, filter_out.step_loglik)


# --------------------------------------------------------------------------- brute force


def _trajectory_prior(A_seq, B_seq, c_seq, SW_seq, Kp_seq, mu_u, Su, m0, P0):
    """Dense prior over ``v = [x_0, u_0, ..., x_{T-1}, u_{T-1}, x_T]`` as ``v = L xi + m``."""
    T, dx, du = B_seq.shape
    n = dx + du
    nv = T * n + dx
    blocks = [P0] + [blk for t in range(T) for blk in (Su[t], SW_seq[t])]
    nxi = sum(b.shape[0] for b in blocks)
    cov_xi = np.zeros((nxi, nxi))
    o = 0
    for b in blocks:
        k = b.shape[0]
        cov_xi[o:o + k, o:o + k] = b
        o += k
    L = np.zeros((nv, nxi))
    m = np.zeros(nv)
    L[:dx, :dx] = np.eye(dx)
    m[:dx] = m0
    o = dx
    for t in range(T):
        xi_ = slice(t * n, t * n + dx)
        ui = slice(t * n + dx, (t + 1) * n)
        nx_ = slice((t + 1) * n, (t + 1) * n + dx)
        L[ui] = Kp_seq[t] @ L[xi_]
        L[ui, o:o + du] += np.eye(du)
        m[ui] = Kp_seq[t] @ m[xi_] + mu_u[t]
        o += du
        L[nx_] = A_seq[t] @ L[xi_] + B_seq[t] @ L[ui]
        L[nx_, o:o + dx] += np.eye(dx)
        m[nx_] = A_seq[t] @ m[xi_] + B_seq[t] @ m[ui] + c_seq[t]
        o += dx
    return L, m, cov_xi


def batch_posterior(A_seq, B_seq, c_seq, SW_seq, Kp_seq, mu_u, Su, m0, P0, observations,
                    terminal=None):
    """Posterior over the whole trajectory by one dense conditioning.

    ``observations`` is a list over t of ``None`` or ``(H, e, Sigma, target)`` acting on
    ``[x_t; u_t]``; ``terminal`` is ``None`` or ``(Sigma, target)`` on ``x_T``. Returns
    ``(joints, terminal_state, loglik)`` with ``joints[t]`` over ``[x_t; u_t]``.
    """
    A_seq, B_seq = np.asarray(A_seq, dtype=float), np.asarray(B_seq, dtype=float)
    T, dx, du = B_seq.shape
    n = dx + du
    L, m, cov_xi = _trajectory_prior(A_seq, B_seq, np.asarray(c_seq, float), np.asarray(SW_seq, float),
                                     np.asarray(Kp_seq, float), np.asarray(mu_u, float),
                                     np.asarray(Su, float), np.asarray(m0, float), np.asarray(P0, float))
    nv = m.shape[0]
    rows, offs, noise, targets = [], [], [], []
    for t, ob in enumerate(observations):
        if ob is None:
            continue
        H, e, Sig, y = ob
        sel = np.zeros((H.shape[0], nv))
        sel[:, t * n:(t + 1) * n] = H
        rows.append(sel)
        offs.append(e)
        noise.append(Sig)
        targets.append(y)
    if terminal is not None:
        Sig, y = terminal
        sel = np.zeros((dx, nv))
        sel[:, T * n:] = np.eye(dx)
        rows.append(sel)
        offs.append(np.zeros(dx))
        noise.append(Sig)
        targets.append(y)
    prior = Gaussian(m, L @ cov_xi @ L.T, check=False)
    if not rows:
        joint = prior
        loglik = 0.0
    else:
        Hs = np.vstack(rows)
        e = np.concatenate(offs)
        no = Hs.shape[0]
        Rn = np.zeros((no, no))
        o = 0
        for S in noise:
            k = S.shape[0]
            Rn[o:o + k, o:o + k] = S
            o += k
        y = np.concatenate(targets)
        obs_marg = propagate_affine(prior, Hs, e, Rn)
        loglik = log_density(obs_marg, y)
        full_mean = np.concatenate([m, obs_marg.mean])
        cross = prior.cov @ Hs.T
        full_cov = np.block([[prior.cov, cross], [cross.T, obs_marg.cov]])
        joint = condition(Gaussian(full_mean, full_cov, check=False), y)
    joints = [
        Gaussian(joint.mean[t * n:(t + 1) * n], joint.cov[t * n:(t + 1) * n, t * n:(t + 1) * n], check=False)
        for t in range(T)
    ]
    xT = Gaussian(joint.mean[T * n:], joint.cov[T * n:, T * n:], check=False)
    return joints, xT, float(loglik)


def batch_posterior_for_scenario(scenario: Scenario, alpha: float, use_measurements: bool = True):
    """Dense posterior for the i2c chain of a scenario at cost temperature ``alpha``."""
    T, dx, du = scenario.T, scenario.dx, scenario.du
    dyn, cost = scenario.dynamics, scenario.cost
    W_inv = np.linalg.inv(alpha * cost.W)
    obs = []
    for t in range(T):
        if t < scenario.tau:
            if use_measurements:
                mm = scenario.measure_model
                obs.append((mm.H, mm.e, mm.SigmaV, scenario.measurements[t]))
            else:
                obs.append(None)
        else:
            obs.append((cost.H, cost.e, W_inv, cost.z_star[t - scenario.tau]))
    term = None
    if cost.terminal is not None:
        term = (np.linalg.inv(alpha * cost.terminal.W), cost.terminal.target)
    return batch_posterior(
        np.broadcast_to(dyn.A, (T, dx, dx)), np.broadcast_to(dyn.B, (T, dx, du)),
        np.broadcast_to(dyn.c, (T, dx)), np.broadcast_to(dyn.SigmaW, (T, dx, dx)),
        np.zeros((T, du, dx)), np.array([g.mean for g in scenario.u_prior]),
        np.array([g.cov for g in scenario.u_prior]), scenario.x0_prior.mean,
        scenario.x0_prior.cov, obs, term,
    )
