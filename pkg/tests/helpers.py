"""Random problem generators shared by the test modules."""

import numpy as np

from i2c.gauss import Gaussian
from i2c.model import LinearDynamics, LinearObservation, QuadraticCost, Scenario
from i2c import kernels

BACKENDS = ["python"] + (["compiled"] if kernels.HAVE_COMPILED else [])


def spd(rng, n, floor=0.1):
    M = rng.standard_normal((n, n))
    return M @ M.T / n + floor * np.eye(n)


def stable_A(rng, dx, radius=(0.5, 1.2)):
    A = rng.standard_normal((dx, dx))
    rho = max(np.max(np.abs(np.linalg.eigvals(A))), 1e-9)
    return A / rho * rng.uniform(*radius)


def state_action_cost(Q, R, T, z_star=None):
    dx, du = Q.shape[0], R.shape[0]
    W = np.zeros((dx + du, dx + du))
    W[:dx, :dx], W[dx:, dx:] = Q, R
    C = np.vstack([np.eye(dx), np.zeros((du, dx))])
    D = np.vstack([np.zeros((dx, du)), np.eye(du)])
    zs = np.zeros((T, dx + du)) if z_star is None else np.asarray(z_star, dtype=float)
    return QuadraticCost(W, zs, C, D, np.zeros(dx + du))


def make_scenario(dyn, cost, x0, T, tau=0, mm=None, meas=None, u_var=1e6, u_mean=None):
    dx, du = dyn.dx, dyn.du
    if u_mean is None:
        u_mean = np.zeros((T, du))
    up = tuple(Gaussian(u_mean[t], u_var * np.eye(du)) for t in range(T))
    dy = 0 if mm is None else mm.dim
    if meas is None:
        meas = np.zeros((tau, dy))
    return Scenario(dx, du, cost.dz, dy, T, tau, dyn, mm, cost, x0, up, np.asarray(meas)).validate()


def lqr_regime_scenario(rng, dx=None, du=None, T=None):
    """Random controllable system in the low-noise, broad-control-prior regime."""
    dx = int(rng.integers(1, 5)) if dx is None else dx
    du = int(rng.integers(1, 3)) if du is None else du
    T = int(rng.integers(2, 21)) if T is None else T
    while True:
        A = stable_A(rng, dx)
        B = rng.standard_normal((dx, du))
        ctrb = np.hstack([np.linalg.matrix_power(A, i) @ B for i in range(dx)])
        if np.linalg.matrix_rank(ctrb) == dx:
            break
    Q, R = spd(rng, dx), spd(rng, du)
    m0 = rng.standard_normal(dx)
    m0 *= rng.uniform(0.5, 2.0) / np.linalg.norm(m0)
    dyn = LinearDynamics(A, B, np.zeros(dx), 1e-8 * np.eye(dx))
    cost = state_action_cost(Q, R, T)
    scen = make_scenario(dyn, cost, Gaussian(m0, 1e-6 * np.eye(dx)), T)
    return scen, Q, R


def simulate(rng, dyn, mm, x0, controls):
    x = rng.multivariate_normal(x0.mean, x0.cov)
    xs, ys = [x], []
    for u in controls:
        ys.append(mm.C @ x + mm.D @ u + mm.e + rng.multivariate_normal(np.zeros(mm.dim), mm.SigmaV))
        x = dyn.A @ x + dyn.B @ u + dyn.c + rng.multivariate_normal(np.zeros(dyn.dx), dyn.SigmaW)
        xs.append(x)
    return np.array(xs), np.array(ys)


def estimation_problem(rng, dx=None, du=None, dy=None, T=None):
    """Random known-input system with simulated measurements at every step."""
    dx = int(rng.integers(1, 5)) if dx is None else dx
    du = int(rng.integers(1, 3)) if du is None else du
    dy = int(rng.integers(1, dx + 1)) if dy is None else dy
    T = int(rng.integers(2, 11)) if T is None else T
    dyn = LinearDynamics(stable_A(rng, dx), rng.standard_normal((dx, du)), 0.1 * rng.standard_normal(dx),
                         0.1 * spd(rng, dx))
    mm = LinearObservation(rng.standard_normal((dy, dx)), 0.3 * rng.standard_normal((dy, du)),
                           0.1 * rng.standard_normal(dy), 0.2 * spd(rng, dy))
    x0 = Gaussian(rng.standard_normal(dx), spd(rng, dx))
    controls = rng.standard_normal((T, du))
    _, ys = simulate(rng, dyn, mm, x0, controls)
    return dyn, mm, x0, controls, ys


def generic_scenario(rng, dx, du, T, tau, dz=None):
    """Well-conditioned scenario with a general cost map and measurements before tau."""
    dz = int(rng.integers(1, dx + du + 1)) if dz is None else dz
    dy = int(rng.integers(1, dx + 1))
    dyn = LinearDynamics(stable_A(rng, dx), rng.standard_normal((dx, du)), 0.1 * rng.standard_normal(dx),
                         0.05 * spd(rng, dx))
    mm = LinearObservation(rng.standard_normal((dy, dx)), 0.2 * rng.standard_normal((dy, du)),
                           0.1 * rng.standard_normal(dy), 0.2 * spd(rng, dy))
    cost = QuadraticCost(spd(rng, dz), rng.standard_normal((T - tau, dz)), rng.standard_normal((dz, dx)),
                         rng.standard_normal((dz, du)), 0.1 * rng.standard_normal(dz))
    x0 = Gaussian(rng.standard_normal(dx), spd(rng, dx))
    meas = rng.standard_normal((tau, dy))
    return make_scenario(dyn, cost, x0, T, tau, mm, meas, u_var=2.0,
                         u_mean=0.3 * rng.standard_normal((T, du)))
