"""Reference (numpy) forward/backward pass over the joint state-action chain.

The chain state at step t is ``s_t = [x_t; u_t]`` (length ``n = dx + du``)::

    x_{t+1} = A_t x_t + B_t u_t + c_t + w_t,        w_t ~ N(0, SW_t)
    u_t     = Kp_t x_t + mu_u_t + eps_t,            eps_t ~ N(0, Su_t)

Observations enter in information form: step t contributes the factor
``exp(-0.5 s^T J_t s + h_t^T s)`` and the final state ``x_T`` the factor
``exp(-0.5 x^T JT x + hT^T x)``. Constant terms of the log-likelihood are handled
by the caller; ``lfrag`` returns the data-dependent part per step so that the
step log-likelihood is ``-0.5 * (const_t + kappa_t + lfrag_t)``.

The compiled kernel mirrors this function line for line.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np


class ChainResult(NamedTuple):
    fm: np.ndarray  # (T, n) filtered means
    fP: np.ndarray  # (T, n, n) filtered covariances
    sm: np.ndarray  # (T, n) smoothed means
    sP: np.ndarray  # (T, n, n) smoothed covariances
    pm: np.ndarray  # (T+1, dx) predicted state means, pm[0] = prior mean
    pP: np.ndarray  # (T+1, dx, dx) predicted state covariances
    xTm: np.ndarray  # (dx,) final-state posterior mean
    xTP: np.ndarray  # (dx, dx) final-state posterior covariance
    G: np.ndarray  # (T, n, dx) smoother gains s_t | x_{t+1}
    lfrag: np.ndarray  # (T+1,) data-dependent log-likelihood terms
    degenerate: bool  # pseudo-inverse used in the backward pass


def _update(mu, P, J, h):
    n = mu.shape[0]
    M = np.eye(n) + P @ J
    Pn = np.linalg.solve(M, P)
    Pn = 0.5 * (Pn + Pn.T)
    g = h - J @ mu
    mn = mu + Pn @ g
    _, logdet = np.linalg.slogdet(M)
    frag = logdet + mu @ J @ mu - 2.0 * h @ mu - g @ Pn @ g
    return mn, Pn, frag


def forward_backward(A, B, c, SW, Kp, mu_u, Su, m0, P0, Jf, hf, JT, hT) -> ChainResult:
    T, dx, du = B.shape
    n = dx + du
    fm = np.empty((T, n))
    fP = np.empty((T, n, n))
    pm = np.empty((T + 1, dx))
    pP = np.empty((T + 1, dx, dx))
    lfrag = np.empty(T + 1)
    mx, Pxx = np.asarray(m0, dtype=float), np.asarray(P0, dtype=float)

    for t in range(T):
        pm[t], pP[t] = mx, Pxx
        K = Kp[t]
        mu = np.concatenate([mx, K @ mx + mu_u[t]])
        PxK = Pxx @ K.T
        P = np.block([[Pxx, PxK], [PxK.T, K @ PxK + Su[t]]])
        fm[t], fP[t], lfrag[t] = _update(mu, P, Jf[t], hf[t])
        M = np.hstack([A[t], B[t]])
        mx = M @ fm[t] + c[t]
        Pxx = M @ fP[t] @ M.T + SW[t]
        Pxx = 0.5 * (Pxx + Pxx.T)

    pm[T], pP[T] = mx, Pxx
    xTm, xTP, lfrag[T] = _update(mx, Pxx, JT, hT)

    sm = np.empty_like(fm)
    sP = np.empty_like(fP)
    G = np.empty((T, n, dx))
    degenerate = False
    nx_m, nx_P = xTm, xTP
    for t in range(T - 1, -1, -1):
        M = np.hstack([A[t], B[t]])
        cross = fP[t] @ M.T
        try:
            L = np.linalg.cholesky(pP[t + 1])
            G[t] = np.linalg.solve(L.T, np.linalg.solve(L, cross.T)).T
        except np.linalg.LinAlgError:
            degenerate = True
            G[t] = cross @ np.linalg.pinv(pP[t + 1], hermitian=True)
        sm[t] = fm[t] + G[t] @ (nx_m - pm[t + 1])
        S = fP[t] + G[t] @ (nx_P - pP[t + 1]) @ G[t].T
        sP[t] = 0.5 * (S + S.T)
        nx_m, nx_P = sm[t, :dx], sP[t, :dx, :dx]

    return ChainResult(fm, fP, sm, sP, pm, pP, xTm, xTP, G, lfrag, degenerate)
