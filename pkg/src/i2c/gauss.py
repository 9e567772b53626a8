"""Dense Gaussian algebra in moment form.

Every belief in the package is a :class:`Gaussian` holding a mean vector and a
covariance matrix. The helpers here are the only linear-algebra primitives shared
between the inference solver and the classical reference solvers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))

SYM_TOL = 1e-10
PSD_TOL = 1e-9
CLAMP_FLOOR = 1e-12

Block = Union[slice, Sequence[int], np.ndarray]


class GaussianError(ValueError):
    """Invalid Gaussian input (dimension, definiteness or singularity)."""


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def min_eig(m: np.ndarray) -> float:
    if m.size == 0:
        return np.inf
    return float(np.linalg.eigvalsh(symmetrize(m))[0])


@dataclass(frozen=True, eq=False)
class Gaussian:
    """Multivariate normal N(mean, cov).

    The covariance is symmetrized on construction. With ``clamp=False`` a
    covariance whose smallest eigenvalue is below ``-1e-9`` is rejected; with
    ``clamp=True`` eigenvalues are floored at ``1e-12`` instead.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __init__(self, mean, cov, clamp: bool = False, check: bool = True):
        mean = np.atleast_1d(np.asarray(mean, dtype=float)).copy()
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        n = mean.shape[0]
        if mean.ndim != 1 or cov.shape != (n, n):
            raise GaussianError(
                f"mean shape {mean.shape} and cov shape {cov.shape} are inconsistent"
            )
        cov = symmetrize(cov)
        if clamp:
            w, v = np.linalg.eigh(cov)
            if w[0] < CLAMP_FLOOR:
                cov = symmetrize((v * np.maximum(w, CLAMP_FLOOR)) @ v.T)
        elif check:
            lam = min_eig(cov)
            if lam < -PSD_TOL:
                raise GaussianError(
                    f"covariance is not positive semi-definite (min eigenvalue {lam:.3e})"
                )
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def __repr__(self) -> str:
        return f"Gaussian(mean={self.mean!r}, cov={self.cov!r})"


def _block_index(block: Block, n: int) -> np.ndarray:
    idx = np.arange(n)[block] if isinstance(block, slice) else np.asarray(block, dtype=int)
    idx = np.atleast_1d(idx)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= n:
        raise GaussianError(f"block {block!r} out of range for dimension {n}")
    return idx


def marginalize(joint: Gaussian, block: Block) -> Gaussian:
    """Marginal over the entries selected by ``block``."""
    idx = _block_index(block, joint.dim)
    return Gaussian(joint.mean[idx], joint.cov[np.ix_(idx, idx)], check=False)


def _solve_spd(m: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    try:
        cho = np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        raise GaussianError(
            f"{what} is singular or indefinite (condition number {np.linalg.cond(m):.3e})"
        ) from None
    y = np.linalg.solve(cho, rhs)
    return np.linalg.solve(cho.T, y)


def condition(joint: Gaussian, b_value, b_block: Block | None = None) -> Gaussian:
    """Condition a joint over ``[a; b]`` on ``b = b_value``.

    By default ``b`` is the trailing ``len(b_value)`` entries; pass ``b_block``
    to pick other indices. Returns the Gaussian over the remaining entries.
    """
    b_value = np.atleast_1d(np.asarray(b_value, dtype=float))
    n = joint.dim
    if b_block is None:
        nb = b_value.shape[0]
        if not 0 < nb < n:
            raise GaussianError(f"cannot condition {n}-dim joint on {nb} values")
        b_idx = np.arange(n - nb, n)
    else:
        b_idx = _block_index(b_block, n)
        if b_idx.shape[0] != b_value.shape[0]:
            raise GaussianError("b_value length does not match the conditioning block")
    a_idx = np.setdiff1d(np.arange(n), b_idx)
    if a_idx.size == 0:
        raise GaussianError("conditioning block covers the whole joint")
    mu, S = joint.mean, joint.cov
    S_ab = S[np.ix_(a_idx, b_idx)]
    S_bb = S[np.ix_(b_idx, b_idx)]
    gain = _solve_spd(S_bb, S_ab.T, "conditioning covariance").T
    mean = mu[a_idx] + gain @ (b_value - mu[b_idx])
    cov = S[np.ix_(a_idx, a_idx)] - gain @ S_ab.T
    return Gaussian(mean, cov, check=False)


def propagate_affine(g: Gaussian, F, f=None, sigma_add=None) -> Gaussian:
    """Push ``g`` through ``y = F x + f + noise`` with noise covariance ``sigma_add``."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    m = F.shape[0]
    if F.shape[1] != g.dim:
        raise GaussianError(f"map has {F.shape[1]} columns, input has dimension {g.dim}")
    f = np.zeros(m) if f is None else np.atleast_1d(np.asarray(f, dtype=float))
    sigma_add = (
        np.zeros((m, m)) if sigma_add is None else np.atleast_2d(np.asarray(sigma_add, dtype=float))
    )
    if f.shape != (m,) or sigma_add.shape != (m, m):
        raise GaussianError("offset or additive covariance has the wrong dimension")
    return Gaussian(F @ g.mean + f, F @ g.cov @ F.T + sigma_add)


def log_density(g: Gaussian, x) -> float:
    """Log of the normal density at ``x``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    try:
        cho = np.linalg.cholesky(g.cov)
    except np.linalg.LinAlgError:
        raise GaussianError("log_density needs a positive definite covariance") from None
    r = np.linalg.solve(cho, x - g.mean)
    logdet = 2.0 * np.sum(np.log(np.diag(cho)))
    return float(-0.5 * (g.dim * LOG_2PI + logdet + r @ r))


def kl_divergence(q: Gaussian, p: Gaussian) -> float:
    """KL(q || p) in closed form."""
    if q.dim != p.dim:
        raise GaussianError("KL between Gaussians of different dimension")
    try:
        cho = np.linalg.cholesky(p.cov)
    except np.linalg.LinAlgError:
        raise GaussianError("KL needs a positive definite reference covariance") from None
    sol = np.linalg.solve(cho, np.column_stack([q.cov, q.mean - p.mean]))
    tr = np.trace(np.linalg.solve(cho.T, sol[:, :-1]))
    r = sol[:, -1]
    sign, logdet_q = np.linalg.slogdet(q.cov)
    if sign <= 0:
        return np.inf
    logdet_p = 2.0 * np.sum(np.log(np.diag(cho)))
    kl = 0.5 * (tr + r @ r - q.dim + logdet_p - logdet_q)
    return max(float(kl), 0.0)


def psd_pinv(m: np.ndarray, floor: float = 1e-10) -> tuple[np.ndarray, bool]:
    """Pseudo-inverse of a symmetric PSD matrix with an eigenvalue floor.

    Eigenvalues at or below ``floor`` are dropped. The flag is True when any
    direction was dropped.
    """
    w, v = np.linalg.eigh(symmetrize(m))
    keep = w > floor
    inv = (v[:, keep] / w[keep]) @ v[:, keep].T
    return symmetrize(inv), bool((~keep).any())
