"""Shared numerical helpers: Gaussian log-densities, covariance flooring, EM config."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

COV_FLOOR = 1e-6
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class EmConfig:
    """Stopping rule shared by Baum-Welch and GMM EM."""

    tol: float = 1e-4
    max_iter: int = 500
    cov_floor: float = COV_FLOOR

    def __post_init__(self):
        if self.tol < 0:
            raise ValueError("tol must be non-negative")
        if self.max_iter < 0:
            raise ValueError("max_iter must be non-negative")
        if self.cov_floor <= 0:
            raise ValueError("cov_floor must be positive")


@dataclass
class FitReport:
    iterations: int = 0
    log_likelihood_trace: list = field(default_factory=list)
    converged: bool = False

    def to_dict(self):
        return {
            "iterations": int(self.iterations),
            "log_likelihood_trace": [float(v) for v in self.log_likelihood_trace],
            "converged": bool(self.converged),
        }


def relative_improvement(old, new):
    return (new - old) / max(abs(old), 1e-300)


def floor_covariance(cov, floor=COV_FLOOR):
    """Symmetrize and raise every eigenvalue below ``floor`` to ``floor``.

    Well-conditioned matrices come back unchanged up to symmetrization.
    """
    cov = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(cov)
    if w.min() >= floor:
        return cov
    w = np.maximum(w, floor)
    out = (v * w) @ v.T
    out = 0.5 * (out + out.T)
    # eigh round-off can leave the smallest eigenvalue a hair under the floor
    w2 = np.linalg.eigvalsh(out)
    if w2.min() < floor:
        out = out + (floor - w2.min()) * np.eye(out.shape[0])
    return out


def gaussian_logpdf(X, mean, cov):
    """Log N(x; mean, cov) for each row of ``X`` (shape (n, d)) -> (n,)."""
    X = np.atleast_2d(X)
    d = mean.shape[0]
    L = np.linalg.cholesky(cov)
    diff = X - mean
    z = np.linalg.solve(L, diff.T)
    # points absurdly far out overflow to inf, i.e. a log density of -inf
    with np.errstate(over="ignore"):
        maha = np.sum(z * z, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return -0.5 * (d * LOG_2PI + logdet + maha)


def logsumexp(a, axis=None):
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def check_finite_matrix(values, what="observations"):
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"{what} must be a 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contain non-finite entries")
    return arr
