"""Gaussian moment estimation and Mahalanobis / log-likelihood evaluation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .core import DimensionError, as_feature_matrix

#: relative shrinkage added to the diagonal when a covariance is not positive definite
SHRINKAGE = 1e-6


@dataclass(frozen=True)
class GaussianMoments:
    """Mean, (regularized) covariance, cached inverse and log-determinant."""

    mean: np.ndarray
    cov: np.ndarray
    cov_inverse: np.ndarray
    log_det: float
    chol: np.ndarray
    shrinkage: float = 0.0

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def from_mean_cov(cls, mean, cov) -> "GaussianMoments":
        mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        cov = np.asarray(cov, dtype=np.float64)
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise DimensionError(f"covariance must be {d}x{d}, got {cov.shape}")
        cov = 0.5 * (cov + cov.T)
        cov, chol, eps = _regularized_cholesky(cov)
        eye = np.eye(d)
        inv = linalg.cho_solve((chol, True), eye)
        inv = 0.5 * (inv + inv.T)
        log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
        return cls(mean, cov, inv, log_det, chol, eps)


def _regularized_cholesky(cov: np.ndarray):
    """Cholesky factor of ``cov``, adding eps*I until it succeeds.

    eps starts at ``SHRINKAGE * trace(cov) / d`` (or ``SHRINKAGE`` for a zero
    trace) and grows tenfold per failed attempt.
    """
    try:
        return cov, linalg.cholesky(cov, lower=True), 0.0
    except linalg.LinAlgError:
        pass
    d = cov.shape[0]
    scale = float(np.trace(cov)) / d
    eps = SHRINKAGE * (scale if scale > 0 else 1.0)
    for _ in range(12):
        reg = cov + eps * np.eye(d)
        try:
            return reg, linalg.cholesky(reg, lower=True), eps
        except linalg.LinAlgError:
            eps *= 10.0
    raise linalg.LinAlgError("covariance could not be regularized to positive definite")


def estimate_moments(fm) -> GaussianMoments:
    """Sample mean and unbiased (1/(n-1)) covariance of the rows of ``fm``.

    Requires at least ``d + 2`` rows. Singular covariances are shrunk toward
    a scaled identity so the inverse stays finite.
    """
    fm = as_feature_matrix(fm)
    n, d = fm.shape
    if n < d + 2:
        raise ValueError(f"need at least d+2={d + 2} rows to estimate moments, got {n}")
    mean = fm.mean(axis=0)
    centered = fm - mean
    cov = centered.T @ centered / (n - 1)
    return GaussianMoments.from_mean_cov(mean, cov)


def _check_dim(x: np.ndarray, gm: GaussianMoments) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != gm.dim:
        raise DimensionError(f"expected dimension {gm.dim}, got {x.shape[-1]}")
    return x


def mahalanobis_sq(x, gm: GaussianMoments):
    """Squared Mahalanobis distance of ``x`` (a vector or rows) to ``gm``.

    Evaluated by a triangular solve against the Cholesky factor, which keeps
    the result non-negative.
    """
    x = _check_dim(x, gm)
    diff = np.atleast_2d(x - gm.mean)
    white = linalg.solve_triangular(gm.chol, diff.T, lower=True)
    d2 = np.einsum("ij,ij->j", white, white)
    return float(d2[0]) if x.ndim == 1 else d2


def gaussian_loglik(x, gm: GaussianMoments):
    """Gaussian log-density ``-(d log 2pi + log|cov| + D^2) / 2``."""
    x = _check_dim(x, gm)
    d2 = mahalanobis_sq(x, gm)
    return -0.5 * (gm.dim * np.log(2.0 * np.pi) + gm.log_det + d2)
