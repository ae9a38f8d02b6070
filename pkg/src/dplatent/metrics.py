"""Frechet distance between feature Gaussians, and the Inception Score."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (len(mean), len(mean)):
            raise InvalidArgument(f"covariance shape {cov.shape} does not match mean of length {len(mean)}")
        if not (np.isfinite(mean).all() and np.isfinite(cov).all()):
            raise InvalidArgument("non-finite Gaussian statistics")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    @classmethod
    def from_features(cls, features) -> "GaussianSummary":
        f = np.asarray(features, dtype=np.float64)
        if f.ndim != 2 or len(f) < 2:
            raise InvalidArgument("need at least two feature vectors of shape (n, m)")
        return cls(f.mean(axis=0), np.cov(f, rowvar=False))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def fid(a: GaussianSummary, b: GaussianSummary) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The cross term uses the symmetric form ``(S_a^(1/2) S_b S_a^(1/2))^(1/2)``,
    which has the same trace; tiny negative eigenvalues are clamped to zero.
    """
    if a.mean.shape != b.mean.shape:
        raise InvalidArgument("feature dimensions differ")
    root_a = _psd_sqrt(a.cov)
    cross = np.linalg.eigvalsh(0.5 * ((root_a @ b.cov @ root_a) + (root_a @ b.cov @ root_a).T))
    tr_cross = np.sqrt(np.clip(cross, 0.0, None)).sum()
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_cross)
    return max(value, 0.0)


def inception_score(probs, floor: float = 1e-12, diagnostics: dict | None = None) -> float:
    """exp(mean_i KL(p(y|x_i) || p(y))), evaluated in log space."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise InvalidArgument("probabilities must be a nonempty (n, K) array")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-5):
        raise InvalidArgument("every row must be a probability vector")
    floored = int((p < floor).sum())
    if floored:
        log.debug("flooring %d zero probabilities at %g", floored, floor)
    if diagnostics is not None:
        diagnostics["floored"] = floored
    log_p = np.log(np.maximum(p, floor))
    log_marginal = np.log(np.maximum(p.mean(axis=0), floor))
    kl = (p * (log_p - log_marginal)).sum(axis=1)
    return float(np.exp(kl.mean()))
