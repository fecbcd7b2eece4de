"""Generated-data quality measures over pluggable feature sets: Frechet
distance between Gaussian fits, Inception Score from class-probability rows,
and manifold precision/recall via k-NN radius balls.

Feature dimensionality is whatever the ingested FeatureSet provides; nothing
here embeds a pretrained network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dedup import FeatureSet, _block_dist2
from .errors import DataError, NumericError, ParameterError

_JITTER = 1e-8

# eigenvalues of the product matrix above this magnitude of negativity mean
# the inputs were not valid covariances
_NEG_EIG_LIMIT = 1e-6


@dataclass
class GaussianFit:
    """Sample mean and (jittered) unbiased covariance of a feature set."""

    mu: np.ndarray
    sigma: np.ndarray


@dataclass
class PRResult:
    precision: float
    recall: float
    k: int

    def __post_init__(self):
        if not (0.0 <= self.precision <= 1.0 and 0.0 <= self.recall <= 1.0):
            raise ParameterError("precision and recall must lie in [0, 1]")


def fit_gaussian(fs: FeatureSet) -> GaussianFit:
    if fs.n < 2:
        raise ParameterError("need at least 2 samples to fit a Gaussian")
    x = fs.matrix.astype(np.float64)
    mu = x.mean(axis=0)
    sigma = np.cov(x, rowvar=False, ddof=1)
    sigma = np.atleast_2d(sigma)
    sigma = 0.5 * (sigma + sigma.T) + _JITTER * np.eye(sigma.shape[0])
    return GaussianFit(mu=mu, sigma=sigma)


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(a)
    if vals.min() < -_NEG_EIG_LIMIT:
        raise NumericError(
            f"covariance has eigenvalue {vals.min():.3e}; not positive semidefinite"
        )
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: GaussianFit, b: GaussianFit) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The cross term uses the eigendecomposition of the symmetrized product
    sqrt(S_a) S_b sqrt(S_a); eigenvalues more negative than the tolerance
    raise, smaller negatives are clipped to zero.
    """
    if a.mu.shape != b.mu.shape:
        raise ParameterError(f"dimension mismatch: {a.mu.shape} vs {b.mu.shape}")
    diff = a.mu - b.mu
    try:
        root_a = _sqrtm_psd(a.sigma)
        m = root_a @ b.sigma @ root_a
        m = 0.5 * (m + m.T)
        vals = np.linalg.eigvalsh(m)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"eigendecomposition failed: {e}") from e
    if vals.min() < -_NEG_EIG_LIMIT:
        raise NumericError(
            f"product matrix has eigenvalue {vals.min():.3e} below -{_NEG_EIG_LIMIT}"
        )
    trace_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    fid = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * trace_sqrt)
    return max(fid, 0.0)


def inception_score(probs: np.ndarray, splits: int = 1) -> tuple[float, float]:
    """exp of the mean KL between per-row class distributions and the split
    marginal; returns (mean, std) over splits (std 0 when splits == 1)."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ParameterError(f"probs must be (N, K), got {probs.shape}")
    if splits < 1 or splits > probs.shape[0]:
        raise ParameterError(f"splits must be in [1, N], got {splits}")
    if np.any(probs < 0):
        raise DataError("class probabilities must be non-negative")
    sums = probs.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise DataError(f"row {bad} sums to {sums[bad]:.8f}, not 1")
    scores = []
    for part in np.array_split(probs, splits):
        marginal = part.mean(axis=0, keepdims=True)
        ratio = np.divide(part, marginal, out=np.ones_like(part), where=marginal > 0)
        logratio = np.log(ratio, out=np.zeros_like(part), where=part > 0)
        kl = (part * logratio).sum(axis=1).mean()
        scores.append(np.exp(kl))
    return float(np.mean(scores)), float(np.std(scores))


def _knn_radii(x: np.ndarray, k: int) -> np.ndarray:
    """Distance from each point to its k-th nearest other point (exact)."""
    d2 = _block_dist2(x, x)
    np.fill_diagonal(d2, np.inf)
    part = np.partition(d2, k - 1, axis=1)[:, k - 1]
    return np.sqrt(part)


def precision_recall(real_fs: FeatureSet, gen_fs: FeatureSet, k: int = 3) -> PRResult:
    """Manifold overlap via k-NN radius balls (boundary counts as inside).

    precision = fraction of generated points inside the real manifold;
    recall = fraction of real points inside the generated manifold.
    """
    if real_fs.matrix.shape[1] != gen_fs.matrix.shape[1]:
        raise ParameterError("feature dimensions differ between sets")
    if not (1 <= k < min(real_fs.n, gen_fs.n)):
        raise ParameterError(
            f"k must satisfy 1 <= k < min(N_real, N_gen) = {min(real_fs.n, gen_fs.n)}"
        )
    xr = real_fs.matrix
    xg = gen_fs.matrix
    rr = _knn_radii(xr, k)
    rg = _knn_radii(xg, k)
    cross = np.sqrt(_block_dist2(xr, xg))  # (Nr, Ng)
    precision = float(np.mean(np.any(cross <= rr[:, None], axis=0)))
    recall = float(np.mean(np.any(cross <= rg[None, :], axis=1)))
    return PRResult(precision=precision, recall=recall, k=k)
