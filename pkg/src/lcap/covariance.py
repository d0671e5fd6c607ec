"""Per-block covariance estimation: sample matrices, the pooled linear
shrinkage estimator, and the pooled normalization matrix.

The shrinkage estimator replaces every sample matrix S_iv by the convex
combination rho * mu * I + (1 - rho) * S_iv with a single (mu, rho) pair
pooled over all blocks, which keeps the estimate positive definite in the
high-dimensional regime.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _core
from .dataset import LongitudinalDataset, VisitBlock

SAMPLE = "sample"
SHRUNK = "shrunk"

_SYMMETRY_TOL = 1e-12


@dataclass(frozen=True)
class CovarianceSet:
    """One symmetric p x p matrix per (subject, visit) block.

    ``matrices`` is stacked in dataset block order; ``keys`` holds the
    aligned (subject_id, visit_index) pairs and ``weights`` the per-block
    observation counts.
    """

    matrices: np.ndarray          # (m, p, p)
    kind: str                     # SAMPLE or SHRUNK
    weights: np.ndarray           # (m,) T_iv
    keys: tuple[tuple[str, int], ...]

    def __post_init__(self):
        if self.kind not in (SAMPLE, SHRUNK):
            raise ValueError(f"unknown covariance kind {self.kind!r}")
        m = self.matrices.shape[0]
        if self.weights.shape[0] != m or len(self.keys) != m:
            raise ValueError("matrices, weights, and keys must align")
        scale = np.abs(self.matrices).max() if m else 0.0
        skew = np.abs(self.matrices - np.transpose(self.matrices, (0, 2, 1))).max()
        if skew > _SYMMETRY_TOL * max(1.0, scale):
            raise ValueError(f"covariance matrices not symmetric (max skew {skew:.3g})")

    @property
    def m(self) -> int:
        return self.matrices.shape[0]

    @property
    def p(self) -> int:
        return self.matrices.shape[1]

    def covers(self, ds: LongitudinalDataset) -> bool:
        return self.keys == tuple((b.subject_id, b.visit_index) for b in ds.blocks)

    def projected_variances(self, gamma: np.ndarray) -> np.ndarray:
        flat = self.matrices.reshape(self.m, self.p * self.p)
        return flat @ np.outer(gamma, gamma).ravel()


@dataclass(frozen=True)
class ShrinkageStats:
    """Pooled shrinkage quantities.

    ``per_block`` holds one (dispersion, sampling, structural) triple per
    block; the sampling term is clamped at the dispersion term so that
    psi2 + phi2 == delta2 holds exactly with nonnegative parts.  ``rho`` is
    the weight on the identity target, zero by convention when the pooled
    dispersion vanishes.
    """

    mu: float
    delta2: float
    psi2: float
    phi2: float
    rho: float
    per_block: np.ndarray  # (m, 3)


def sample_covariance(block: VisitBlock) -> np.ndarray:
    """Sample covariance Y'Y / T of a centered visit block."""
    if not block.centered:
        raise ValueError(
            f"block (subject {block.subject_id!r}, visit {block.visit_index}) "
            "is not centered"
        )
    Y = block.observations
    return Y.T @ Y / Y.shape[0]


def sample_covariance_set(ds: LongitudinalDataset) -> CovarianceSet:
    """Sample covariance of every block of a centered dataset."""
    matrices = np.stack([sample_covariance(b) for b in ds.blocks])
    weights = np.array([float(b.n_obs) for b in ds.blocks])
    keys = tuple((b.subject_id, b.visit_index) for b in ds.blocks)
    return CovarianceSet(matrices=matrices, kind=SAMPLE, weights=weights, keys=keys)


def shrinkage_stats(ds: LongitudinalDataset, S: CovarianceSet,
                    params) -> ShrinkageStats:
    """Estimate the pooled shrinkage weights at the given model parameters.

    The target scale ``mu`` averages the model-implied variances, the
    dispersion/sampling split determines how far each sample matrix is pulled
    toward the identity target.
    """
    if S.kind != SAMPLE:
        raise ValueError("shrinkage statistics are computed from sample covariances")
    if not S.covers(ds):
        raise ValueError("covariance set does not cover the dataset blocks")
    gamma = np.asarray(params.gamma, dtype=np.float64)
    gamma_sq = float(gamma @ gamma)
    if gamma_sq == 0.0:
        raise ValueError("degenerate projection: gamma is the zero vector")
    ba_subj, starts, V = _subject_layout(ds)
    X = np.stack([b.covariates for b in ds.blocks])
    eta = _core.linear_predictor(X, ba_subj, np.asarray(params.beta0i), np.asarray(params.beta1))
    svals = S.projected_variances(gamma)
    w_pool = 1.0 / (ds.n * V[ba_subj])
    sc = _core.shrink_scalars(svals, gamma_sq, S.weights, w_pool, eta)
    return ShrinkageStats(mu=sc.mu, delta2=sc.delta2, psi2=sc.psi2, phi2=sc.phi2,
                          rho=sc.rho, per_block=sc.per_block)


def shrink_covariances(S: CovarianceSet, stats: ShrinkageStats) -> CovarianceSet:
    """Apply the pooled shrinkage: rho * mu * I + (1 - rho) * S_iv per block."""
    if S.kind != SAMPLE:
        raise ValueError("shrinkage applies to sample covariances")
    p = S.p
    matrices = stats.rho * stats.mu * np.eye(p) + (1.0 - stats.rho) * S.matrices
    return CovarianceSet(matrices=matrices, kind=SHRUNK, weights=S.weights,
                         keys=S.keys)


def build_h(ds: LongitudinalDataset, sigma_hat: CovarianceSet) -> np.ndarray:
    """T-weighted average of the covariance estimates (the normalization
    matrix for the projection constraint)."""
    if not sigma_hat.covers(ds):
        raise ValueError("covariance set does not cover the dataset blocks")
    H = np.tensordot(sigma_hat.weights, sigma_hat.matrices, axes=1)
    H /= sigma_hat.weights.sum()
    H = 0.5 * (H + H.T)
    eigvals = np.linalg.eigvalsh(H)
    if eigvals[0] < 1e-10 * max(eigvals[-1], 0.0):
        raise np.linalg.LinAlgError(
            f"normalization matrix numerically singular (min eigenvalue "
            f"{eigvals[0]:.3g}); use the shrinkage covariance estimator"
        )
    return H


def _subject_layout(ds: LongitudinalDataset):
    index = {sid: i for i, sid in enumerate(ds.subjects)}
    subj = np.array([index[b.subject_id] for b in ds.blocks], dtype=np.int64)
    V = np.bincount(subj, minlength=ds.n)
    starts = np.concatenate(([0], np.cumsum(V)[:-1]))
    return subj, starts, V
