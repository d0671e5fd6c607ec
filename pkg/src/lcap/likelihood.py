"""The approximate negative hierarchical log-likelihood and its analytic
derivatives.

For projected variances s_iv = gamma' Sigma_hat_iv gamma the objective is

    sum_iv (T_iv / 2) {eta_iv + s_iv exp(-eta_iv)}
        + sum_i {log(sigma2) / 2 + (beta0i - beta0)^2 / (2 sigma2)},

with eta_iv = beta0i + x_iv' beta1.  The first sum is the conditional part
given the subject intercepts, the second the intercept-model part.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import _core
from .covariance import CovarianceSet, _subject_layout
from .dataset import LongitudinalDataset


@dataclass(frozen=True)
class ModelParams:
    """Projection, fixed effects, subject intercepts, and intercept variance."""

    gamma: np.ndarray    # (p,)
    beta0: float
    beta1: np.ndarray    # (q,)
    beta0i: np.ndarray   # (n,)
    sigma2: float

    def copy(self) -> "ModelParams":
        return replace(self, gamma=self.gamma.copy(), beta1=self.beta1.copy(),
                       beta0i=self.beta0i.copy())


@dataclass(frozen=True)
class LikelihoodParts:
    conditional: float
    random_effect: float

    @property
    def total(self) -> float:
        return self.conditional + self.random_effect


def _prepare(ds: LongitudinalDataset, sigma_hat: CovarianceSet, params: ModelParams):
    if params.sigma2 <= 0.0:
        raise ValueError("sigma2 must be positive")
    if not sigma_hat.covers(ds):
        raise ValueError("covariance set does not cover the dataset blocks")
    subj, starts, V = _subject_layout(ds)
    X = np.stack([b.covariates for b in ds.blocks])
    svals = sigma_hat.projected_variances(np.asarray(params.gamma))
    eta = _core.linear_predictor(X, subj, np.asarray(params.beta0i),
                                 np.asarray(params.beta1))
    return subj, starts, X, svals, eta


def neg_hloglik(ds: LongitudinalDataset, sigma_hat: CovarianceSet,
                params: ModelParams) -> LikelihoodParts:
    """Evaluate the negative hierarchical log-likelihood."""
    _, _, _, svals, eta = _prepare(ds, sigma_hat, params)
    cond, rand = _core.nhl_parts(svals, sigma_hat.weights, eta,
                                 np.asarray(params.beta0i), params.beta0,
                                 params.sigma2)
    return LikelihoodParts(conditional=cond, random_effect=rand)


def grad_hess_beta0i(ds: LongitudinalDataset, sigma_hat: CovarianceSet,
                     params: ModelParams, i: int) -> tuple[float, float]:
    """Analytic first and second derivative in subject i's intercept.

    The Hessian is a sum of positive terms plus 1/sigma2, hence always
    positive.
    """
    subj, _, _, svals, eta = _prepare(ds, sigma_hat, params)
    mask = subj == i
    if not mask.any():
        raise IndexError(f"no blocks for subject index {i}")
    T = sigma_hat.weights[mask]
    work = svals[mask] * np.exp(-eta[mask])
    grad = float((0.5 * T * (1.0 - work)).sum()
                 + (params.beta0i[i] - params.beta0) / params.sigma2)
    hess = float((0.5 * T * work).sum() + 1.0 / params.sigma2)
    return grad, hess


def grad_hess_beta1(ds: LongitudinalDataset, sigma_hat: CovarianceSet,
                    params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient and Hessian in the fixed-effect slopes."""
    _, _, X, svals, eta = _prepare(ds, sigma_hat, params)
    T = sigma_hat.weights
    work = 0.5 * T * svals * np.exp(-eta)
    grad = X.T @ (0.5 * T - work)
    hess = (X * work[:, None]).T @ X
    return grad, hess


def update_hyperparams(beta0i: np.ndarray) -> tuple[float, float]:
    """Mean and population variance of the subject intercepts.

    These are the exact minimizers of the objective in (beta0, sigma2) with
    everything else fixed; the variance is floored at a tiny positive value
    so downstream 1/sigma2 terms stay finite.
    """
    return _core.hyperparams(np.asarray(beta0i, dtype=np.float64))
