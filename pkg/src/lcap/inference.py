"""Subject-level nonparametric bootstrap for the coefficient parameters.

Whole subjects are resampled with replacement (visit data kept intact) and
the coefficients are re-estimated with the projection frozen, so the
replicate distribution reflects between-subject variability.  Intervals come
from the percentile or the bias-corrected (non-accelerated) percentile
construction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from . import _core
from .dataset import LongitudinalDataset, validate_dataset

PERCENTILE = "percentile"
BIAS_CORRECTED = "bc"


@dataclass(frozen=True)
class BootstrapDistribution:
    """Replicate coefficient vectors (beta0, beta1) plus resampling metadata.

    ``replicates`` has one row per converged replicate; ``point_estimate`` is
    the full-data coefficient fit at the same frozen projection (used by the
    bias-corrected interval).
    """

    replicates: np.ndarray       # (B - failures, 1 + q)
    B: int
    seed: int
    gamma_fixed: np.ndarray
    failures: int
    point_estimate: np.ndarray   # (1 + q,)

    @property
    def n_ok(self) -> int:
        return self.replicates.shape[0]


@dataclass(frozen=True)
class ConfidenceInterval:
    lower: float
    upper: float
    level: float
    method: str


def bootstrap_coefficients(ds: LongitudinalDataset, gamma_hat: np.ndarray,
                           B: int, config, seed: int) -> BootstrapDistribution:
    """Draw B subject resamples and re-fit the coefficients at a frozen
    projection.

    Duplicated subjects are treated as distinct (each gets its own
    intercept).  Replicates that fail to converge are excluded and counted;
    a warning fires when more than 5% are lost.  Replicate RNG streams are
    derived from (seed, replicate index), so the distribution does not depend
    on execution order.
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    report = validate_dataset(ds)
    if not report.ok:
        loc, msg = report.errors[0]
        raise ValueError(f"dataset failed validation; first error: {loc}: {msg}")
    if not ds.centered:
        raise ValueError("dataset must be centered before bootstrapping")
    gamma = np.array(gamma_hat, dtype=np.float64, copy=True)
    gamma.setflags(write=False)
    ba = _core.block_arrays(ds)
    svals = _core.projected_variances(ba.S_flat, gamma)
    gamma_sq = float(gamma @ gamma)
    shrink = getattr(config, "shrinkage", "shrink") == "shrink"

    full = _core.coef_fit(svals, gamma_sq, ba.T, ba.X, ba.subj, ba.starts,
                          ba.w_pool, shrink=shrink, tol=config.tol,
                          max_iter=config.max_outer_iters)
    point = np.concatenate(([full.beta0], full.beta1))

    n = ba.n
    block_index = [np.arange(ba.starts[i], ba.starts[i] + ba.V[i]) for i in range(n)]
    rows = []
    failures = 0
    for b in range(B):
        rng = np.random.default_rng([seed, b])
        draw = rng.integers(0, n, size=n)
        idx = np.concatenate([block_index[d] for d in draw])
        V_b = ba.V[draw]
        subj_b = np.repeat(np.arange(n), V_b)
        starts_b = np.concatenate(([0], np.cumsum(V_b)[:-1]))
        w_pool_b = 1.0 / (n * V_b[subj_b])
        init = (full.beta0i[draw], full.beta1, full.beta0,
                max(full.sigma2, _core.SIGMA2_FLOOR))
        fit = _core.coef_fit(svals[idx], gamma_sq, ba.T[idx], ba.X[idx],
                             subj_b, starts_b, w_pool_b, shrink=shrink,
                             tol=config.tol, max_iter=config.max_outer_iters,
                             init=init)
        if fit.converged and np.isfinite(fit.objective):
            rows.append(np.concatenate(([fit.beta0], fit.beta1)))
        else:
            failures += 1
    if failures > 0.05 * B:
        warnings.warn(
            f"{failures}/{B} bootstrap replicates failed to converge and were "
            "excluded",
            RuntimeWarning,
            stacklevel=2,
        )
    replicates = (np.vstack(rows) if rows
                  else np.empty((0, 1 + ba.q)))
    return BootstrapDistribution(replicates=replicates, B=B, seed=seed,
                                 gamma_fixed=gamma, failures=failures,
                                 point_estimate=point)


def confidence_interval(dist: BootstrapDistribution, coefficient_index: int,
                        level: float = 0.95,
                        method: str = PERCENTILE) -> ConfidenceInterval:
    """Percentile or bias-corrected interval for one coefficient.

    ``coefficient_index`` addresses the replicate columns: 0 is the
    intercept, 1..q the covariate slopes.  Quantiles use linear (type-7)
    interpolation.
    """
    if dist.n_ok == 0:
        raise ValueError("no converged bootstrap replicates")
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    col = dist.replicates[:, coefficient_index]
    alpha = 1.0 - level
    if method == PERCENTILE:
        lower, upper = np.quantile(col, [alpha / 2.0, 1.0 - alpha / 2.0])
    elif method == BIAS_CORRECTED:
        theta = dist.point_estimate[coefficient_index]
        if np.all(col == theta):
            warnings.warn(
                "bias correction undefined (all replicates equal the point "
                "estimate); falling back to the percentile interval",
                RuntimeWarning,
                stacklevel=2,
            )
            return confidence_interval(dist, coefficient_index, level, PERCENTILE)
        z0 = norm.ppf((col < theta).mean())
        z_alpha = norm.ppf(alpha / 2.0)
        levels = norm.cdf([2.0 * z0 + z_alpha, 2.0 * z0 - z_alpha])
        lower, upper = np.quantile(col, levels)
    else:
        raise ValueError(f"unknown interval method {method!r}")
    return ConfidenceInterval(lower=float(lower), upper=float(upper),
                              level=level, method=method)
