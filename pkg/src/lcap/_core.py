"""Array-level kernels shared by the likelihood, fitting, and bootstrap code.

Everything here operates on flat per-block arrays (one entry per (subject,
visit) block, in dataset order: subjects sorted by id, visits ascending).
The model never needs more than the projected variance of each block, so the
hot paths work on scalars per block; full p x p matrices appear only when
assembling the quadratic form for the projection update.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

# exp() overflows float64 just above 709; clip with a warning well before.
EXP_GUARD = 700.0
# Floor for the random-intercept variance so 1/sigma2 stays finite when all
# subject intercepts coincide.
SIGMA2_FLOOR = 1e-10


@dataclass(frozen=True)
class BlockArrays:
    """Compact numeric view of a centered dataset.

    S holds one sample covariance (divisor T_iv) per block; ``starts`` gives
    the first block index of each subject for segment reductions.
    """

    S: np.ndarray        # (m, p, p)
    T: np.ndarray        # (m,) float
    X: np.ndarray        # (m, q)
    subj: np.ndarray     # (m,) int, block -> subject position
    starts: np.ndarray   # (n,) int, first block of each subject
    V: np.ndarray        # (n,) int, visits per subject
    Sbar: np.ndarray     # (p, p) T-weighted average of S
    w_pool: np.ndarray   # (m,) 1 / (n * V_i)

    @property
    def m(self) -> int:
        return self.T.shape[0]

    @property
    def n(self) -> int:
        return self.V.shape[0]

    @property
    def p(self) -> int:
        return self.S.shape[1]

    @property
    def q(self) -> int:
        return self.X.shape[1]

    @property
    def S_flat(self) -> np.ndarray:
        return self.S.reshape(self.m, self.p * self.p)


def block_arrays(ds) -> BlockArrays:
    """Build the numeric view of a centered dataset."""
    if not ds.centered:
        raise ValueError("dataset must be centered before covariance computation")
    m = ds.n_blocks
    p = ds.p
    S = np.empty((m, p, p))
    T = np.empty(m)
    X = np.empty((m, ds.q))
    subj = np.empty(m, dtype=np.int64)
    index = {sid: i for i, sid in enumerate(ds.subjects)}
    for k, b in enumerate(ds.blocks):
        Y = b.observations
        S[k] = Y.T @ Y / Y.shape[0]
        T[k] = Y.shape[0]
        X[k] = b.covariates
        subj[k] = index[b.subject_id]
    V = np.bincount(subj, minlength=ds.n)
    starts = np.concatenate(([0], np.cumsum(V)[:-1]))
    Sbar = np.tensordot(T, S, axes=1) / T.sum()
    w_pool = 1.0 / (ds.n * V[subj])
    return BlockArrays(S=S, T=T, X=X, subj=subj, starts=starts, V=V,
                       Sbar=Sbar, w_pool=w_pool)


def projected_variances(S_flat: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """gamma' S gamma for every block, via one pass over the stack."""
    return S_flat @ np.outer(gamma, gamma).ravel()


def linear_predictor(X: np.ndarray, subj: np.ndarray, beta0i: np.ndarray,
                     beta1: np.ndarray) -> np.ndarray:
    """eta_iv = beta0i + x_iv' beta1, clipped against exp overflow."""
    eta = beta0i[subj] + X @ beta1
    amax = np.abs(eta).max() if eta.size else 0.0
    if amax > EXP_GUARD:
        warnings.warn(
            f"log-variance predictor magnitude {amax:.3g} exceeds {EXP_GUARD:g}; "
            "clipping to keep exp() finite",
            RuntimeWarning,
            stacklevel=2,
        )
        eta = np.clip(eta, -EXP_GUARD, EXP_GUARD)
    return eta


@dataclass(frozen=True)
class ShrinkScalars:
    """Pooled shrinkage quantities and their per-block contributions."""

    mu: float
    delta2: float
    psi2: float
    phi2: float
    rho: float
    per_block: np.ndarray  # (m, 3) columns: delta2_iv, psi2_iv (clamped), phi2_iv


def shrink_scalars(svals: np.ndarray, gamma_sq: float, T: np.ndarray,
                   w_pool: np.ndarray, eta: np.ndarray,
                   sampling: str = "residual") -> ShrinkScalars:
    """Pooled shrinkage weights from projected variances.

    ``svals`` are gamma' S_iv gamma, ``gamma_sq`` is gamma' gamma and ``eta``
    the per-block linear predictor.  The per-block sampling term is clamped
    at the dispersion term so that the pooled identity
    psi2 + phi2 == delta2 holds with all parts nonnegative.  When the
    dispersion is exactly zero the ratio is taken to be zero (no shrinkage).

    ``sampling`` selects the estimate of the per-block sampling term:
    "residual" uses the T-deflated squared model residual (near-zero
    intensity, leaves coefficient fits unattenuated); "moment" uses the
    Gaussian moment 2 s^2 / T of the projected sample variance, giving the
    intensity that actually stabilizes the projection eigenproblem and has
    no dependence on the current fit residuals (no runaway feedback).
    """
    e_pos = np.exp(eta)
    mu = float((w_pool * e_pos).sum() / gamma_sq)
    d_iv = (svals - mu * gamma_sq) ** 2
    if sampling == "residual":
        raw = (svals - e_pos) ** 2 / T
    elif sampling == "moment":
        raw = 2.0 * svals ** 2 / T
    else:
        raise ValueError(f"unknown sampling term estimate {sampling!r}")
    p_iv = np.minimum(raw, d_iv)
    f_iv = d_iv - p_iv
    psi2 = float((w_pool * p_iv).sum())
    phi2 = float((w_pool * f_iv).sum())
    # Defining the pooled dispersion as the sum keeps the decomposition
    # identity bitwise-exact.
    delta2 = psi2 + phi2
    rho = psi2 / delta2 if delta2 > 0.0 else 0.0
    per_block = np.column_stack((d_iv, p_iv, f_iv))
    return ShrinkScalars(mu=mu, delta2=delta2, psi2=psi2, phi2=phi2, rho=rho,
                         per_block=per_block)


def nhl_parts(s_hat: np.ndarray, T: np.ndarray, eta: np.ndarray,
              beta0i: np.ndarray, beta0: float, sigma2: float):
    """Conditional and random-effect parts of the objective.

    ``s_hat`` is the projected variance under the covariance estimate in use.
    """
    if sigma2 <= 0.0:
        raise ValueError("sigma2 must be positive")
    cond = float((0.5 * T * (eta + s_hat * np.exp(-eta))).sum())
    n = beta0i.shape[0]
    rand = float(0.5 * n * np.log(sigma2)
                 + ((beta0i - beta0) ** 2).sum() / (2.0 * sigma2))
    return cond, rand


def newton_intercepts(s_hat: np.ndarray, T: np.ndarray, X: np.ndarray,
                      subj: np.ndarray, starts: np.ndarray,
                      beta0i: np.ndarray, beta1: np.ndarray,
                      beta0: float, sigma2: float,
                      max_halvings: int = 30) -> np.ndarray:
    """One damped Newton step per subject on the intercepts.

    Steps are halved (independently per subject) until the subject's partial
    objective does not increase; a subject whose step never stops increasing
    keeps its current value.
    """
    x_effect = X @ beta1
    eta = linear_predictor(X, subj, beta0i, beta1)
    work = s_hat * np.exp(-eta)
    g = np.add.reduceat(0.5 * T * (1.0 - work), starts) + (beta0i - beta0) / sigma2
    h = np.add.reduceat(0.5 * T * work, starts) + 1.0 / sigma2
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(h))):
        bad = int(np.nonzero(~(np.isfinite(g) & np.isfinite(h)))[0][0])
        raise FloatingPointError(
            f"non-finite intercept derivative for subject index {bad}"
        )
    step = -g / h

    def partial(b0i):
        eta_c = np.clip(b0i[subj] + x_effect, -EXP_GUARD, EXP_GUARD)
        per_block = 0.5 * T * (eta_c + s_hat * np.exp(-eta_c))
        return np.add.reduceat(per_block, starts) + (b0i - beta0) ** 2 / (2.0 * sigma2)

    f_old = partial(beta0i)
    scale = np.ones_like(beta0i)
    cand = beta0i + step
    f_new = partial(cand)
    for _ in range(max_halvings):
        worse = f_new > f_old
        if not worse.any():
            break
        scale[worse] *= 0.5
        cand = beta0i + scale * step
        f_new = partial(cand)
    return np.where(f_new <= f_old, cand, beta0i)


def newton_slopes(s_hat: np.ndarray, T: np.ndarray, X: np.ndarray,
                  subj: np.ndarray, beta0i: np.ndarray, beta1: np.ndarray,
                  max_halvings: int = 30,
                  cond_limit: float = 1e12) -> np.ndarray:
    """One damped Newton step on the fixed-effect slopes."""
    eta = linear_predictor(X, subj, beta0i, beta1)
    work = 0.5 * T * s_hat * np.exp(-eta)
    g = X.T @ (0.5 * T - work)
    H = (X * work[:, None]).T @ X
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(H))):
        raise FloatingPointError("non-finite slope derivative")
    if np.linalg.cond(H) > cond_limit:
        H = H + 1e-10 * np.eye(H.shape[0])
    try:
        step = -np.linalg.solve(H, g)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError(
            "singular slope Hessian after regularization"
        ) from None

    def cond_value(b1):
        eta_c = np.clip(beta0i[subj] + X @ b1, -EXP_GUARD, EXP_GUARD)
        return float((0.5 * T * (eta_c + s_hat * np.exp(-eta_c))).sum())

    f_old = cond_value(beta1)
    scale = 1.0
    for _ in range(max_halvings + 1):
        cand = beta1 + scale * step
        if cond_value(cand) <= f_old:
            return cand
        scale *= 0.5
    return beta1


def hyperparams(beta0i: np.ndarray) -> tuple[float, float]:
    """Closed-form mean / population-variance update (exact, no floor)."""
    beta0 = float(beta0i.mean())
    sigma2 = float(((beta0i - beta0) ** 2).mean())
    return beta0, sigma2


def level_step(s_hat: np.ndarray, T: np.ndarray, X: np.ndarray,
               subj: np.ndarray, beta0i: np.ndarray, beta1: np.ndarray,
               beta0: float, max_halvings: int = 30) -> tuple[np.ndarray, float]:
    """One damped Newton step on the common intercept level.

    Shifting every subject intercept (and their mean) together leaves the
    intercept-deviation penalty unchanged, so this direction is governed by
    the conditional part alone.  The per-subject Newton steps are damped by
    1/sigma2 in this direction even though the true objective is not, which
    freezes the level when the intercept variance collapses; this step
    restores descent along it.
    """
    eta = np.clip(beta0i[subj] + X @ beta1, -EXP_GUARD, EXP_GUARD)
    work = s_hat * np.exp(-eta)
    g = float((0.5 * T * (1.0 - work)).sum())
    h = float((0.5 * T * work).sum())
    if h <= 0.0 or not np.isfinite(g):
        return beta0i, beta0
    step = -g / h

    def conditional(shift):
        eta_c = np.clip(eta + shift, -EXP_GUARD, EXP_GUARD)
        return float((0.5 * T * (eta_c + s_hat * np.exp(-eta_c))).sum())

    f_old = conditional(0.0)
    shift = step
    for _ in range(max_halvings + 1):
        if conditional(shift) <= f_old:
            return beta0i + shift, beta0 + shift
        shift *= 0.5
    return beta0i, beta0


@dataclass(frozen=True)
class CoefFit:
    """Coefficient estimates at a frozen projection."""

    beta0i: np.ndarray
    beta1: np.ndarray
    beta0: float
    sigma2: float
    objective: float
    converged: bool
    n_iter: int
    rho: float
    mu: float


def coef_fit(svals: np.ndarray, gamma_sq: float, T: np.ndarray, X: np.ndarray,
             subj: np.ndarray, starts: np.ndarray, w_pool: np.ndarray,
             *, shrink: bool, tol: float, max_iter: int,
             init: tuple[np.ndarray, np.ndarray, float, float] | None = None,
             ) -> CoefFit:
    """Estimate (beta0i, beta1, beta0, sigma2) with the projection frozen.

    Iterates the shrinkage refresh and the coefficient updates until the
    objective change falls below ``tol`` (relative).  ``svals`` are the raw
    sample projected variances; shrinkage is re-estimated each iteration when
    ``shrink`` is set.
    """
    n = starts.shape[0]
    q = X.shape[1]
    if init is None:
        pooled = float((T * svals).sum() / T.sum())
        level = np.log(pooled) if pooled > 0 else 0.0
        beta0i = np.full(n, level)
        beta1 = np.zeros(q)
        beta0 = level
        sigma2 = 0.01
    else:
        beta0i, beta1, beta0, sigma2 = init
        beta0i = beta0i.copy()
        beta1 = beta1.copy()

    prev = None
    obj = np.inf
    rho = 0.0
    mu = float("nan")
    converged = False
    for it in range(1, max_iter + 1):
        if shrink:
            eta = linear_predictor(X, subj, beta0i, beta1)
            sc = shrink_scalars(svals, gamma_sq, T, w_pool, eta)
            rho, mu = sc.rho, sc.mu
            s_hat = rho * mu * gamma_sq + (1.0 - rho) * svals
        else:
            s_hat = svals
        beta0i = newton_intercepts(s_hat, T, X, subj, starts, beta0i, beta1,
                                   beta0, sigma2)
        beta1 = newton_slopes(s_hat, T, X, subj, beta0i, beta1)
        beta0, sigma2 = hyperparams(beta0i)
        sigma2 = max(sigma2, SIGMA2_FLOOR)
        beta0i, beta0 = level_step(s_hat, T, X, subj, beta0i, beta1, beta0)
        eta = linear_predictor(X, subj, beta0i, beta1)
        cond, rand = nhl_parts(s_hat, T, eta, beta0i, beta0, sigma2)
        obj = cond + rand
        if prev is not None and abs(obj - prev) <= tol * (1.0 + abs(prev)):
            converged = True
            break
        prev = obj
    return CoefFit(beta0i=beta0i, beta1=beta1, beta0=beta0, sigma2=sigma2,
                   objective=obj, converged=converged, n_iter=it,
                   rho=rho, mu=mu)
