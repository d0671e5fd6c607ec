"""Block coordinate descent for the constrained projection model.

Each outer iteration refreshes the pooled shrinkage estimate at the current
parameters, then updates the subject intercepts and fixed effects by damped
Newton steps, the hyperparameters in closed form, and the projection by
solving a generalized eigenproblem on the constraint surface.  Multiple
starts guard against local minima; components beyond the first are extracted
in the orthogonal complement (with respect to the first component's final
normalization matrix) of the previously found projections.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import _core
from .covariance import CovarianceSet, _subject_layout
from .dataset import LongitudinalDataset, validate_dataset
from .likelihood import ModelParams

SHRINKAGE_ON = "shrink"
SHRINKAGE_SAMPLE_ONLY = "sample"

_TIE_TOL = 1e-10


@dataclass(frozen=True)
class FitConfig:
    """Knobs for the block coordinate descent."""

    max_outer_iters: int = 500
    tol: float = 1e-8
    n_starts: int = 10
    newton_max_steps: int = 1
    seed: int = 0
    shrinkage: str = SHRINKAGE_ON
    dfd_threshold: float = 2.0
    max_components: int | None = None

    def __post_init__(self):
        if self.max_outer_iters < 1:
            raise ValueError("max_outer_iters must be >= 1")
        if self.tol <= 0.0:
            raise ValueError("tol must be positive")
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")
        if self.newton_max_steps < 1:
            raise ValueError("newton_max_steps must be >= 1")
        if self.dfd_threshold <= 1.0:
            raise ValueError("dfd_threshold must exceed 1")
        if self.shrinkage not in (SHRINKAGE_ON, SHRINKAGE_SAMPLE_ONLY):
            raise ValueError(f"unknown shrinkage mode {self.shrinkage!r}")


@dataclass(frozen=True)
class FitResult:
    """Converged parameters of one component plus fit diagnostics."""

    params: ModelParams
    objective: float
    objective_trace: np.ndarray
    converged: bool
    start_index: int
    H: np.ndarray
    shrink_rho: float
    shrink_mu: float
    n_iter: int


@dataclass(frozen=True)
class ComponentSet:
    """Sequentially extracted components with their diagonality diagnostics."""

    components: tuple[FitResult, ...]
    dfd_values: np.ndarray
    k_selected: int

    @property
    def gamma_matrix(self) -> np.ndarray:
        return np.column_stack([r.params.gamma for r in self.components])


def _solve_projection(A: np.ndarray, H: np.ndarray,
                      Z: np.ndarray | None = None) -> np.ndarray:
    """Minimize gamma' A gamma subject to gamma' H gamma = 1.

    ``Z`` restricts the search to a linear subspace (columns form an
    orthonormal basis of the feasible directions).  The winner is the
    generalized eigenvector with the smallest eigenvalue, tie-broken
    deterministically and sign-canonicalized so the largest-magnitude entry
    is positive.
    """
    if Z is not None:
        if Z.shape[1] == 0:
            raise ValueError("no feasible directions remain for the projection")
        Ar = Z.T @ A @ Z
        Hr = Z.T @ H @ Z
    else:
        Ar, Hr = A, H
    Ar = 0.5 * (Ar + Ar.T)
    Hr = 0.5 * (Hr + Hr.T)
    try:
        np.linalg.cholesky(Hr)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError(
            "normalization matrix not positive definite"
        ) from None
    eigvals, eigvecs = scipy.linalg.eigh(Ar, Hr)
    n_tied = int(np.sum(eigvals - eigvals[0] <= _TIE_TOL * (1.0 + abs(eigvals[0]))))
    if n_tied > 1:
        warnings.warn(
            f"smallest generalized eigenvalue has multiplicity {n_tied} within "
            f"{_TIE_TOL:g}; applying deterministic tie-break",
            RuntimeWarning,
            stacklevel=2,
        )
        cand = eigvecs[:, :n_tied]
        lifted = Z @ cand if Z is not None else cand
        nonzero = np.abs(lifted) > 1e-12 * max(np.abs(lifted).max(), 1e-300)
        rows = np.nonzero(nonzero.any(axis=1))[0]
        j0 = int(rows[0])
        col = int(np.argmax(np.abs(lifted[j0])))
        u = cand[:, col]
    else:
        u = eigvecs[:, 0]
    gamma = Z @ u if Z is not None else u
    gamma = gamma / np.sqrt(gamma @ H @ gamma)
    top = int(np.argmax(np.abs(gamma)))
    if gamma[top] < 0:
        gamma = -gamma
    return gamma


def _feasible_basis(H: np.ndarray, orth_basis) -> np.ndarray | None:
    """Orthonormal basis of {v : v' H b = 0 for all b in orth_basis}."""
    vectors = list(orth_basis)
    if not vectors:
        return None
    normals = H @ np.column_stack(vectors)
    return scipy.linalg.null_space(normals.T)


def update_gamma(ds: LongitudinalDataset, sigma_star: CovarianceSet,
                 params: ModelParams, H: np.ndarray,
                 orth_basis=()) -> np.ndarray:
    """Projection update: the constrained minimizer of the weighted quadratic
    form built from the current covariance estimates."""
    if not sigma_star.covers(ds):
        raise ValueError("covariance set does not cover the dataset blocks")
    subj, _, _ = _subject_layout(ds)
    X = np.stack([b.covariates for b in ds.blocks])
    eta = _core.linear_predictor(X, subj, np.asarray(params.beta0i),
                                 np.asarray(params.beta1))
    c = 0.5 * sigma_star.weights * np.exp(-eta)
    A = np.tensordot(c, sigma_star.matrices, axes=1)
    Z = _feasible_basis(H, orth_basis)
    return _solve_projection(A, H, Z)


def newton_update_intercepts(ds: LongitudinalDataset, sigma_star: CovarianceSet,
                             params: ModelParams) -> np.ndarray:
    """One damped Newton step on every subject intercept."""
    subj, starts, _ = _subject_layout(ds)
    X = np.stack([b.covariates for b in ds.blocks])
    svals = sigma_star.projected_variances(np.asarray(params.gamma))
    return _core.newton_intercepts(svals, sigma_star.weights, X, subj, starts,
                                   np.asarray(params.beta0i, dtype=np.float64),
                                   np.asarray(params.beta1), params.beta0,
                                   params.sigma2)


def newton_update_fixed_effects(ds: LongitudinalDataset, sigma_star: CovarianceSet,
                                params: ModelParams) -> np.ndarray:
    """One damped Newton step on the fixed-effect slopes."""
    subj, _, _ = _subject_layout(ds)
    X = np.stack([b.covariates for b in ds.blocks])
    svals = sigma_star.projected_variances(np.asarray(params.gamma))
    return _core.newton_slopes(svals, sigma_star.weights, X, subj,
                               np.asarray(params.beta0i),
                               np.asarray(params.beta1, dtype=np.float64))


def _start_vectors(ba: _core.BlockArrays, n_starts: int, rng,
                   Z: np.ndarray | None, norm_matrix: np.ndarray) -> list[np.ndarray]:
    """Initial projections: pooled-covariance eigenvectors in descending
    eigenvalue order first, then random directions, all confined to the
    feasible subspace and normalized against ``norm_matrix``.

    The objective's local minima sit near the common eigen-directions, so
    seeding the leading eigenvectors covers the candidate basins far more
    reliably than random directions alone; one slot is always left for a
    random start when n_starts > 1.
    """
    p = ba.p

    def feasible(v):
        if Z is not None:
            v = Z @ (Z.T @ v)
        norm = np.linalg.norm(v)
        if norm <= 1e-8:
            return None
        v = v / norm
        return v / np.sqrt(v @ norm_matrix @ v)

    starts: list[np.ndarray] = []
    n_eig = n_starts - 1 if n_starts > 1 else 1
    eigvals, eigvecs = np.linalg.eigh(ba.Sbar)
    for j in range(p - 1, -1, -1):  # descending eigenvalue order
        if len(starts) >= n_eig:
            break
        v = feasible(eigvecs[:, j])
        if v is not None:
            starts.append(v)
    while len(starts) < n_starts:
        v = feasible(rng.standard_normal(p))
        if v is not None:
            starts.append(v)
    return starts[:n_starts]


def _fit_from_start(ba: _core.BlockArrays, gamma0: np.ndarray, config: FitConfig,
                    Z: np.ndarray | None, H_fixed: np.ndarray | None,
                    sampling: str = "moment"):
    """Run the outer loop from one initial projection."""
    shrink = config.shrinkage == SHRINKAGE_ON
    S_flat = ba.S_flat
    gamma = gamma0.copy()
    gamma_sq = float(gamma @ gamma)
    svals = _core.projected_variances(S_flat, gamma)

    pooled0 = float((ba.T * svals).sum() / ba.T.sum())
    level = float(np.log(pooled0)) if pooled0 > 0 else 0.0
    beta0i = np.full(ba.n, level)
    beta1 = np.zeros(ba.q)
    beta0 = level
    sigma2 = 0.01

    identity = np.eye(ba.p)
    H = H_fixed if H_fixed is not None else ba.Sbar
    trace: list[float] = []
    prev = None
    converged = False
    rho, mu = 0.0, float("nan")
    for _ in range(config.max_outer_iters):
        if shrink:
            eta = _core.linear_predictor(ba.X, ba.subj, beta0i, beta1)
            sc = _core.shrink_scalars(svals, gamma_sq, ba.T, ba.w_pool, eta,
                                      sampling=sampling)
            rho, mu = sc.rho, sc.mu
            if H_fixed is None:
                # Refresh the constraint surface and put gamma back on it.
                sbar_val = float((ba.T * svals).sum() / ba.T.sum())
                h_val = rho * mu * gamma_sq + (1.0 - rho) * sbar_val
                gamma = gamma / np.sqrt(h_val)
                svals = svals / h_val
                gamma_sq = gamma_sq / h_val
                H = rho * mu * identity + (1.0 - rho) * ba.Sbar
        s_hat = rho * mu * gamma_sq + (1.0 - rho) * svals if shrink else svals

        for _ in range(config.newton_max_steps):
            beta0i = _core.newton_intercepts(s_hat, ba.T, ba.X, ba.subj,
                                             ba.starts, beta0i, beta1,
                                             beta0, sigma2)
        for _ in range(config.newton_max_steps):
            beta1 = _core.newton_slopes(s_hat, ba.T, ba.X, ba.subj,
                                        beta0i, beta1)
        beta0, sigma2 = _core.hyperparams(beta0i)
        sigma2 = max(sigma2, _core.SIGMA2_FLOOR)
        beta0i, beta0 = _core.level_step(s_hat, ba.T, ba.X, ba.subj,
                                         beta0i, beta1, beta0)

        eta = _core.linear_predictor(ba.X, ba.subj, beta0i, beta1)
        c = 0.5 * ba.T * np.exp(-eta)
        M = (c @ S_flat).reshape(ba.p, ba.p)
        M = 0.5 * (M + M.T)
        A = rho * mu * float(c.sum()) * identity + (1.0 - rho) * M if shrink else M
        gamma = _solve_projection(A, H, Z)
        gamma_sq = float(gamma @ gamma)
        svals = _core.projected_variances(S_flat, gamma)
        s_hat = rho * mu * gamma_sq + (1.0 - rho) * svals if shrink else svals

        cond, rand = _core.nhl_parts(s_hat, ba.T, eta, beta0i, beta0, sigma2)
        obj = cond + rand
        trace.append(obj)
        if not np.isfinite(obj):
            raise FloatingPointError("objective became non-finite")
        if prev is not None and abs(obj - prev) <= config.tol * (1.0 + abs(prev)):
            converged = True
            break
        prev = obj

    params = ModelParams(gamma=gamma, beta0=beta0, beta1=beta1,
                         beta0i=beta0i, sigma2=sigma2)
    return params, obj, np.array(trace), converged, H, rho, mu, len(trace)


def _finalize_coefficients(ba: _core.BlockArrays, gamma: np.ndarray,
                           config: FitConfig):
    """Re-estimate the coefficients at the frozen projection.

    The projection search runs on the moment-stabilized covariances, which
    deliberately over-smooth the projected variances; the reported
    coefficients come from a fresh fit at the frozen direction under the
    near-unshrunken residual plug-in, with the projection rescaled onto the
    self-consistent constraint surface.  Returns the rescaled projection,
    the coefficient fit, the final objective value, the final normalization
    matrix, and the final shrinkage weights.
    """
    shrink = config.shrinkage == SHRINKAGE_ON
    gamma = gamma.copy()
    svals = _core.projected_variances(ba.S_flat, gamma)
    gamma_sq = float(gamma @ gamma)
    t_sum = ba.T.sum()
    init = None
    rho, mu = 0.0, float("nan")
    for _ in range(50):
        cf = _core.coef_fit(svals, gamma_sq, ba.T, ba.X, ba.subj, ba.starts,
                            ba.w_pool, shrink=shrink, tol=config.tol,
                            max_iter=config.max_outer_iters, init=init)
        if not shrink:
            break
        eta = _core.linear_predictor(ba.X, ba.subj, cf.beta0i, cf.beta1)
        sc = _core.shrink_scalars(svals, gamma_sq, ba.T, ba.w_pool, eta)
        rho, mu = sc.rho, sc.mu
        sbar_val = float((ba.T * svals).sum() / t_sum)
        h_val = rho * mu * gamma_sq + (1.0 - rho) * sbar_val
        if abs(h_val - 1.0) <= 1e-12:
            break
        gamma /= np.sqrt(h_val)
        svals /= h_val
        gamma_sq /= h_val
        shift = float(np.log(h_val))
        init = (cf.beta0i - shift, cf.beta1, cf.beta0 - shift,
                max(cf.sigma2, _core.SIGMA2_FLOOR))
    if shrink:
        s_hat = rho * mu * gamma_sq + (1.0 - rho) * svals
        H = rho * mu * np.eye(ba.p) + (1.0 - rho) * ba.Sbar
    else:
        s_hat = svals
        H = ba.Sbar
    eta = _core.linear_predictor(ba.X, ba.subj, cf.beta0i, cf.beta1)
    cond, rand = _core.nhl_parts(s_hat, ba.T, eta, cf.beta0i, cf.beta0,
                                 max(cf.sigma2, _core.SIGMA2_FLOOR))
    return gamma, cf, cond + rand, H, rho, mu


def fit_single_component(ds: LongitudinalDataset, config: FitConfig,
                         orth_basis=(), *, h_matrix: np.ndarray | None = None,
                         _arrays: _core.BlockArrays | None = None) -> FitResult:
    """Best-of-``n_starts`` fit of one projection.

    Each start runs the block coordinate descent with the moment-stabilized
    shrinkage intensity (which regularizes the projection eigenproblem), then
    re-estimates the coefficients at the frozen projection under the
    residual plug-in so the reported slopes are not attenuated by the search
    shrinkage.  Starts are compared on the final objective value.

    ``orth_basis`` lists previously extracted projections; the fit is then
    confined to their orthogonal complement with respect to ``h_matrix``.
    """
    orth_basis = list(orth_basis)
    if orth_basis and h_matrix is None:
        raise ValueError("orth_basis requires the h_matrix that defines it")
    if _arrays is None:
        report = validate_dataset(ds)
        if not report.ok:
            loc, msg = report.errors[0]
            raise ValueError(
                f"dataset failed validation ({len(report.errors)} error(s)); "
                f"first: {loc}: {msg}"
            )
        if not ds.centered:
            raise ValueError("dataset must be centered before fitting")
        ba = _core.block_arrays(ds)
    else:
        ba = _arrays

    # The orthogonality constraints are linear and anchored to the caller's
    # h_matrix; the normalization surface itself is refreshed from the current
    # shrinkage every outer iteration (or stays at the pooled sample average
    # in sample-only mode).
    H_fixed = ba.Sbar if config.shrinkage == SHRINKAGE_SAMPLE_ONLY else None
    Z = _feasible_basis(h_matrix, orth_basis) if orth_basis else None
    norm_matrix = h_matrix if h_matrix is not None else ba.Sbar

    rng = np.random.default_rng([config.seed, len(orth_basis)])
    starts = _start_vectors(ba, config.n_starts, rng, Z, norm_matrix)

    best = None
    failures: list[str] = []
    for idx, gamma0 in enumerate(starts):
        try:
            fitted = _fit_from_start(ba, gamma0, config, Z, H_fixed)
            params, obj, trace, converged, H, rho, mu, n_iter = fitted
            gamma, cf, obj_final, H_final, rho_f, mu_f = \
                _finalize_coefficients(ba, params.gamma, config)
        except (FloatingPointError, np.linalg.LinAlgError) as exc:
            failures.append(f"start {idx}: {exc}")
            continue
        params = ModelParams(gamma=gamma, beta0=cf.beta0, beta1=cf.beta1,
                             beta0i=cf.beta0i,
                             sigma2=max(cf.sigma2, _core.SIGMA2_FLOOR))
        result = FitResult(params=params, objective=obj_final,
                           objective_trace=np.append(trace, obj_final),
                           converged=converged and cf.converged,
                           start_index=idx, H=H_final,
                           shrink_rho=rho_f, shrink_mu=mu_f,
                           n_iter=n_iter + cf.n_iter)
        if best is None or (result.objective, result.start_index) < (
                best.objective, best.start_index):
            best = result
    if best is None:
        raise RuntimeError(
            "all starts failed with non-finite objectives: " + "; ".join(failures)
        )
    return best


def dfd(ds: LongitudinalDataset, gamma_matrix: np.ndarray,
        sigma_hat: CovarianceSet) -> float:
    """Average deviation from diagonality of the projected covariances.

    The T-weighted geometric mean over blocks of
    det(diag(G' Sigma G)) / det(G' Sigma G), computed in log space.  Equals 1
    exactly when the columns jointly diagonalize every matrix (and always for
    a single column); greater than 1 otherwise.
    """
    if not sigma_hat.covers(ds):
        raise ValueError("covariance set does not cover the dataset blocks")
    G = np.atleast_2d(np.asarray(gamma_matrix, dtype=np.float64))
    if G.shape[0] == 1:
        G = G.T
    if np.linalg.matrix_rank(G) < G.shape[1]:
        raise ValueError("projection columns are linearly dependent")
    tmp = np.einsum("bij,jk->bik", sigma_hat.matrices, G)
    proj = np.einsum("ji,bjk->bik", G, tmp)
    return _dfd_from_projected(proj, sigma_hat.weights)


def _dfd_from_projected(proj: np.ndarray, T: np.ndarray) -> float:
    signs, logdets = np.linalg.slogdet(proj)
    if np.any(signs <= 0):
        raise np.linalg.LinAlgError("projected covariance matrix is singular")
    diags = np.diagonal(proj, axis1=1, axis2=2)
    if np.any(diags <= 0):
        raise np.linalg.LinAlgError("projected covariance matrix is singular")
    logdiag = np.log(diags).sum(axis=1)
    weights = T / T.sum()
    return float(np.exp((weights * (logdiag - logdets)).sum()))


def _dfd_from_arrays(ba: _core.BlockArrays, G: np.ndarray, rho: float,
                     mu: float) -> float:
    """DfD against the shrunk set implied by (rho, mu), without materializing
    the shrunk stack."""
    tmp = np.einsum("bij,jk->bik", ba.S, G)
    proj = np.einsum("ji,bjk->bik", G, tmp)
    proj = rho * mu * (G.T @ G) + (1.0 - rho) * proj
    return _dfd_from_projected(proj, ba.T)


def fit_components(ds: LongitudinalDataset, config: FitConfig) -> ComponentSet:
    """Extract components sequentially until the diagonality deviation of the
    extended set exceeds the threshold or the component cap is reached.

    The first component's final normalization matrix anchors the
    orthogonality constraints (and normalization) of every later component,
    so the extracted projections are exactly orthonormal in that inner
    product.
    """
    report = validate_dataset(ds)
    if not report.ok:
        loc, msg = report.errors[0]
        raise ValueError(
            f"dataset failed validation ({len(report.errors)} error(s)); "
            f"first: {loc}: {msg}"
        )
    if not ds.centered:
        raise ValueError("dataset must be centered before fitting")
    ba = _core.block_arrays(ds)

    max_k = config.max_components if config.max_components is not None else ba.p
    max_k = min(max_k, ba.p)
    results: list[FitResult] = []
    dfd_values: list[float] = []
    h_anchor: np.ndarray | None = None
    for k in range(1, max_k + 1):
        basis = [r.params.gamma for r in results]
        result = fit_single_component(ds, config, orth_basis=basis,
                                      h_matrix=h_anchor, _arrays=ba)
        if h_anchor is None:
            h_anchor = result.H
        results.append(result)
        G = np.column_stack([r.params.gamma for r in results])
        value = _dfd_from_arrays(ba, G, result.shrink_rho, result.shrink_mu) \
            if config.shrinkage == SHRINKAGE_ON else _dfd_from_arrays(ba, G, 0.0, 0.0)
        dfd_values.append(value)
        if value > config.dfd_threshold:
            break
    admissible = [k for k, v in enumerate(dfd_values, start=1)
                  if v <= config.dfd_threshold]
    k_selected = max(admissible) if admissible else 0
    return ComponentSet(components=tuple(results),
                        dfd_values=np.array(dfd_values),
                        k_selected=k_selected)
