"""Synthetic data generator, evaluation metrics, the CAP-mix baseline, and
the replication harness.

Data are generated from a common eigenbasis: Sigma_iv = Pi Lambda_iv Pi' with
log-linear eigenvalues log(lambda_iv_j) = b0_j + u_ij + x_iv' b_j.  Two
covariates are drawn per visit (one Bernoulli, one Gaussian) and two
designated dimensions carry nonzero covariate effects.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dataset import LongitudinalDataset, VisitBlock, center_dataset
from .estimation import (ComponentSet, FitConfig, FitResult, SHRINKAGE_ON,
                         fit_components)
from .inference import PERCENTILE, bootstrap_coefficients, confidence_interval

DEFAULT_SIGNAL = {2: (-0.5, 0.5), 4: (0.5, -0.25)}


@dataclass(frozen=True)
class SimConfig:
    """Design of one synthetic scenario.

    ``signal`` maps 1-based eigen-dimension to its (slope on the binary
    covariate, slope on the continuous covariate); all other dimensions have
    zero covariate effect.  The intercept profile decays from ``beta0_high``
    to ``beta0_low`` geometrically after shifting by ``beta0_offset``:
    b0_j = (hi + off) * ((lo + off)/(hi + off))**((j-1)/(p-1)) - off.
    """

    p: int
    n: int
    V: int
    T: int
    signal: dict = field(default_factory=lambda: dict(DEFAULT_SIGNAL))
    beta0_high: float = 3.0
    beta0_low: float = -3.0
    beta0_offset: float = 4.0
    sigma2: float = 0.01
    bernoulli_p: float = 0.5
    normal_sd: float = 0.5
    seed: int = 0
    pi_matrix: np.ndarray | None = None

    @property
    def q(self) -> int:
        return 2


@dataclass(frozen=True)
class SimTruth:
    """Everything the generator drew, for exact evaluation."""

    Pi: np.ndarray             # (p, p) orthonormal
    beta0_profile: np.ndarray  # (p,)
    beta_signal: np.ndarray    # (p, q) covariate slopes per dimension
    sigma2: float
    u: np.ndarray              # (n, p) random intercepts
    x: np.ndarray              # (n, V, q)
    lam: np.ndarray            # (n, V, p) eigenvalues
    subject_ids: tuple[str, ...]

    def true_beta(self, target_dim: int, coefficient: int) -> float:
        return float(self.beta_signal[target_dim - 1, coefficient - 1])


def random_orthonormal(p: int, rng: np.random.Generator) -> np.ndarray:
    """Orthonormal matrix drawn uniformly (QR with sign-fixed diagonal)."""
    Q, R = np.linalg.qr(rng.standard_normal((p, p)))
    return Q * np.where(np.diag(R) < 0.0, -1.0, 1.0)


def intercept_profile(p: int, high: float = 3.0, low: float = -3.0,
                      offset: float = 4.0) -> np.ndarray:
    """Exponentially decaying intercepts from ``high`` down to ``low``."""
    if p == 1:
        return np.array([high])
    hi = high + offset
    lo = low + offset
    if hi <= 0 or lo <= 0:
        raise ValueError("beta0_offset must exceed -min(beta0_low, beta0_high)")
    frac = np.arange(p) / (p - 1)
    return hi * (lo / hi) ** frac - offset


def generate_dataset(cfg: SimConfig, seed=None) -> tuple[LongitudinalDataset, SimTruth]:
    """Draw one longitudinal dataset plus the full generating truth.

    Draw order (fixed for reproducibility): basis, random intercepts, binary
    covariates, continuous covariates, then per-block observation matrices in
    (subject, visit) order.
    """
    if isinstance(seed, np.random.Generator):
        rng = seed
    else:
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
    p, n, V, T = cfg.p, cfg.n, cfg.V, cfg.T
    Pi = cfg.pi_matrix if cfg.pi_matrix is not None else random_orthonormal(p, rng)
    beta0 = intercept_profile(p, cfg.beta0_high, cfg.beta0_low, cfg.beta0_offset)
    B = np.zeros((p, cfg.q))
    for dim, slopes in cfg.signal.items():
        if not 1 <= dim <= p:
            raise ValueError(f"signal dimension {dim} outside 1..{p}")
        B[dim - 1] = slopes
    u = rng.normal(0.0, np.sqrt(cfg.sigma2), size=(n, p)) if cfg.sigma2 > 0 \
        else np.zeros((n, p))
    x_bin = rng.binomial(1, cfg.bernoulli_p, size=(n, V)).astype(np.float64)
    x_cont = rng.normal(0.0, cfg.normal_sd, size=(n, V))
    x = np.stack((x_bin, x_cont), axis=-1)
    lam = np.exp(beta0[None, None, :] + u[:, None, :] + x @ B.T)

    subject_ids = tuple(f"s{i + 1:04d}" for i in range(n))
    blocks = []
    for i in range(n):
        for v in range(V):
            Zt = rng.standard_normal((T, p))
            Y = (Zt * np.sqrt(lam[i, v])) @ Pi.T
            blocks.append(VisitBlock(subject_id=subject_ids[i], visit_index=v + 1,
                                     observations=Y, covariates=x[i, v].copy()))
    ds = LongitudinalDataset.from_blocks(blocks)
    truth = SimTruth(Pi=Pi, beta0_profile=beta0, beta_signal=B, sigma2=cfg.sigma2,
                     u=u, x=x, lam=lam, subject_ids=subject_ids)
    return ds, truth


def similarity(gamma: np.ndarray, pi: np.ndarray) -> float:
    """|cosine| between a fitted projection and a true direction."""
    denom = np.linalg.norm(gamma) * np.linalg.norm(pi)
    return float(abs(gamma @ pi) / denom)


def match_component(gammas: np.ndarray, Pi: np.ndarray, target_dim: int) -> int:
    """Column of ``gammas`` most aligned with the target eigen-direction."""
    pi = Pi[:, target_dim - 1]
    sims = [similarity(gammas[:, c], pi) for c in range(gammas.shape[1])]
    return int(np.argmax(sims))


@dataclass(frozen=True)
class MetricsReport:
    """Aggregated replicate metrics for one scenario cell."""

    keys: dict
    n_replicates: int
    failures: int
    bias: float
    mse: float
    mae: float
    coverage: float | None
    similarity_mean: float
    similarity_se: float
    sigma2_abs_err: float | None
    eigen_mse: float | None

    def rows(self):
        """Long-format (metric, value, stderr) rows for the report CSV."""
        out = [("bias", self.bias, None), ("mse", self.mse, None),
               ("mae", self.mae, None),
               ("similarity", self.similarity_mean, self.similarity_se)]
        if self.coverage is not None:
            out.append(("coverage", self.coverage, None))
        if self.sigma2_abs_err is not None:
            out.append(("sigma2_abs_err", self.sigma2_abs_err, None))
        if self.eigen_mse is not None:
            out.append(("eigen_mse", self.eigen_mse, None))
        out.append(("failures", float(self.failures), None))
        return out


def _matched_record(components, truth: SimTruth, target_dim: int,
                    coefficient: int):
    """Reduce a fitted component set to the target-dimension summary."""
    if isinstance(components, ComponentSet):
        fits = components.components
    elif isinstance(components, FitResult):
        fits = (components,)
    else:
        fits = tuple(components)
    G = np.column_stack([f.params.gamma for f in fits])
    c = match_component(G, truth.Pi, target_dim)
    fit = fits[c]
    gamma = fit.params.gamma
    sim = similarity(gamma, truth.Pi[:, target_dim - 1])
    beta_hat = float(fit.params.beta1[coefficient - 1])
    # Fitted variances live on the gamma' Sigma gamma scale; dividing by
    # |gamma|^2 puts them on the eigenvalue scale of the unit-norm direction.
    eta = fit.params.beta0i[:, None] + truth.x @ fit.params.beta1
    lam_hat = np.exp(eta) / float(gamma @ gamma)
    eigen_mse = float(((lam_hat - truth.lam[:, :, target_dim - 1]) ** 2).mean())
    return {
        "component": c,
        "gamma": gamma,
        "similarity": sim,
        "beta_hat": beta_hat,
        "sigma2_hat": float(fit.params.sigma2),
        "eigen_mse": eigen_mse,
    }


def evaluate_fit(results, truths, target_dim: int = 4, coefficient: int = 2,
                 cis=None, keys: dict | None = None,
                 failures: int = 0) -> MetricsReport:
    """Aggregate replicate fits against their generating truths.

    ``results`` and ``truths`` are parallel sequences (one entry per
    replicate); ``cis`` optionally gives a (lower, upper) interval per
    replicate for the target coefficient, from which coverage is computed.
    """
    truths = list(truths)
    results = list(results)
    if len(results) != len(truths):
        raise ValueError("results and truths must pair one-to-one")
    records = [_matched_record(res, tr, target_dim, coefficient)
               for res, tr in zip(results, truths)]
    beta_true = np.array([tr.true_beta(target_dim, coefficient) for tr in truths])
    beta_hat = np.array([r["beta_hat"] for r in records])
    err = beta_hat - beta_true
    sims = np.array([r["similarity"] for r in records])
    sigma_err = np.array([abs(r["sigma2_hat"] - tr.sigma2)
                          for r, tr in zip(records, truths)])
    eig = np.array([r["eigen_mse"] for r in records])
    coverage = None
    if cis is not None:
        hits = [float(lo <= bt <= hi)
                for (lo, hi), bt in zip(cis, beta_true)]
        coverage = float(np.mean(hits))
    r = len(records)
    return MetricsReport(
        keys=dict(keys or {}),
        n_replicates=r,
        failures=failures,
        bias=float(err.mean()),
        mse=float((err ** 2).mean()),
        mae=float(np.abs(err).mean()),
        coverage=coverage,
        similarity_mean=float(sims.mean()),
        similarity_se=float(sims.std(ddof=1) / np.sqrt(r)) if r > 1 else 0.0,
        sigma2_abs_err=float(sigma_err.mean()),
        eigen_mse=float(eig.mean()),
    )


@dataclass(frozen=True)
class CapMixComponent:
    gamma: np.ndarray
    beta: np.ndarray           # (1 + q,) intercept then slopes
    ci: np.ndarray             # (1 + q, 2) Wald intervals
    subject_var: float
    resid_var: float
    converged: bool
    shrink_rho: float
    shrink_mu: float


@dataclass(frozen=True)
class CapMixResult:
    components: tuple[CapMixComponent, ...]
    level: float


def cap_mix_baseline(ds: LongitudinalDataset, config: FitConfig,
                     level: float = 0.95) -> CapMixResult:
    """Cross-sectional-then-mixed-model baseline.

    Fits the projection (and shrinkage) on the first-visit data only, scores
    every block by the log projected shrunk variance, and fits the scores
    with a random-intercept linear mixed model (REML) for coefficient
    estimates and Wald intervals.
    """
    import statsmodels.api as sm
    from statsmodels.tools.sm_exceptions import ConvergenceWarning

    first = {}
    for b in ds.blocks:
        if b.visit_index == 1:
            first[b.subject_id] = b
    missing = [s for s in ds.subjects if s not in first]
    if missing:
        raise ValueError(f"subject {missing[0]!r} has no visit 1")
    ds_v1 = LongitudinalDataset.from_blocks([first[s] for s in ds.subjects])

    comps = fit_components(ds_v1, config)

    m = ds.n_blocks
    X = np.stack([b.covariates for b in ds.blocks])
    T = np.array([float(b.n_obs) for b in ds.blocks])
    svals_all = np.empty(m)
    groups = np.array([b.subject_id for b in ds.blocks])
    exog = np.column_stack((np.ones(m), X))

    out = []
    for fit in comps.components:
        gamma = fit.params.gamma
        for k, b in enumerate(ds.blocks):
            Y = b.observations
            v = Y @ gamma
            svals_all[k] = v @ v / Y.shape[0]
        rho, mu = fit.shrink_rho, fit.shrink_mu
        if config.shrinkage == SHRINKAGE_ON and rho > 0:
            shrunk = rho * mu * float(gamma @ gamma) + (1.0 - rho) * svals_all
        else:
            shrunk = svals_all
        scores = np.log(shrunk)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            warnings.simplefilter("ignore", RuntimeWarning)
            warnings.simplefilter("ignore", UserWarning)
            model = sm.MixedLM(scores, exog, groups=groups)
            res = model.fit(reml=True)
        k_fe = exog.shape[1]
        beta = np.asarray(res.fe_params)
        ci = np.asarray(res.conf_int(alpha=1.0 - level))[:k_fe]
        out.append(CapMixComponent(
            gamma=gamma,
            beta=beta,
            ci=ci,
            subject_var=float(np.asarray(res.cov_re).ravel()[0]),
            resid_var=float(res.scale),
            converged=bool(res.converged),
            shrink_rho=rho,
            shrink_mu=mu,
        ))
    return CapMixResult(components=tuple(out), level=level)


def _run_replicate(cell: dict, fit_cfg: FitConfig, sim_overrides: dict,
                   seed: int, cell_idx: int, rep: int, coverage: bool,
                   bootstrap_B: int, ci_level: float, ci_method: str,
                   target_dim: int, coefficient: int):
    """One (cell, replicate) evaluation. Returns a flat record dict."""
    cfg = SimConfig(p=cell["p"], n=cell["n"], V=cell["V"], T=cell["T"],
                    **sim_overrides)
    rng = np.random.default_rng([seed, cell_idx, rep])
    ds, truth = generate_dataset(cfg, rng)
    dsc = center_dataset(ds)
    del ds
    method = cell.get("method", "lcap")
    if method == "lcap":
        comps = fit_components(dsc, fit_cfg)
        rec = _matched_record(comps, truth, target_dim, coefficient)
        ci = None
        if coverage:
            boot_seed = int(np.random.SeedSequence((seed, cell_idx, rep, 1))
                            .generate_state(1)[0])
            boot = bootstrap_coefficients(dsc, rec["gamma"], bootstrap_B,
                                          fit_cfg, boot_seed)
            interval = confidence_interval(boot, coefficient, ci_level, ci_method)
            ci = (interval.lower, interval.upper)
    elif method == "capmix":
        res = cap_mix_baseline(dsc, fit_cfg, level=ci_level)
        G = np.column_stack([c.gamma for c in res.components])
        c_idx = match_component(G, truth.Pi, target_dim)
        comp = res.components[c_idx]
        gamma = comp.gamma
        eta = comp.beta[0] + truth.x @ comp.beta[1:]
        lam_hat = np.exp(eta) / float(gamma @ gamma)
        rec = {
            "component": c_idx,
            "gamma": gamma,
            "similarity": similarity(gamma, truth.Pi[:, target_dim - 1]),
            "beta_hat": float(comp.beta[coefficient]),
            "sigma2_hat": comp.subject_var,
            "eigen_mse": float(
                ((lam_hat - truth.lam[:, :, target_dim - 1]) ** 2).mean()),
        }
        ci = (float(comp.ci[coefficient, 0]), float(comp.ci[coefficient, 1])) \
            if coverage else None
    else:
        raise ValueError(f"unknown method {method!r}")
    rec["beta_true"] = truth.true_beta(target_dim, coefficient)
    rec["sigma2_true"] = truth.sigma2
    rec["ci"] = ci
    rec.pop("gamma")
    return rec


def _experiment_job(args):
    """One (cell, replicate) unit of work; module-level so it pickles."""
    (cell, fit_cfg, sim_overrides, seed, ci_idx, rep, coverage, bootstrap_B,
     ci_level, ci_method, target_dim, coefficient) = args
    try:
        rec = _run_replicate(cell, fit_cfg, sim_overrides, seed, ci_idx, rep,
                             coverage, bootstrap_B, ci_level, ci_method,
                             target_dim, coefficient)
        return ci_idx, rep, rec, None
    except Exception as exc:  # noqa: BLE001 - per-cell failures recorded
        return ci_idx, rep, None, f"{type(exc).__name__}: {exc}"


def run_experiment(cells, replications: int, seed: int, *,
                   fit_config: FitConfig | None = None,
                   sim_overrides: dict | None = None,
                   coverage: bool = False, bootstrap_B: int = 500,
                   ci_level: float = 0.95, ci_method: str = PERCENTILE,
                   target_dim: int = 4, coefficient: int = 2,
                   threads: int = 1, out_dir=None,
                   progress=None) -> list[MetricsReport]:
    """Run every grid cell for the requested number of replications.

    Per-replicate RNG streams derive from (seed, cell index, replicate), so
    the report is reproducible for a fixed grid and seed regardless of
    execution order or worker count.  Per-replicate failures are recorded,
    not fatal.
    """
    cells = list(cells)
    fit_cfg = fit_config if fit_config is not None else FitConfig()
    sim_overrides = dict(sim_overrides or {})
    jobs = [(cells[ci], fit_cfg, sim_overrides, seed, ci, r, coverage,
             bootstrap_B, ci_level, ci_method, target_dim, coefficient)
            for ci in range(len(cells)) for r in range(replications)]

    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(_experiment_job, jobs))
    else:
        outcomes = []
        for job in jobs:
            outcomes.append(_experiment_job(job))
            if progress is not None:
                progress((job[4], job[5]), outcomes[-1])

    reports = []
    for ci_idx, cell in enumerate(cells):
        recs = [(rep, rec) for c, rep, rec, err in outcomes
                if c == ci_idx and rec is not None]
        errors = [err for c, _, rec, err in outcomes
                  if c == ci_idx and rec is None]
        recs.sort(key=lambda t: t[0])
        rows = [rec for _, rec in recs]
        if not rows:
            reports.append(MetricsReport(
                keys=dict(cell), n_replicates=0, failures=len(errors),
                bias=float("nan"), mse=float("nan"), mae=float("nan"),
                coverage=None,
                similarity_mean=float("nan"), similarity_se=float("nan"),
                sigma2_abs_err=None, eigen_mse=None))
            continue
        err_arr = np.array([r["beta_hat"] - r["beta_true"] for r in rows])
        sims = np.array([r["similarity"] for r in rows])
        sig = np.array([abs(r["sigma2_hat"] - r["sigma2_true"]) for r in rows])
        eig = np.array([r["eigen_mse"] for r in rows])
        cov = None
        if coverage:
            hits = [r["ci"] is not None and r["ci"][0] <= r["beta_true"] <= r["ci"][1]
                    for r in rows]
            cov = float(np.mean(hits))
        reports.append(MetricsReport(
            keys=dict(cell),
            n_replicates=len(rows),
            failures=len(errors),
            bias=float(err_arr.mean()),
            mse=float((err_arr ** 2).mean()),
            mae=float(np.abs(err_arr).mean()),
            coverage=cov,
            similarity_mean=float(sims.mean()),
            similarity_se=float(sims.std(ddof=1) / np.sqrt(len(sims)))
            if len(sims) > 1 else 0.0,
            sigma2_abs_err=float(sig.mean()),
            eigen_mse=float(eig.mean()),
        ))
    if out_dir is not None:
        write_report(reports, out_dir)
    return reports


def write_report(reports, out_dir) -> None:
    """Emit the long-format CSV and a JSON summary of a report list."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "report.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n", "V", "T", "p", "method", "metric", "value", "stderr"])
        for rep in reports:
            k = rep.keys
            for metric, value, stderr in rep.rows():
                writer.writerow([
                    k.get("n"), k.get("V"), k.get("T"), k.get("p"),
                    k.get("method", "lcap"), metric,
                    f"{value:.17g}",
                    "" if stderr is None else f"{stderr:.17g}",
                ])
    summary = []
    for rep in reports:
        entry = dict(rep.keys)
        entry.update(
            n_replicates=rep.n_replicates, failures=rep.failures, bias=rep.bias,
            mse=rep.mse, mae=rep.mae, coverage=rep.coverage,
            similarity=rep.similarity_mean, similarity_se=rep.similarity_se,
            sigma2_abs_err=rep.sigma2_abs_err, eigen_mse=rep.eigen_mse,
        )
        summary.append(entry)
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
