"""Command-line front end: fit, bootstrap, simulate, bench.

Every command writes a manifest.json describing the resolved configuration,
input digests, and timings next to its outputs.  Identical inputs and seed
produce byte-identical outputs (timings and timestamps live in dedicated
manifest fields).  Exit codes: 0 success, 1 invalid input or configuration,
2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .dataset import (DataFormatError, center_dataset, load_dataset,
                      save_dataset, validate_dataset)
from .estimation import (SHRINKAGE_ON, SHRINKAGE_SAMPLE_ONLY, FitConfig,
                         fit_components)
from .inference import bootstrap_coefficients, confidence_interval
from .simulation import SimConfig, generate_dataset, run_experiment


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: str, command: str, config: dict, seed,
                    inputs: list[str], t0: float) -> None:
    """Registry of the run: resolved config, input and output digests.

    Written last, so it covers every file the command produced; JSON outputs
    carry a back-reference to it.
    """
    outputs = {
        name: _sha256(os.path.join(out_dir, name))
        for name in sorted(os.listdir(out_dir))
        if name != "manifest.json"
    }
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {path: _sha256(path) for path in inputs},
        "outputs": outputs,
        "version": __version__,
        "timings": {"wall_seconds": time.time() - t0},
        "created_at": datetime.now(timezone.utc).isoformat(),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _resolve_seed(args) -> int:
    env = os.environ.get("LCAP_SEED")
    if env is not None:
        return int(env)
    return args.seed


def _load_centered(args):
    ds = load_dataset(args.data, args.covariates)
    report = validate_dataset(ds)
    if not report.ok:
        lines = [f"{loc}: {msg}" for loc, msg in report.errors]
        raise DataFormatError("dataset validation failed:\n  " + "\n  ".join(lines))
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if not args.no_center:
        ds = center_dataset(ds)
    elif not ds.centered:
        raise DataFormatError(
            "--no-center given but the dataset is not marked centered; "
            "remove the flag or center the data upstream"
        )
    return ds


def _fit_config(args, seed: int) -> FitConfig:
    return FitConfig(
        max_outer_iters=args.max_iters,
        tol=args.tol,
        n_starts=args.starts,
        seed=seed,
        shrinkage=SHRINKAGE_SAMPLE_ONLY if args.no_shrinkage else SHRINKAGE_ON,
        dfd_threshold=args.dfd_threshold,
        max_components=args.components,
    )


def cmd_fit(args) -> int:
    t0 = time.time()
    seed = _resolve_seed(args)
    ds = _load_centered(args)
    config = _fit_config(args, seed)
    comps = fit_components(ds, config)

    os.makedirs(args.out, exist_ok=True)
    G = comps.gamma_matrix
    with open(os.path.join(args.out, "components.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"component_{k + 1}" for k in range(G.shape[1])])
        for row in G:
            writer.writerow([f"{v:.17g}" for v in row])
    with open(os.path.join(args.out, "dfd.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["component", "dfd", "selected"])
        for k, value in enumerate(comps.dfd_values, start=1):
            writer.writerow([k, f"{value:.17g}", int(k <= comps.k_selected)])
    payload = {
        "manifest": "manifest.json",
        "k_selected": comps.k_selected,
        "dfd_threshold": config.dfd_threshold,
        "components": [
            {
                "component": k + 1,
                "beta0": fit.params.beta0,
                "beta1": [float(v) for v in fit.params.beta1],
                "sigma2": fit.params.sigma2,
                "objective": fit.objective,
                "converged": fit.converged,
                "start_index": fit.start_index,
                "n_iter": fit.n_iter,
                "shrink_rho": fit.shrink_rho,
                "shrink_mu": fit.shrink_mu,
            }
            for k, fit in enumerate(comps.components)
        ],
    }
    with open(os.path.join(args.out, "coefficients.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(args.out, "fit", _config_dict(config), seed,
                    [args.data, args.covariates], t0)
    return 0


def _read_gamma(path: str, component: int) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader if row]
    if component < 1 or component > len(header):
        raise DataFormatError(
            f"{path}: component {component} not present (file has {len(header)})"
        )
    return np.array([float(row[component - 1]) for row in rows])


def cmd_bootstrap(args) -> int:
    t0 = time.time()
    seed = _resolve_seed(args)
    ds = _load_centered(args)
    gamma = _read_gamma(args.gamma, args.component)
    if gamma.shape[0] != ds.p:
        raise DataFormatError(
            f"{args.gamma}: projection length {gamma.shape[0]} does not match "
            f"data dimension {ds.p}"
        )
    config = FitConfig(
        max_outer_iters=args.max_iters,
        tol=args.tol,
        seed=seed,
        shrinkage=SHRINKAGE_SAMPLE_ONLY if args.no_shrinkage else SHRINKAGE_ON,
    )
    dist = bootstrap_coefficients(ds, gamma, args.B, config, seed)

    os.makedirs(args.out, exist_ok=True)
    q = ds.q
    with open(os.path.join(args.out, "replicates.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["beta0"] + [f"beta1_{j + 1}" for j in range(q)])
        for row in dist.replicates:
            writer.writerow([f"{v:.17g}" for v in row])
    intervals = {}
    names = ["beta0"] + [f"beta1_{j + 1}" for j in range(q)]
    for idx, name in enumerate(names):
        ci = confidence_interval(dist, idx, args.level, args.method)
        intervals[name] = {
            "estimate": float(dist.point_estimate[idx]),
            "lower": ci.lower,
            "upper": ci.upper,
            "method": ci.method,
            "level": ci.level,
        }
    payload = {
        "manifest": "manifest.json",
        "B": dist.B,
        "failures": dist.failures,
        "intervals": intervals,
    }
    with open(os.path.join(args.out, "intervals.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(args.out, "bootstrap",
                    {"B": args.B, "level": args.level, "method": args.method,
                     "component": args.component, "tol": args.tol,
                     "max_iters": args.max_iters,
                     "no_shrinkage": args.no_shrinkage},
                    seed, [args.data, args.covariates, args.gamma], t0)
    return 0


def _sim_config(raw: dict, seed: int) -> SimConfig:
    required = ["p", "n", "V", "T"]
    for key in required:
        if key not in raw:
            raise DataFormatError(f"simulation config: missing field {key!r}")
        if not isinstance(raw[key], int) or raw[key] < 1:
            raise DataFormatError(
                f"simulation config: field {key!r} must be a positive integer"
            )
    known = {"p", "n", "V", "T", "seed", "signal", "sigma2", "beta0_high",
             "beta0_low", "beta0_offset", "bernoulli_p", "normal_sd"}
    for key in raw:
        if key not in known:
            raise DataFormatError(f"simulation config: unknown field {key!r}")
    signal = {int(k): tuple(v) for k, v in raw.get("signal", {}).items()} \
        if "signal" in raw else None
    kwargs = dict(p=raw["p"], n=raw["n"], V=raw["V"], T=raw["T"],
                  seed=raw.get("seed", seed))
    if signal is not None:
        kwargs["signal"] = signal
    for key in ("sigma2", "beta0_high", "beta0_low", "beta0_offset",
                "bernoulli_p", "normal_sd"):
        if key in raw:
            kwargs[key] = float(raw[key])
    return SimConfig(**kwargs)


def cmd_simulate(args) -> int:
    t0 = time.time()
    seed = _resolve_seed(args)
    with open(args.config) as fh:
        raw = json.load(fh)
    cfg = _sim_config(raw, seed)
    ds, truth = generate_dataset(cfg)
    os.makedirs(args.out, exist_ok=True)
    data_path = os.path.join(args.out, "data.csv")
    cov_path = os.path.join(args.out, "covariates.csv")
    save_dataset(ds, data_path, cov_path)
    with open(os.path.join(args.out, "truth.json"), "w") as fh:
        json.dump({
            "manifest": "manifest.json",
            "beta0_profile": [float(v) for v in truth.beta0_profile],
            "beta_signal": [[float(v) for v in row] for row in truth.beta_signal],
            "sigma2": truth.sigma2,
            "pi": [[float(v) for v in row] for row in truth.Pi],
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(args.out, "simulate", raw, cfg.seed, [args.config], t0)
    return 0


def cmd_bench(args) -> int:
    t0 = time.time()
    seed = _resolve_seed(args)
    with open(args.config) as fh:
        raw = json.load(fh)
    if "grid" not in raw or not raw["grid"]:
        raise DataFormatError("bench config: field 'grid' must be a nonempty list")
    for i, cell in enumerate(raw["grid"]):
        for key in ("p", "n", "V", "T"):
            if key not in cell:
                raise DataFormatError(f"bench config: grid[{i}] missing {key!r}")
    fit_kwargs = dict(raw.get("fit", {}))
    fit_kwargs.setdefault("seed", raw.get("seed", seed))
    config = FitConfig(**fit_kwargs)
    reports = run_experiment(
        raw["grid"],
        replications=int(raw.get("replications", 1)),
        seed=int(raw.get("seed", seed)),
        fit_config=config,
        sim_overrides=raw.get("sim", {}),
        coverage=bool(raw.get("coverage", False)),
        bootstrap_B=int(raw.get("bootstrap_B", 500)),
        ci_level=float(raw.get("ci_level", 0.95)),
        ci_method=raw.get("ci_method", "percentile"),
        target_dim=int(raw.get("target_dim", 4)),
        coefficient=int(raw.get("coefficient", 2)),
        threads=args.threads,
        out_dir=args.out,
    )
    _write_manifest(args.out, "bench", raw, raw.get("seed", seed),
                    [args.config], t0)
    print(f"wrote {len(reports)} cell report(s) to {args.out}")
    return 0


def _config_dict(config: FitConfig) -> dict:
    return {
        "max_outer_iters": config.max_outer_iters,
        "tol": config.tol,
        "n_starts": config.n_starts,
        "newton_max_steps": config.newton_max_steps,
        "seed": config.seed,
        "shrinkage": config.shrinkage,
        "dfd_threshold": config.dfd_threshold,
        "max_components": config.max_components,
    }


def _add_data_args(parser):
    parser.add_argument("--data", required=True, help="observations CSV")
    parser.add_argument("--covariates", required=True, help="covariates CSV")
    parser.add_argument("--no-center", action="store_true",
                        help="skip per-block centering")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lcap",
        description="Longitudinal covariate-assisted projection regression "
                    "for covariance matrix outcomes",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit projection components")
    _add_data_args(p_fit)
    p_fit.add_argument("--components", type=int, default=None,
                       help="maximum number of components")
    p_fit.add_argument("--dfd-threshold", type=float, default=2.0)
    p_fit.add_argument("--no-shrinkage", action="store_true",
                       help="use raw sample covariances")
    p_fit.add_argument("--starts", type=int, default=10)
    p_fit.add_argument("--tol", type=float, default=1e-8)
    p_fit.add_argument("--max-iters", type=int, default=500)
    p_fit.add_argument("--seed", type=int, default=0)
    p_fit.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p_fit.add_argument("--out", required=True)
    p_fit.set_defaults(func=cmd_fit)

    p_boot = sub.add_parser("bootstrap", help="subject bootstrap at a frozen "
                                              "projection")
    _add_data_args(p_boot)
    p_boot.add_argument("--gamma", required=True,
                        help="components.csv from a fit run")
    p_boot.add_argument("--component", type=int, default=1,
                        help="which column of the gamma file to freeze")
    p_boot.add_argument("-B", type=int, default=500)
    p_boot.add_argument("--level", type=float, default=0.95)
    p_boot.add_argument("--method", choices=["percentile", "bc"],
                        default="percentile")
    p_boot.add_argument("--no-shrinkage", action="store_true")
    p_boot.add_argument("--tol", type=float, default=1e-8)
    p_boot.add_argument("--max-iters", type=int, default=500)
    p_boot.add_argument("--seed", type=int, default=0)
    p_boot.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p_boot.add_argument("--out", required=True)
    p_boot.set_defaults(func=cmd_bootstrap)

    p_sim = sub.add_parser("simulate", help="generate a synthetic dataset")
    p_sim.add_argument("--config", required=True, help="JSON scenario file")
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--out", required=True)
    p_sim.set_defaults(func=cmd_simulate)

    p_bench = sub.add_parser("bench", help="run a replication experiment grid")
    p_bench.add_argument("--config", required=True, help="JSON grid file")
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p_bench.add_argument("--out", required=True)
    p_bench.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataFormatError, FileNotFoundError, ValueError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (np.linalg.LinAlgError, FloatingPointError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
