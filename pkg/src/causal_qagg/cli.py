"""Command-line front end.

Exit codes:
    0  success
    1  unexpected internal error
    2  invalid config, input schema or fit file
    3  more than 20% of benchmark replications failed
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .metalearners import model_matrix
from .pipeline import fit_ensembles, fit_stage
from .qagg import QaggConfig, empirical_variance, kkt_residual, q_objective
from .simlab.benchmark import replication_seeds, run_benchmark
from .tabular import make_split, read_csv
from .validation import SchemaError

__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_ERROR", "EXIT_INVALID", "EXIT_REPLICATIONS"]

EXIT_OK, EXIT_ERROR, EXIT_INVALID, EXIT_REPLICATIONS = 0, 1, 2, 3

log = logging.getLogger("causal_qagg")


class InputError(ValueError):
    """Bad user input detected by the CLI itself (maps to exit code 2)."""


def _f(v) -> str:
    return format(float(v), ".17g")


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _jobs(arg) -> int:
    if arg is not None:
        n = arg
    elif os.environ.get("CAUSAL_QAGG_JOBS"):
        try:
            n = int(os.environ["CAUSAL_QAGG_JOBS"])
        except ValueError:
            raise InputError("CAUSAL_QAGG_JOBS must be an integer") from None
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise InputError("--jobs must be >= 1")
    return n


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.out or "causal_qagg_out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve_config(args, mode: str) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    kw = {"mode": mode, "seed": args.seed}
    if getattr(args, "no_split", False):
        kw["no_split"] = True
    if getattr(args, "data", None):
        kw["data"] = str(Path(args.data).resolve())
    try:
        return cfg.override(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


# --- benchmark ---------------------------------------------------------------

def cmd_benchmark(args) -> int:
    cfg = _resolve_config(args, "benchmark")
    out = _out_dir(args, cfg)
    result = run_benchmark(cfg, jobs=_jobs(args.jobs))
    paths = result.write(out)
    seeds = []
    for dgp in cfg.dgps:
        for rep in range(cfg.reps):
            ds, ss = replication_seeds(cfg.seed, dgp, rep)
            seeds.append({"dgp": dgp, "rep": rep, "data_seed": ds, "split_seed": ss})
    manifest = {
        "version": __version__,
        "config": _portable(cfg),
        "config_hash": cfg.config_hash(),
        "seeds": seeds,
        "replications": result.total,
        "failures": len(result.failures),
        "files": sorted(p.name for p in paths.values()),
    }
    _dump(manifest, out / "manifest.json")
    print(paths["table"].read_text(), end="")
    if result.aborted:
        print(f"error: {len(result.failures)}/{result.total} replications failed; see failures.csv",
              file=sys.stderr)
        return EXIT_REPLICATIONS
    return EXIT_OK


def _portable(cfg: RunConfig) -> dict:
    d = cfg.to_dict()
    d.pop("out")
    return d


# --- fit / iv-fit ------------------------------------------------------------

def _load_data(cfg: RunConfig):
    if not cfg.data:
        raise ConfigError("no data CSV given (config key 'data' or --data)")
    try:
        return read_csv(cfg.data)
    except OSError as exc:
        raise InputError(f"cannot read data {cfg.data}: {exc}") from exc


def _prepare(cfg: RunConfig, iv: bool):
    data = _load_data(cfg)
    if iv and data.instrument is None:
        raise SchemaError("iv-fit needs an instrument column 'z'", column="z")
    plan = make_split(data.n, cfg.split, cfg.seed)
    stage = fit_stage(data, plan, cfg, iv=iv)
    return data, plan, stage


def _model_descriptor(m) -> dict:
    try:
        return m.to_dict()
    except ValueError:
        return {"name": m.name, "prior_weight": m.prior_weight, "clip_u": m.clip_u, "estimator": None}


def _run_fit(args, iv: bool) -> int:
    cfg = _resolve_config(args, "iv_fit" if iv else "fit")
    out = _out_dir(args, cfg)
    data, plan, stage = _prepare(cfg, iv)
    fit = fit_ensembles(stage, cfg, methods=(cfg.method,))[cfg.method]
    payload = {
        "version": __version__,
        "config": _portable(cfg),
        "config_hash": cfg.config_hash(),
        "data_hash": _file_hash(cfg.data),
        "split_sizes": list(plan.sizes),
        "labels": stage.labels.kind,
        "models": [_model_descriptor(m) for m in stage.models],
        "fit": fit.to_dict(),
    }
    _dump(payload, out / "fit.json")
    test = plan.test_idx
    fmat = model_matrix(stage.models, data.x[test]) if test.size else np.zeros((0, len(stage.models)))
    pred = fmat @ fit.theta
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "tau_hat"] + [m.name for m in stage.models])
        for i, row, p in zip(test, fmat, pred):
            w.writerow([int(i), _f(p)] + [_f(v) for v in row])
    theta = ", ".join(f"{m.name}={t:.4f}" for m, t in zip(stage.models, fit.theta) if t > 0)
    print(f"{fit.method}: objective {fit.objective:.6g}; weights {theta}")
    return EXIT_OK


def cmd_fit(args) -> int:
    return _run_fit(args, iv=False)


def cmd_iv_fit(args) -> int:
    return _run_fit(args, iv=True)


# --- diagnose ----------------------------------------------------------------

def check_theta(theta) -> np.ndarray:
    """Strict simplex check for a stored weight vector."""
    t = np.asarray(theta, dtype=float).reshape(-1)
    if t.size == 0 or not np.all(np.isfinite(t)):
        raise InputError("theta must be a non-empty vector of finite numbers")
    if np.any(t < 0):
        raise InputError("theta has negative entries; clip them to 0 and renormalize with theta / sum(theta)")
    s = float(t.sum())
    if abs(s - 1.0) > 1e-9:
        raise InputError(f"theta sums to {s:.12g}, not 1; renormalize with theta / {s:.12g}")
    return t


def cmd_diagnose(args) -> int:
    try:
        stored = json.loads(Path(args.fit).read_text())
        fit_d = stored["fit"]
        theta = check_theta(fit_d["theta"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InputError(f"cannot read fit file {args.fit}: {exc}") from exc

    embedded = RunConfig.from_dict(stored["config"])
    cfg = load_config(args.config) if args.config else embedded
    data = str(Path(args.data).resolve()) if args.data else (cfg.data or embedded.data)
    cfg = replace(cfg, mode=embedded.mode, data=data,
                  seed=embedded.seed if args.seed is None else args.seed)
    warnings = []
    if cfg.config_hash() != stored.get("config_hash"):
        warnings.append("config hash differs from the one stored in the fit; the fit may be stale")
    if cfg.data and Path(cfg.data).exists() and _file_hash(cfg.data) != stored.get("data_hash"):
        warnings.append("data hash differs from the one stored in the fit; the fit may be stale")

    iv = embedded.mode == "iv_fit"
    _, _, stage = _prepare(cfg, iv)
    F, y = stage.fmat, stage.labels.values
    if F.shape[1] != theta.size:
        raise InputError(f"theta has {theta.size} entries but the config yields {F.shape[1]} models")
    qcfg = QaggConfig(nu=float(fit_d["nu"]), beta_pen=float(fit_d["beta"]),
                      priors=tuple(fit_d["priors"]) if fit_d.get("priors") else None)
    beta = float(fit_d["beta"])
    losses = np.mean((y[:, None] - F) ** 2, axis=0)
    obj = q_objective(theta, y, F, qcfg, beta)
    report = {
        "method": fit_d["method"],
        "kkt_residual": kkt_residual(theta, y, F, qcfg, beta),
        "model_losses": {m.name: float(v) for m, v in zip(stage.models, losses)},
        "V_n": empirical_variance(theta, F),
        "K": float(theta @ qcfg.prior_costs(theta.size)),
        "objective_stored": float(fit_d["objective"]),
        "objective_recomputed": obj,
        "objective_delta": abs(obj - float(fit_d["objective"])),
        "warnings": warnings,
    }
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "diagnostics.json").write_text(text)
    print(text, end="")
    return EXIT_OK


# --- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="causal-qagg", description=__doc__.split("\n")[0],
                                epilog="Exit codes: 0 ok, 1 internal error, 2 invalid input, "
                                       "3 too many failed replications.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", metavar="PATH", help="JSON or YAML run config")
        sp.add_argument("--out", metavar="DIR", help="output directory (overrides config 'out')")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("-v", "--verbose", action="store_true")

    b = sub.add_parser("benchmark", help="run the synthetic regret benchmark")
    common(b)
    b.add_argument("--jobs", type=int, help="worker processes (default: $CAUSAL_QAGG_JOBS or CPU count)")
    b.add_argument("--no-split", action="store_true", help="fit label nuisances on the ensemble rows")
    b.set_defaults(func=cmd_benchmark)

    for name, func, help_ in (("fit", cmd_fit, "fit an ensemble on a CSV"),
                              ("iv-fit", cmd_iv_fit, "fit an ensemble with IV labels")):
        f = sub.add_parser(name, help=help_)
        common(f)
        f.add_argument("--data", metavar="CSV", help="data CSV (overrides config 'data')")
        f.add_argument("--jobs", type=int, help="accepted for symmetry; fits run in one process")
        f.add_argument("--no-split", action="store_true", help="fit label nuisances on the ensemble rows")
        f.set_defaults(func=func)

    d = sub.add_parser("diagnose", help="check a stored fit against its data")
    common(d)
    d.add_argument("--fit", metavar="JSON", required=True, help="fit.json written by fit or iv-fit")
    d.add_argument("--data", metavar="CSV", help="data CSV (default: the one recorded in the fit)")
    d.add_argument("--jobs", type=int, help=argparse.SUPPRESS)
    d.set_defaults(func=cmd_diagnose, no_split=False)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - top-level guard
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
