"""Replication engine for the synthetic regret experiments."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


from .. import pipeline
from ..tabular import make_split
from .dgp import DgpSpec, generate_dgp
from .regret import evaluate_regret

__all__ = [
    "BenchmarkResult",
    "run_replication",
    "run_benchmark",
    "replication_seeds",
    "aggregate",
    "format_cell",
    "MAX_FAILURE_RATE",
]

log = logging.getLogger(__name__)

MAX_FAILURE_RATE = 0.2
RAW_COLUMNS = ("dgp", "rep", "method", "rmse", "regret", "normalized_regret", "theta_json")
AGG_COLUMNS = ("dgp", "method", "mean", "std", "median", "p95", "mean_normalized")


def _f(v) -> str:
    return format(float(v), ".17g")


def replication_seeds(seed: int, dgp: int, rep: int) -> tuple:
    """(data seed, split seed) derived from (seed, dgp, rep)."""
    state = np.random.SeedSequence([seed, dgp, rep]).generate_state(2)
    return int(state[0]), int(state[1])


def run_replication(cfg, dgp: int, rep: int) -> list:
    """One split/fit/evaluate cycle; returns rows with raw (unnormalized) regret."""
    data_seed, split_seed = replication_seeds(cfg.seed, dgp, rep)
    sim = generate_dgp(DgpSpec(dgp, cfg.sigma, cfg.dgp4_literal), cfg.n, data_seed)
    plan = make_split(cfg.n, cfg.split, split_seed)
    stage = pipeline.fit_stage(sim.data, plan, cfg)
    fits = pipeline.fit_ensembles(stage, cfg)
    ens_fns = []
    for display, key in pipeline.ENSEMBLE_NAMES.items():
        theta = fits[key].theta
        ens_fns.append((display, lambda x, t=theta: np.column_stack([m.predict(x) for m in stage.models]) @ t))
    report = evaluate_regret(ens_fns, stage.models, sim.tau, sim.data.x[plan.test_idx])
    rows = []
    for name in report.methods:
        theta = ""
        if name in pipeline.ENSEMBLE_NAMES:
            theta = json.dumps([float(v) for v in fits[pipeline.ENSEMBLE_NAMES[name]].theta])
        rows.append({"dgp": dgp, "rep": rep, "method": name, "rmse": report.rmse[name],
                     "regret": report.regret[name], "theta_json": theta})
    return rows


def _task(args):
    cfg, dgp, rep = args
    try:
        return dgp, rep, run_replication(cfg, dgp, rep), None
    except Exception as exc:  # recorded per replication, never fatal on its own
        return dgp, rep, None, f"{type(exc).__name__}: {exc}"


@dataclass
class BenchmarkResult:
    rows: list
    failures: list = field(default_factory=list)
    total: int = 0

    @property
    def failure_rate(self) -> float:
        return len(self.failures) / self.total if self.total else 0.0

    @property
    def aborted(self) -> bool:
        return self.failure_rate > MAX_FAILURE_RATE

    def aggregates(self) -> list:
        return aggregate(self.rows)

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"raw": out / "raw.csv", "aggregate": out / "aggregate.csv",
                 "table": out / "table.txt", "failures": out / "failures.csv"}
        with open(paths["raw"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RAW_COLUMNS)
            for r in self.rows:
                w.writerow([r["dgp"], r["rep"], r["method"], _f(r["rmse"]), _f(r["regret"]),
                            _f(r["normalized_regret"]), r["theta_json"]])
        aggs = self.aggregates()
        with open(paths["aggregate"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(AGG_COLUMNS)
            for a in aggs:
                w.writerow([a["dgp"], a["method"]] + [_f(a[k]) for k in AGG_COLUMNS[2:]])
        paths["table"].write_text(format_table(aggs))
        with open(paths["failures"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["dgp", "rep", "error"])
            for dgp, rep, err in self.failures:
                w.writerow([dgp, rep, err])
        return paths


def _normalize(rows: list) -> None:
    """Divide regrets by the mean regret of all methods and replications within each DGP."""
    for dgp in sorted({r["dgp"] for r in rows}):
        sel = [r for r in rows if r["dgp"] == dgp]
        mean = float(np.mean([r["regret"] for r in sel]))
        for r in sel:
            r["normalized_regret"] = r["regret"] / mean if mean > 0 else float("nan")


def run_benchmark(cfg, jobs: int = 1) -> BenchmarkResult:
    tasks = [(cfg, dgp, rep) for dgp in cfg.dgps for rep in range(cfg.reps)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_task, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        results = [_task(t) for t in tasks]
    results.sort(key=lambda r: (cfg.dgps.index(r[0]), r[1]))
    rows, failures = [], []
    for dgp, rep, rr, err in results:
        if err is not None:
            log.warning("replication dgp=%s rep=%s failed: %s", dgp, rep, err)
            failures.append((dgp, rep, err))
        else:
            rows.extend(rr)
    _normalize(rows)
    return BenchmarkResult(rows, failures, len(tasks))


def aggregate(rows: list) -> list:
    """Per (dgp, method) summaries plus pooled ``ALL`` rows over DGPs."""
    out = []
    dgps = list(dict.fromkeys(r["dgp"] for r in rows))
    methods = list(dict.fromkeys(r["method"] for r in rows))
    for dgp in dgps:
        for m in methods:
            sel = [r for r in rows if r["dgp"] == dgp and r["method"] == m]
            if sel:
                out.append(_summary(dgp, m, sel))
    for m in methods:
        per_dgp = [a for a in out if a["method"] == m]
        sel = [r for r in rows if r["method"] == m]
        s = _summary("ALL", m, sel)
        # average of per-DGP normalized means, as in a pooled table row
        s["mean_normalized"] = float(np.mean([a["mean_normalized"] for a in per_dgp]))
        out.append(s)
    return out


def _summary(dgp, method, sel) -> dict:
    reg = np.array([r["regret"] for r in sel])
    nrm = np.array([r["normalized_regret"] for r in sel])
    return {
        "dgp": dgp,
        "method": method,
        "mean": float(reg.mean()),
        "std": float(reg.std(ddof=1)) if reg.size > 1 else 0.0,
        "median": float(np.median(reg)),
        "p95": float(np.percentile(reg, 95)),
        "mean_normalized": float(nrm.mean()),
    }


def format_cell(a: dict) -> str:
    """``[mean ± st.dev.] median (95%)``."""
    return f"[{a['mean']:.3f} ± {a['std']:.3f}] {a['median']:.3f} ({a['p95']:.3f})"


def format_table(aggs: list) -> str:
    dgps = [d for d in dict.fromkeys(a["dgp"] for a in aggs) if d != "ALL"]
    methods = list(dict.fromkeys(a["method"] for a in aggs))
    cell = {(a["dgp"], a["method"]): a for a in aggs}
    header = ["method"] + [f"DGP {d}" for d in dgps] + ["normalized"]
    lines = []
    for m in methods:
        row = [m] + [format_cell(cell[(d, m)]) if (d, m) in cell else "" for d in dgps]
        row.append(f"{cell[('ALL', m)]['mean_normalized']:.3f}" if ("ALL", m) in cell else "")
        lines.append(row)
    widths = [max(len(r[i]) for r in [header] + lines) for i in range(len(header))]
    fmt = lambda r: " | ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    out = [fmt(header), "-+-".join("-" * w for w in widths)] + [fmt(r) for r in lines]
    return "\n".join(out) + "\n"
