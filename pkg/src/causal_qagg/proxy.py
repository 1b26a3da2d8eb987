"""Pseudo-outcome ("proxy label") construction and a Monte Carlo bias oracle.

Each label vector has conditional mean equal to the target effect when the
nuisances are exact. Labels are never clipped.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .nuisance import IvNuisancePack, NuisancePack, _instrument_residual
from .tabular import Dataset
from .validation import as_float_matrix, check_index

__all__ = [
    "ProxyLabels",
    "BiasReport",
    "dr_labels",
    "ipw_labels",
    "iv_labels",
    "iv_labels_residualized",
    "bias_oracle",
]

LABEL_KINDS = ("dr", "ipw", "iv", "iv_residualized")


@dataclass(frozen=True, eq=False)
class ProxyLabels:
    values: np.ndarray
    kind: str
    index: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in LABEL_KINDS:
            raise ValueError(f"unknown label kind {self.kind!r}")
        v = np.array(self.values, dtype=float).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise ValueError("proxy labels must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.index is not None:
            idx = np.array(self.index, dtype=np.intp).reshape(-1)
            idx.setflags(write=False)
            object.__setattr__(self, "index", idx)

    @property
    def bound_u(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0

    def __len__(self):
        return self.values.size

    def to_csv(self, path) -> None:
        idx = self.index if self.index is not None else np.arange(self.values.size)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "value", "kind"])
            for i, v in zip(idx, self.values):
                w.writerow([int(i), format(float(v), ".17g"), self.kind])


def dr_labels(data: Dataset, idx, pack: NuisancePack) -> ProxyLabels:
    """``h(1,x) - h(0,x) + a(D,x) (Y - h(D,x))``."""
    idx = check_index(idx, data.n)
    x, d, y = data.x[idx], data.treat[idx], data.y[idx]
    h1, h0 = pack.h(1.0, x), pack.h(0.0, x)
    hd = np.where(d == 1, h1, h0)
    vals = h1 - h0 + pack.a(d, x) * (y - hd)
    return ProxyLabels(vals, "dr", idx)


def ipw_labels(data: Dataset, idx, p: Callable) -> ProxyLabels:
    """``D Y / p(x) - (1 - D) Y / (1 - p(x))``."""
    idx = check_index(idx, data.n)
    x, d, y = data.x[idx], data.treat[idx], data.y[idx]
    px = np.asarray(p(x), dtype=float).reshape(-1)
    vals = d * y / px - (1 - d) * y / (1 - px)
    return ProxyLabels(vals, "ipw", idx)


def iv_labels(data: Dataset, idx, pack: IvNuisancePack) -> ProxyLabels:
    """``tau(x) + (Y - tau(x) D) Z~ / beta(x)`` with Z~ = Z - pi0(x)."""
    if data.instrument is None:
        raise ValueError("dataset has no instrument column")
    idx = check_index(idx, data.n)
    x, d, y = data.x[idx], data.treat[idx], data.y[idx]
    zt = _instrument_residual(data, idx, pack.pi0_fn)
    tau = pack.tau_prelim(x)
    vals = tau + (y - tau * d) * zt / pack.beta(x)
    return ProxyLabels(vals, "iv", idx)


def iv_labels_residualized(data: Dataset, idx, pack: IvNuisancePack, h: Callable, r: Callable,
                           pi_hat: Callable) -> ProxyLabels:
    """IV label on residualized outcome, treatment and instrument.

    ``h``, ``r`` and ``pi_hat`` estimate E[Y|x], E[D|x] and E[Z|x]; how they
    are fitted is left to the caller.
    """
    if data.instrument is None:
        raise ValueError("dataset has no instrument column")
    idx = check_index(idx, data.n)
    x = data.x[idx]
    yt = data.y[idx] - np.asarray(h(x), dtype=float).reshape(-1)
    dt = data.treat[idx] - np.asarray(r(x), dtype=float).reshape(-1)
    zt = data.instrument[idx] - np.asarray(pi_hat(x), dtype=float).reshape(-1)
    tau = pack.tau_prelim(x)
    vals = tau + (yt - tau * dt) * zt / pack.beta(x)
    return ProxyLabels(vals, "iv_residualized", idx)


@dataclass(frozen=True, eq=False)
class BiasReport:
    grid: np.ndarray
    bias: np.ndarray
    mc_stderr: np.ndarray


def bias_oracle(truth: NuisancePack, est: NuisancePack, grid, mc_draws: int = 10_000,
                seed: int = 0) -> BiasReport:
    """Monte Carlo estimate of ``E[(a0 - a_hat)(h0 - h_hat) | x]`` at each grid point.

    D is drawn from Bernoulli(p0(x)). Each grid point gets its own child seed,
    so results do not depend on evaluation order.
    """
    if mc_draws < 100:
        raise ValueError("mc_draws must be >= 100")
    grid = as_float_matrix(grid)
    children = np.random.SeedSequence(seed).spawn(grid.shape[0])
    bias = np.empty(grid.shape[0])
    se = np.empty(grid.shape[0])
    for j in range(grid.shape[0]):
        xj = np.repeat(grid[j:j + 1], mc_draws, axis=0)
        p0 = truth.p(grid[j:j + 1])[0]
        d = (np.random.default_rng(children[j]).random(mc_draws) < p0).astype(float)
        q = (truth.a(d, xj) - est.a(d, xj)) * (truth.h(d, xj) - est.h(d, xj))
        bias[j] = q.mean()
        se[j] = q.std(ddof=1) / np.sqrt(mc_draws)
    return BiasReport(grid[:, 0] if grid.shape[1] == 1 else grid, bias, se)
