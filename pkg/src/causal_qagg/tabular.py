"""Datasets, deterministic three-way splits, and covariate feature maps."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .validation import SchemaError, as_binary, as_float_matrix, as_float_vector

__all__ = [
    "Dataset",
    "SplitPlan",
    "FeatureMap",
    "make_split",
    "expand",
    "read_csv",
    "write_csv",
]


def _frozen(a: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if a is None:
        return None
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Covariates ``x``, binary treatment ``treat``, outcome ``y``.

    ``instrument`` is an optional binary assignment Z. ``known_propensity``
    holds the randomization probability of the assigned arm when it is
    known: P(Z=1|X) if an instrument is present, else P(D=1|X).
    All arrays are copied and marked read-only.
    """

    x: np.ndarray
    treat: np.ndarray
    y: np.ndarray
    instrument: Optional[np.ndarray] = None
    known_propensity: Optional[np.ndarray] = None

    def __post_init__(self):
        x = as_float_matrix(self.x, "x")
        n = x.shape[0]
        treat = as_binary(self.treat, "treat", n)
        y = as_float_vector(self.y, "y", n)
        z = None if self.instrument is None else as_binary(self.instrument, "instrument", n)
        pz = None
        if self.known_propensity is not None:
            pz = as_float_vector(self.known_propensity, "known_propensity", n)
            if np.any((pz <= 0.0) | (pz >= 1.0)):
                raise ValueError("known_propensity must lie strictly inside (0, 1)")
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "treat", _frozen(treat))
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "instrument", _frozen(z))
        object.__setattr__(self, "known_propensity", _frozen(pz))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(
            x=self.x[idx],
            treat=self.treat[idx],
            y=self.y[idx],
            instrument=None if self.instrument is None else self.instrument[idx],
            known_propensity=None if self.known_propensity is None else self.known_propensity[idx],
        )

    def equals(self, other: "Dataset") -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and a.tobytes() == b.tobytes()

        return (
            same(self.x, other.x)
            and same(self.treat, other.treat)
            and same(self.y, other.y)
            and same(self.instrument, other.instrument)
            and same(self.known_propensity, other.known_propensity)
        )


@dataclass(frozen=True)
class SplitPlan:
    train_idx: np.ndarray
    ensemble_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def sizes(self) -> tuple:
        return len(self.train_idx), len(self.ensemble_idx), len(self.test_idx)


def make_split(n: int, fractions: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 0) -> SplitPlan:
    """Partition ``range(n)`` into train / ensemble / test index sets.

    Sizes are ``floor(n*f1)``, ``floor(n*f2)`` and the remainder. Indices are
    a seeded permutation drawn with numpy's PCG64 generator
    (``np.random.default_rng(seed)``), each part sorted ascending.
    """
    if int(n) != n or n < 3:
        raise ValueError(f"need n >= 3 samples to split, got {n}")
    n = int(n)
    fr = [float(f) for f in fractions]
    if len(fr) != 3:
        raise ValueError("fractions must be a triple")
    if any(f < 0 or not math.isfinite(f) for f in fr):
        raise ValueError(f"fractions must be non-negative, got {fr}")
    if abs(sum(fr) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fr)!r}")
    # guard against 0.29*100 == 28.999999999999996
    n1 = min(n, int(math.floor(n * fr[0] + 1e-9)))
    n2 = min(n - n1, int(math.floor(n * fr[1] + 1e-9)))
    perm = np.random.default_rng(seed).permutation(n)
    parts = np.sort(perm[:n1]), np.sort(perm[n1:n1 + n2]), np.sort(perm[n1 + n2:])
    for p in parts:
        p.setflags(write=False)
    return SplitPlan(*parts)


@dataclass(frozen=True)
class FeatureMap:
    """Deterministic covariate expansion.

    ``identity`` returns x unchanged. ``polynomial`` emits an intercept column
    followed by per-column powers ``x_j**1..x_j**degree``. ``piecewise_bins``
    one-hot encodes each column into ``bins`` equal-width bins on
    ``[low, high]``; values outside the range fall in the edge bins.
    """

    kind: str = "identity"
    degree: int = 1
    bins: int = 10
    low: float = 0.0
    high: float = 1.0

    def __post_init__(self):
        if self.kind not in ("identity", "polynomial", "piecewise_bins"):
            raise ValueError(f"unknown feature map kind {self.kind!r}")
        if self.kind == "polynomial" and (int(self.degree) != self.degree or self.degree < 1):
            raise ValueError(f"polynomial degree must be >= 1, got {self.degree}")
        if self.kind == "piecewise_bins":
            if int(self.bins) != self.bins or self.bins < 2:
                raise ValueError(f"piecewise_bins needs bins >= 2, got {self.bins}")
            if not self.high > self.low:
                raise ValueError("piecewise_bins needs high > low")

    @property
    def spans_constant(self) -> bool:
        """True when the expanded design already spans the constant function."""
        return self.kind in ("polynomial", "piecewise_bins")

    def output_dim(self, d: int) -> int:
        if self.kind == "identity":
            return d
        if self.kind == "polynomial":
            return 1 + d * self.degree
        return d * self.bins

    def expand(self, x) -> np.ndarray:
        return expand(self, x)

    def to_dict(self) -> dict:
        if self.kind == "identity":
            return {"kind": "identity"}
        if self.kind == "polynomial":
            return {"kind": "polynomial", "degree": int(self.degree)}
        out = {"kind": "piecewise_bins", "k": int(self.bins)}
        if (self.low, self.high) != (0.0, 1.0):
            out.update(low=self.low, high=self.high)
        return out

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "FeatureMap":
        if d is None:
            return cls()
        d = dict(d)
        kind = d.pop("kind", "identity")
        if kind == "polynomial":
            return cls(kind, degree=d.pop("degree", 2))
        if kind == "piecewise_bins":
            return cls(kind, bins=d.pop("k", d.pop("bins", 10)),
                       low=float(d.pop("low", 0.0)), high=float(d.pop("high", 1.0)))
        return cls(kind)


def expand(fm: FeatureMap, x) -> np.ndarray:
    x = as_float_matrix(x, "x")
    if x.shape[0] == 0:
        raise ValueError("cannot expand an empty covariate matrix")
    if fm.kind == "identity":
        return x
    n, d = x.shape
    if fm.kind == "polynomial":
        out = np.empty((n, 1 + d * fm.degree))
        out[:, 0] = 1.0
        col = 1
        for j in range(d):
            for p in range(1, fm.degree + 1):
                out[:, col] = x[:, j] ** p
                col += 1
        return out
    width = (fm.high - fm.low) / fm.bins
    b = np.floor((x - fm.low) / width).astype(np.int64)
    np.clip(b, 0, fm.bins - 1, out=b)
    out = np.zeros((n, d * fm.bins))
    rows = np.arange(n)
    for j in range(d):
        out[rows, j * fm.bins + b[:, j]] = 1.0
    return out


# --- CSV schema: x0..x{d-1}, d, y, [z], [pz] ---------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_csv(data: Dataset, path) -> None:
    header = [f"x{j}" for j in range(data.d)] + ["d", "y"]
    if data.instrument is not None:
        header.append("z")
    if data.known_propensity is not None:
        header.append("pz")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(data.n):
            row = [_fmt(v) for v in data.x[i]] + [str(int(data.treat[i])), _fmt(data.y[i])]
            if data.instrument is not None:
                row.append(str(int(data.instrument[i])))
            if data.known_propensity is not None:
                row.append(_fmt(data.known_propensity[i]))
            w.writerow(row)


def read_csv(path) -> Dataset:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError("empty CSV file", column=None)
    header = [h.strip() for h in rows[0]]
    for required in ("d", "y"):
        if required not in header:
            raise SchemaError(f"missing required column {required!r}", column=required)
    xcols = [h for h in header if h.startswith("x") and h[1:].isdigit()]
    if not xcols:
        raise SchemaError("missing covariate columns x0..x{d-1}", column="x0")
    expected = [f"x{j}" for j in range(len(xcols))]
    if sorted(xcols, key=lambda h: int(h[1:])) != expected:
        raise SchemaError(f"covariate columns must be {expected}", column=xcols[-1])
    known = set(expected) | {"d", "y", "z", "pz"}
    extra = [h for h in header if h not in known]
    if extra:
        raise SchemaError(f"unknown column {extra[0]!r}", column=extra[0])
    body = rows[1:]
    if not body:
        raise SchemaError("CSV has no data rows", column=None)
    pos = {h: i for i, h in enumerate(header)}
    try:
        table = np.array([[float(v) for v in r] for r in body], dtype=float)
    except ValueError as exc:
        raise SchemaError(f"non-numeric value: {exc}", column=None) from exc
    if table.shape[1] != len(header):
        raise SchemaError("ragged rows", column=None)

    def col(name):
        return table[:, pos[name]] if name in pos else None

    try:
        return Dataset(
            x=table[:, [pos[h] for h in expected]],
            treat=col("d"),
            y=col("y"),
            instrument=col("z"),
            known_propensity=col("pz"),
        )
    except ValueError as exc:
        msg = str(exc)
        column = {"treat": "d", "instrument": "z", "known_propensity": "pz"}
        name = next((c for k, c in column.items() if k in msg), None)
        raise SchemaError(msg, column=name) from exc
