"""Run configuration: parsing, validation, defaults and hashing.

Config files are JSON or YAML mappings. Nested sections may also be given
as flat dotted keys (``"qagg.nu": 0.1``). Unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .learners import LearnerSpec
from .metalearners import MetaLearnerKind, default_propensity_spec
from .nuisance import DEFAULT_BETA_FLOOR, DEFAULT_CLIP_EPS
from .qagg import QaggConfig
DEFAULT_SIGMA = 0.1  # mirrors simlab.dgp.DEFAULT_SIGMA
from .tabular import FeatureMap

__all__ = ["ConfigError", "RunConfig", "load_config", "DEFAULT_NUISANCE", "DEFAULT_FINAL"]

MODES = ("benchmark", "fit", "iv_fit", "diagnose")
METHODS = ("qagg", "greedy", "convex", "best")

DEFAULT_NUISANCE = LearnerSpec("ridge", lam=1e-3, features=FeatureMap("piecewise_bins", bins=10))
DEFAULT_FINAL = LearnerSpec("ridge", lam=1e-2, features=FeatureMap("polynomial", degree=3))


class ConfigError(ValueError):
    pass


def _unflatten(d: dict) -> dict:
    out: dict = {}
    for key, val in d.items():
        parts = str(key).split(".")
        cur = out
        for p in parts[:-1]:
            cur = cur.setdefault(p, {})
            if not isinstance(cur, dict):
                raise ConfigError(f"key {key!r} conflicts with a scalar value")
        if isinstance(val, dict):
            val = _unflatten(val)
            if isinstance(cur.get(parts[-1]), dict):
                cur[parts[-1]].update(val)
                continue
        cur[parts[-1]] = val
    return out


@dataclass(frozen=True)
class QaggSection:
    nu: float = 0.1
    beta: Optional[float] = None
    priors: Optional[dict] = None
    solver: str = "exact"
    steps: Optional[int] = None
    tol: float = 1e-10
    max_iters: int = 50_000

    def to_config(self, names) -> QaggConfig:
        priors = None
        if self.priors is not None:
            unknown = set(self.priors) - set(names)
            if unknown:
                raise ConfigError(f"priors name unknown models {sorted(unknown)}")
            priors = tuple(float(self.priors.get(nm, 1.0)) for nm in names)
        return QaggConfig(nu=self.nu, beta_pen=self.beta, priors=priors, solver=self.solver,
                          greedy_steps=self.steps, tol=self.tol, max_iters=self.max_iters)


@dataclass(frozen=True)
class RunConfig:
    """Validated settings for every CLI mode.

    ``qagg.nu`` defaults to 0.1 here (the experiment setting); the library
    estimator defaults to 0.5.
    """

    mode: str = "benchmark"
    data: Optional[str] = None
    dgps: tuple = (1, 2, 3, 4, 5, 6)
    n: int = 2000
    reps: int = 100
    sigma: float = DEFAULT_SIGMA
    dgp4_literal: bool = False
    split: tuple = (0.6, 0.2, 0.2)
    learners: tuple = tuple(k.value for k in MetaLearnerKind)
    nuisance: LearnerSpec = DEFAULT_NUISANCE
    propensity: Optional[LearnerSpec] = None
    final: LearnerSpec = DEFAULT_FINAL
    clip_eps: float = DEFAULT_CLIP_EPS
    beta_floor: float = DEFAULT_BETA_FLOOR
    qagg: QaggSection = field(default_factory=QaggSection)
    method: str = "qagg"
    seed: int = 0
    no_split: bool = False
    out: Optional[str] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.mode in ("fit", "iv_fit", "diagnose") and not self.data:
            raise ConfigError(f"mode {self.mode!r} needs a 'data' CSV path")
        for g in self.dgps:
            if g not in range(1, 7):
                raise ConfigError(f"unknown DGP id {g}")
        if self.n < 10:
            raise ConfigError("n must be >= 10")
        if self.reps < 1:
            raise ConfigError("reps must be >= 1")
        if len(self.split) != 3 or any(f < 0 for f in self.split) or abs(sum(self.split) - 1) > 1e-9:
            raise ConfigError("split must be three non-negative fractions summing to 1")
        for k in self.learners:
            try:
                MetaLearnerKind(k)
            except ValueError:
                raise ConfigError(f"unknown learner {k!r}") from None
        if not self.learners:
            raise ConfigError("learners must not be empty")
        if not 0 < self.clip_eps < 0.5:
            raise ConfigError("clip_eps must lie in (0, 0.5)")
        if not self.beta_floor > 0:
            raise ConfigError("beta_floor must be > 0")
        if not 0 <= self.qagg.nu <= 1:
            raise ConfigError("qagg.nu must lie in [0, 1]")
        if self.qagg.solver not in ("exact", "greedy"):
            raise ConfigError("qagg.solver must be 'exact' or 'greedy'")

    @property
    def propensity_spec(self) -> LearnerSpec:
        return self.propensity if self.propensity is not None else default_propensity_spec(self.nuisance)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        d = _unflatten(raw)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        kw = dict(d)
        try:
            for key in ("nuisance", "final"):
                if key in kw:
                    kw[key] = LearnerSpec.from_dict(kw[key])
            if kw.get("propensity") is not None:
                kw["propensity"] = LearnerSpec.from_dict(kw["propensity"])
            if "qagg" in kw:
                q = kw["qagg"] or {}
                qknown = {f.name for f in fields(QaggSection)}
                bad = set(q) - qknown
                if bad:
                    raise ConfigError(f"unknown config keys {sorted('qagg.' + b for b in bad)}")
                kw["qagg"] = QaggSection(**q)
            for key in ("dgps", "split", "learners"):
                if key in kw:
                    val = kw[key]
                    kw[key] = tuple(val) if isinstance(val, (list, tuple)) else (val,)
            if "dgps" in kw:
                kw["dgps"] = tuple(int(g) for g in kw["dgps"])
            for key in ("n", "reps", "seed"):
                if key in kw:
                    kw[key] = int(kw[key])
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        """Every setting, defaults included, in file form."""
        q = self.qagg
        return {
            "mode": self.mode,
            "data": self.data,
            "dgps": list(self.dgps),
            "n": self.n,
            "reps": self.reps,
            "sigma": self.sigma,
            "dgp4_literal": self.dgp4_literal,
            "split": list(self.split),
            "learners": list(self.learners),
            "nuisance": self.nuisance.to_dict(),
            "propensity": self.propensity_spec.to_dict(),
            "final": self.final.to_dict(),
            "clip_eps": self.clip_eps,
            "beta_floor": self.beta_floor,
            "qagg": {"nu": q.nu, "beta": q.beta, "priors": q.priors, "solver": q.solver,
                     "steps": q.steps, "tol": q.tol, "max_iters": q.max_iters},
            "method": self.method,
            "seed": self.seed,
            "no_split": self.no_split,
            "out": self.out,
        }

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def override(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw) if kw else self


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix.lower() in (".yaml", ".yml"):
            import yaml

            raw = yaml.safe_load(text)
        else:
            raw = json.loads(text)
    except Exception as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    cfg = RunConfig.from_dict(raw or {})
    if cfg.data and not Path(cfg.data).is_absolute():
        cfg = replace(cfg, data=str((path.parent / cfg.data).resolve()))
    return cfg
