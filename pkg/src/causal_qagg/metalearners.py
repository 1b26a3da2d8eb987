"""The eight candidate CATE meta-learners and the model matrix they feed.

Recipes (mu = outcome regression, pi = propensity):

* S:   mu(x, 1) - mu(x, 0) from one joint regression.
* T:   mu1(x) - mu0(x) from per-arm regressions.
* IPW: regress D Y / pi - (1 - D) Y / (1 - pi) on x.
* X:   impute effects per arm, regress, combine as pi * tau0 + (1 - pi) * tau1.
* DR:  regress mu(x,1) - mu(x,0) + a(D,x) (Y - mu(x,D)) on x.
* R:   minimize sum (Y~ - f(x) D~)^2, a weighted regression of Y~/D~ with weights D~^2.
* DRX: DR with mu(x, d) replaced by X-learner blends g0, g1.
* DAX: X-learner whose per-arm fits use density-ratio sample weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .learners import LearnerSpec, learner_from_dict
from .nuisance import (
    DEFAULT_CLIP_EPS,
    NuisancePack,
    OutcomeRegression,
    PropensityModel,
)
from .proxy import dr_labels
from .tabular import Dataset, FeatureMap
from .validation import as_float_matrix, as_float_vector, check_both_arms, check_index

__all__ = [
    "MetaLearnerKind",
    "MetaLearner",
    "CateModel",
    "fit_metalearner",
    "fit_all_metalearners",
    "model_matrix",
    "DEFAULT_DAX_WEIGHT_CAP",
]

DEFAULT_DAX_WEIGHT_CAP = 100.0


class MetaLearnerKind(str, Enum):
    S = "S"
    T = "T"
    IPW = "IPW"
    X = "X"
    DR = "DR"
    R = "R"
    DRX = "DRX"
    DAX = "DAX"


def default_propensity_spec(nuisance_spec: LearnerSpec) -> LearnerSpec:
    """Classifier counterpart of a regression spec: ridge maps to logistic."""
    if nuisance_spec.kind == "ridge":
        return LearnerSpec("logistic", lam=nuisance_spec.lam, features=nuisance_spec.features,
                           seed=nuisance_spec.seed)
    return nuisance_spec


class MetaLearner(RegressorMixin, BaseEstimator):
    """CATE estimator built from regression and classification sub-problems.

    ``fit(X, treat, y)`` trains every internal nuisance on the given rows;
    ``predict(X)`` returns the effect estimate, clamped to ``clip_u`` when
    ``clip_output`` is set (``clip_u = 2 * max|y|`` over training rows).
    """

    def __init__(self, kind="DR", nuisance_spec: Optional[LearnerSpec] = None,
                 final_spec: Optional[LearnerSpec] = None,
                 propensity_spec: Optional[LearnerSpec] = None,
                 clip_eps: float = DEFAULT_CLIP_EPS,
                 dax_weight_cap: float = DEFAULT_DAX_WEIGHT_CAP,
                 clip_output: bool = True):
        self.kind = kind
        self.nuisance_spec = nuisance_spec
        self.final_spec = final_spec
        self.propensity_spec = propensity_spec
        self.clip_eps = clip_eps
        self.dax_weight_cap = dax_weight_cap
        self.clip_output = clip_output

    # -- spec resolution ------------------------------------------------------
    def _specs(self):
        nspec = self.nuisance_spec if self.nuisance_spec is not None else LearnerSpec()
        fspec = self.final_spec if self.final_spec is not None else nspec
        pspec = self.propensity_spec if self.propensity_spec is not None else default_propensity_spec(nspec)
        return nspec, fspec, pspec

    def _reg(self, spec, X, y, w=None):
        return spec.make_regressor().fit(X, y, sample_weight=w)

    def _arm_models(self, nspec, X, d, y):
        mu0 = self._reg(nspec, X[d == 0], y[d == 0])
        mu1 = self._reg(nspec, X[d == 1], y[d == 1])
        return mu0, mu1

    def _imputed(self, fspec, X, d, y, mu0, mu1, w0=None, w1=None):
        c, t = d == 0, d == 1
        tau0 = self._reg(fspec, X[c], mu1.predict(X[c]) - y[c], w0)
        tau1 = self._reg(fspec, X[t], y[t] - mu0.predict(X[t]), w1)
        return tau0, tau1

    def fit(self, X, treat, y):
        X = as_float_matrix(X)
        d = as_float_vector(treat, "treat", X.shape[0])
        y = as_float_vector(y, "y", X.shape[0])
        kind = MetaLearnerKind(self.kind)
        check_both_arms(d, 2 if kind in (MetaLearnerKind.X, MetaLearnerKind.DRX, MetaLearnerKind.DAX) else 1)
        nspec, fspec, pspec = self._specs()
        comp = {}
        if kind in (MetaLearnerKind.IPW, MetaLearnerKind.X, MetaLearnerKind.DR, MetaLearnerKind.R,
                    MetaLearnerKind.DRX, MetaLearnerKind.DAX):
            comp["pi"] = PropensityModel(pspec, self.clip_eps).fit(X, d)

        if kind is MetaLearnerKind.S:
            comp["mu"] = OutcomeRegression(nspec).fit(X, d, y)
        elif kind is MetaLearnerKind.T:
            comp["mu0"], comp["mu1"] = self._arm_models(nspec, X, d, y)
        elif kind is MetaLearnerKind.IPW:
            p = comp["pi"].predict(X)
            comp["final"] = self._reg(fspec, X, d * y / p - (1 - d) * y / (1 - p))
        elif kind is MetaLearnerKind.X:
            mu0, mu1 = self._arm_models(nspec, X, d, y)
            comp["tau0"], comp["tau1"] = self._imputed(fspec, X, d, y, mu0, mu1)
        elif kind is MetaLearnerKind.DAX:
            mu0, mu1 = self._arm_models(nspec, X, d, y)
            p = comp["pi"].predict(X)
            cap = self.dax_weight_cap
            w1 = np.minimum((1 - p) ** 2 / p, cap)[d == 1]
            w0 = np.minimum(p ** 2 / (1 - p), cap)[d == 0]
            comp["tau0"], comp["tau1"] = self._imputed(fspec, X, d, y, mu0, mu1, w0, w1)
        elif kind is MetaLearnerKind.DR:
            comp["mu"] = OutcomeRegression(nspec).fit(X, d, y)
            labels = self.dr_pseudo_outcome(X, d, y, comp["mu"], comp["pi"])
            comp["final"] = self._reg(fspec, X, labels)
        elif kind is MetaLearnerKind.R:
            comp["m"] = self._reg(nspec, X, y)
            yt = y - comp["m"].predict(X)
            dt = d - comp["pi"].predict(X)
            live = np.abs(dt) >= 1e-10
            if not live.any():
                raise ValueError("no treatment variation: all treatment residuals vanish")
            target = np.where(live, yt / np.where(live, dt, 1.0), 0.0)
            comp["final"] = self._reg(fspec, X, target, np.where(live, dt * dt, 0.0))
        elif kind is MetaLearnerKind.DRX:
            comp["mu"] = OutcomeRegression(nspec).fit(X, d, y)
            mu0, mu1 = self._arm_models(nspec, X, d, y)
            comp["tau0"], comp["tau1"] = self._imputed(fspec, X, d, y, mu0, mu1)
            g0, g1 = self._drx_blends(X, comp)
            a = np.where(d == 1, 1 / comp["pi"].predict(X), -1 / (1 - comp["pi"].predict(X)))
            labels = g1 - g0 + a * (y - np.where(d == 1, g1, g0))
            comp["final"] = self._reg(fspec, X, labels)
        self.components_ = comp
        self.clip_u_ = 2.0 * float(np.max(np.abs(y)))
        self.n_features_in_ = X.shape[1]
        return self

    @staticmethod
    def dr_pseudo_outcome(X, d, y, mu, pi) -> np.ndarray:
        data = Dataset(X, d, y)
        pack = NuisancePack(mu, pi.predict, pi.clip_eps)
        return dr_labels(data, np.arange(len(y)), pack).values

    @staticmethod
    def _drx_blends(X, comp):
        mu, p = comp["mu"], comp["pi"].predict(X)
        m0, m1 = mu.predict(X, 0.0), mu.predict(X, 1.0)
        g0 = m0 * (1 - p) + (m1 - comp["tau0"].predict(X)) * p
        g1 = m1 * (1 - p) + (m0 + comp["tau1"].predict(X)) * p
        return g0, g1

    def predict_raw(self, X) -> np.ndarray:
        check_is_fitted(self, "components_")
        X = as_float_matrix(X)
        c = self.components_
        kind = MetaLearnerKind(self.kind)
        if kind is MetaLearnerKind.S:
            return c["mu"].predict(X, 1.0) - c["mu"].predict(X, 0.0)
        if kind is MetaLearnerKind.T:
            return c["mu1"].predict(X) - c["mu0"].predict(X)
        if kind in (MetaLearnerKind.X, MetaLearnerKind.DAX):
            p = c["pi"].predict(X)
            return p * c["tau0"].predict(X) + (1 - p) * c["tau1"].predict(X)
        return c["final"].predict(X)

    def predict(self, X) -> np.ndarray:
        out = self.predict_raw(X)
        if self.clip_output:
            out = np.clip(out, -self.clip_u_, self.clip_u_)
        return out

    def to_dict(self) -> dict:
        check_is_fitted(self, "components_")
        nspec, fspec, pspec = self._specs()
        return {
            "kind": MetaLearnerKind(self.kind).value,
            "nuisance_spec": nspec.to_dict(),
            "final_spec": fspec.to_dict(),
            "propensity_spec": pspec.to_dict(),
            "clip_eps": self.clip_eps,
            "dax_weight_cap": self.dax_weight_cap,
            "clip_output": self.clip_output,
            "clip_u": self.clip_u_,
            "components": {k: v.to_dict() for k, v in self.components_.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetaLearner":
        est = cls(
            kind=d["kind"],
            nuisance_spec=LearnerSpec.from_dict(d["nuisance_spec"]),
            final_spec=LearnerSpec.from_dict(d["final_spec"]),
            propensity_spec=LearnerSpec.from_dict(d["propensity_spec"]),
            clip_eps=d["clip_eps"],
            dax_weight_cap=d["dax_weight_cap"],
            clip_output=d["clip_output"],
        )
        comp = {}
        for name, desc in d["components"].items():
            if name == "pi":
                comp[name] = PropensityModel.from_dict(desc)
            elif name == "mu":
                comp[name] = OutcomeRegression.from_dict(desc)
            else:
                comp[name] = learner_from_dict(desc)
        est.components_ = comp
        est.clip_u_ = d["clip_u"]
        return est


@dataclass(frozen=True)
class CateModel:
    """Named effect predictor ``x -> tau(x)`` with a prior weight for aggregation."""

    name: str
    predict_fn: Callable
    prior_weight: float = 1.0
    clip_u: Optional[float] = None
    estimator: Optional[MetaLearner] = None

    def __post_init__(self):
        if not 0 < self.prior_weight <= 1:
            raise ValueError("prior_weight must lie in (0, 1]")

    def predict(self, x) -> np.ndarray:
        x = as_float_matrix(x)
        out = np.broadcast_to(np.asarray(self.predict_fn(x), dtype=float).reshape(-1), (x.shape[0],))
        if self.clip_u is not None:
            out = np.clip(out, -self.clip_u, self.clip_u)
        return np.array(out)

    __call__ = predict

    def to_dict(self) -> dict:
        if self.estimator is None:
            raise ValueError(f"model {self.name!r} has no serializable estimator")
        return {"name": self.name, "prior_weight": self.prior_weight, "clip_u": self.clip_u,
                "estimator": self.estimator.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "CateModel":
        est = MetaLearner.from_dict(d["estimator"])
        return cls(d["name"], est.predict, d["prior_weight"], d["clip_u"], est)


def fit_metalearner(kind, data: Dataset, idx, nuisance_spec: LearnerSpec, final_spec: LearnerSpec,
                    seed: int = 0, *, propensity_spec: Optional[LearnerSpec] = None,
                    clip_eps: float = DEFAULT_CLIP_EPS, prior_weight: float = 1.0,
                    dax_weight_cap: float = DEFAULT_DAX_WEIGHT_CAP) -> CateModel:
    """Fit one meta-learner on rows ``idx`` and wrap it as a :class:`CateModel`.

    Every learner here is deterministic, so ``seed`` only tags the specs.
    """
    from dataclasses import replace

    idx = check_index(idx, data.n)
    kind = MetaLearnerKind(kind)
    nspec, fspec = replace(nuisance_spec, seed=seed), replace(final_spec, seed=seed)
    est = MetaLearner(kind.value, nspec, fspec, propensity_spec, clip_eps, dax_weight_cap)
    est.fit(data.x[idx], data.treat[idx], data.y[idx])
    return CateModel(kind.value, est.predict, prior_weight, est.clip_u_, est)


def fit_all_metalearners(data: Dataset, idx, nuisance_spec: LearnerSpec, final_spec: LearnerSpec,
                         seed: int = 0, kinds: Sequence = tuple(MetaLearnerKind), **kw) -> list:
    return [fit_metalearner(k, data, idx, nuisance_spec, final_spec, seed, **kw) for k in kinds]


def model_matrix(models: Sequence[CateModel], x) -> np.ndarray:
    """Column j holds model j evaluated on the rows of x."""
    if len(models) == 0:
        raise ValueError("need at least one model")
    x = as_float_matrix(x)
    return np.column_stack([m.predict(x) for m in models])
