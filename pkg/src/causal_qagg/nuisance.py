"""Nuisance estimation: outcome regression, propensity, Riesz representer, IV moments."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .learners import LearnerSpec, RidgeRegression, learner_from_dict
from .tabular import Dataset, FeatureMap, expand
from .validation import as_float_matrix, as_float_vector, check_both_arms, check_index

__all__ = [
    "DEFAULT_CLIP_EPS",
    "DEFAULT_BETA_FLOOR",
    "OutcomeRegression",
    "PropensityModel",
    "NuisancePack",
    "IvNuisancePack",
    "fit_outcome_regression",
    "fit_propensity",
    "riesz_from_propensity",
    "fit_iv_nuisances",
    "clip_beta",
]

DEFAULT_CLIP_EPS = 0.01
DEFAULT_BETA_FLOOR = 0.1


class OutcomeRegression(RegressorMixin, BaseEstimator):
    """Joint regression of Y on (x, d).

    Linear learners see ``[phi(x), d]``, so the treatment enters additively.
    Nonparametric learners (k-NN, boosted trees) see the raw ``[x, d]``.
    """

    def __init__(self, spec: Optional[LearnerSpec] = None):
        self.spec = spec

    def _spec(self) -> LearnerSpec:
        return self.spec if self.spec is not None else LearnerSpec()

    def _design(self, x, d):
        x = as_float_matrix(x)
        d = np.broadcast_to(np.asarray(d, dtype=float), (x.shape[0],))
        spec = self._spec()
        if spec.kind == "ridge":
            return np.column_stack([expand(spec.features, x), d])
        return np.column_stack([x, d])

    def fit(self, X, treat, y, sample_weight=None):
        spec = self._spec()
        if spec.kind == "ridge":
            # intercept only when the feature map does not span constants
            self.learner_ = RidgeRegression(alpha=spec.lam, features=FeatureMap(),
                                            fit_intercept=not spec.features.spans_constant)
        else:
            self.learner_ = spec.make_regressor()
        self.learner_.fit(self._design(X, treat), y, sample_weight=sample_weight)
        return self

    def predict(self, X, treat):
        check_is_fitted(self, "learner_")
        return self.learner_.predict(self._design(X, treat))

    def __call__(self, d, x):
        return self.predict(x, d)

    def to_dict(self) -> dict:
        return {"spec": self._spec().to_dict(), "learner": self.learner_.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "OutcomeRegression":
        est = cls(LearnerSpec.from_dict(d["spec"]))
        est.learner_ = learner_from_dict(d["learner"])
        return est


class PropensityModel(BaseEstimator):
    """P(D=1|x) from a classifier, clipped into ``[clip_eps, 1 - clip_eps]``."""

    def __init__(self, spec: Optional[LearnerSpec] = None, clip_eps: float = DEFAULT_CLIP_EPS):
        self.spec = spec
        self.clip_eps = clip_eps

    def fit(self, X, treat, sample_weight=None):
        if not 0 < self.clip_eps < 0.5:
            raise ValueError(f"clip_eps must lie in (0, 0.5), got {self.clip_eps}")
        spec = self.spec if self.spec is not None else LearnerSpec("logistic")
        self.learner_ = spec.make_classifier()
        self.learner_.fit(X, treat, sample_weight=sample_weight)
        return self

    def predict(self, X):
        check_is_fitted(self, "learner_")
        if hasattr(self.learner_, "predict_proba"):
            p = self.learner_.predict_proba(X)[:, 1]
        else:
            p = self.learner_.predict(X)
        return np.clip(p, self.clip_eps, 1 - self.clip_eps)

    def __call__(self, x):
        return self.predict(x)

    def to_dict(self) -> dict:
        return {"clip_eps": self.clip_eps, "learner": self.learner_.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "PropensityModel":
        est = cls(clip_eps=d["clip_eps"])
        est.learner_ = learner_from_dict(d["learner"])
        return est


def fit_outcome_regression(data: Dataset, idx, spec: LearnerSpec) -> OutcomeRegression:
    idx = check_index(idx, data.n)
    check_both_arms(data.treat[idx])
    return OutcomeRegression(spec).fit(data.x[idx], data.treat[idx], data.y[idx])


def fit_propensity(data: Dataset, idx, spec: LearnerSpec,
                   clip_eps: float = DEFAULT_CLIP_EPS) -> PropensityModel:
    idx = check_index(idx, data.n)
    return PropensityModel(spec, clip_eps).fit(data.x[idx], data.treat[idx])


def riesz_from_propensity(p: Callable) -> Callable:
    """Signed inverse-propensity weight ``a(d, x) = (d - p) / (p (1 - p))``."""

    def a(d, x):
        px = np.asarray(p(x), dtype=float)
        d = np.asarray(d, dtype=float)
        return (d - px) / (px * (1.0 - px))

    return a


@dataclass(frozen=True)
class NuisancePack:
    """Outcome regression ``h(d, x)`` and propensity ``p(x)`` with its Riesz weight.

    ``p`` is clipped into ``[clip_eps, 1 - clip_eps]`` on every call.
    """

    h_fn: Callable
    p_fn: Callable
    clip_eps: float = DEFAULT_CLIP_EPS

    def __post_init__(self):
        if not 0 < self.clip_eps < 0.5:
            raise ValueError("clip_eps must lie in (0, 0.5)")

    def h(self, d, x) -> np.ndarray:
        x = as_float_matrix(x)
        d = np.broadcast_to(np.asarray(d, dtype=float), (x.shape[0],))
        return np.asarray(self.h_fn(d, x), dtype=float).reshape(-1)

    def p(self, x) -> np.ndarray:
        x = as_float_matrix(x)
        p = np.broadcast_to(np.asarray(self.p_fn(x), dtype=float).reshape(-1), (x.shape[0],))
        return np.clip(p, self.clip_eps, 1 - self.clip_eps)

    def a(self, d, x) -> np.ndarray:
        return riesz_from_propensity(self.p)(d, x)

    @classmethod
    def fit(cls, data: Dataset, idx, outcome_spec: LearnerSpec, propensity_spec: LearnerSpec,
            clip_eps: float = DEFAULT_CLIP_EPS) -> "NuisancePack":
        h = fit_outcome_regression(data, idx, outcome_spec)
        p = fit_propensity(data, idx, propensity_spec, clip_eps)
        return cls(h, p, clip_eps)


def clip_beta(beta: np.ndarray, floor: float) -> np.ndarray:
    """``sign(b) * max(|b|, floor)`` with sign(0) taken as +1."""
    beta = np.asarray(beta, dtype=float)
    sign = np.where(beta < 0, -1.0, 1.0)
    return sign * np.maximum(np.abs(beta), floor)


@dataclass(frozen=True)
class IvNuisancePack:
    """IV moments ``alpha(x) = E[Y Z~|x]`` and ``beta(x) = E[D Z~|x]`` with Z~ = Z - pi0(x).

    ``beta`` is clipped away from zero by ``beta_floor``; ``tau_prelim`` is
    ``alpha / beta`` on the clipped beta. ``pi0`` may be ``None`` when the
    dataset carries known instrument propensities.
    """

    alpha_fn: Callable
    beta_fn: Callable
    pi0_fn: Optional[Callable] = None
    beta_floor: float = DEFAULT_BETA_FLOOR

    def __post_init__(self):
        if not self.beta_floor > 0:
            raise ValueError("beta_floor must be > 0")

    def alpha(self, x) -> np.ndarray:
        x = as_float_matrix(x)
        return np.broadcast_to(np.asarray(self.alpha_fn(x), dtype=float).reshape(-1), (x.shape[0],))

    def beta(self, x) -> np.ndarray:
        x = as_float_matrix(x)
        b = np.broadcast_to(np.asarray(self.beta_fn(x), dtype=float).reshape(-1), (x.shape[0],))
        return clip_beta(b, self.beta_floor)

    def tau_prelim(self, x) -> np.ndarray:
        return self.alpha(x) / self.beta(x)

    def pi0(self, x) -> np.ndarray:
        if self.pi0_fn is None:
            raise ValueError("pack has no instrument propensity; use known_propensity")
        x = as_float_matrix(x)
        return np.broadcast_to(np.asarray(self.pi0_fn(x), dtype=float).reshape(-1), (x.shape[0],))


def _instrument_residual(data: Dataset, idx, pi0: Optional[Callable]) -> np.ndarray:
    if data.known_propensity is not None:
        return data.instrument[idx] - data.known_propensity[idx]
    if pi0 is None:
        raise ValueError("no known instrument propensity and no pi0 estimate")
    return data.instrument[idx] - np.asarray(pi0(data.x[idx]), dtype=float).reshape(-1)


def fit_iv_nuisances(data: Dataset, idx, spec: LearnerSpec,
                     beta_floor: float = DEFAULT_BETA_FLOOR,
                     propensity_spec: Optional[LearnerSpec] = None,
                     clip_eps: float = DEFAULT_CLIP_EPS) -> IvNuisancePack:
    """Regress ``Y Z~`` and ``D Z~`` on x.

    Z~ uses the dataset's known instrument propensity when present, otherwise
    a classifier of Z on x fit with ``propensity_spec``.
    """
    if data.instrument is None:
        raise ValueError("dataset has no instrument column")
    if not beta_floor > 0:
        raise ValueError("beta_floor must be > 0")
    idx = check_index(idx, data.n)
    pi0 = None
    if data.known_propensity is None:
        if propensity_spec is None:
            raise ValueError("instrument propensity unknown; supply propensity_spec")
        pi0 = PropensityModel(propensity_spec, clip_eps).fit(data.x[idx], data.instrument[idx])
    zt = _instrument_residual(data, idx, pi0)
    alpha = spec.make_regressor().fit(data.x[idx], data.y[idx] * zt)
    beta = spec.make_regressor().fit(data.x[idx], data.treat[idx] * zt)
    return IvNuisancePack(alpha.predict, beta.predict, pi0, beta_floor)
