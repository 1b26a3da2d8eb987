"""Base regressors and classifiers used for nuisances and final stages.

All learners follow the scikit-learn estimator protocol (``fit`` /
``predict`` / ``predict_proba``, ``get_params``), accept ``sample_weight``,
and round-trip through plain-JSON descriptors via ``to_dict`` /
:func:`learner_from_dict`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .tabular import FeatureMap, expand
from .validation import as_float_matrix, as_float_vector

__all__ = [
    "SingularDesignError",
    "RidgeRegression",
    "PenalizedLogisticRegression",
    "KNNRegressor",
    "KNNClassifier",
    "BoostedStumpsRegressor",
    "BoostedStumpsClassifier",
    "LearnerSpec",
    "learner_from_dict",
]


class SingularDesignError(np.linalg.LinAlgError):
    """Unpenalized least-squares system is rank deficient; needs regularization."""


def _weights(sample_weight, n) -> np.ndarray:
    if sample_weight is None:
        return np.ones(n)
    w = as_float_vector(sample_weight, "sample_weight", n)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("sample_weight must be non-negative with positive total")
    return w


def _feature_map(features) -> FeatureMap:
    if features is None:
        return FeatureMap()
    if isinstance(features, FeatureMap):
        return features
    return FeatureMap.from_dict(features)


class _LinearDesign:
    """Shared design construction for the penalized linear learners."""

    def _design(self, X):
        fm = _feature_map(self.features)
        phi = expand(fm, X)
        add_ones = self.fit_intercept and not fm.spans_constant
        if add_ones:
            phi = np.hstack([phi, np.ones((phi.shape[0], 1))])
        return phi

    def _penalty_mask(self, p):
        fm = _feature_map(self.features)
        mask = np.ones(p)
        if self.fit_intercept:
            if fm.kind == "polynomial":
                mask[0] = 0.0
            elif not fm.spans_constant:
                mask[-1] = 0.0
        return mask


class RidgeRegression(_LinearDesign, RegressorMixin, BaseEstimator):
    """Weighted ridge regression on a fixed feature map.

    Minimizes ``sum_i w_i (y_i - phi_i @ c)^2 / sum_i w_i + alpha * |c_pen|^2``
    where the intercept column, if any, is not penalized.
    """

    def __init__(self, alpha: float = 1e-3, features=None, fit_intercept: bool = True):
        self.alpha = alpha
        self.features = features
        self.fit_intercept = fit_intercept

    def fit(self, X, y, sample_weight=None):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        phi = self._design(X)
        y = as_float_vector(y, "y", phi.shape[0])
        w = _weights(sample_weight, phi.shape[0])
        w = w / w.sum()
        if self.alpha == 0:
            sw = np.sqrt(w)
            A = phi * sw[:, None]
            coef, _, rank, _ = np.linalg.lstsq(A, y * sw, rcond=None)
            if rank < phi.shape[1]:
                raise SingularDesignError(
                    f"design has rank {rank} < {phi.shape[1]} columns; needs regularization (alpha > 0)"
                )
        else:
            gram = phi.T @ (phi * w[:, None])
            gram[np.diag_indices_from(gram)] += self.alpha * self._penalty_mask(phi.shape[1])
            coef = np.linalg.solve(gram, phi.T @ (w * y))
        self.coef_ = coef
        self.n_features_in_ = as_float_matrix(X).shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        return self._design(X) @ self.coef_

    def to_dict(self) -> dict:
        check_is_fitted(self, "coef_")
        return {
            "kind": "ridge",
            "lambda": self.alpha,
            "features": _feature_map(self.features).to_dict(),
            "fit_intercept": self.fit_intercept,
            "coef": self.coef_.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RidgeRegression":
        est = cls(alpha=d["lambda"], features=FeatureMap.from_dict(d["features"]),
                  fit_intercept=d["fit_intercept"])
        est.coef_ = np.asarray(d["coef"], dtype=float)
        return est


class PenalizedLogisticRegression(_LinearDesign, ClassifierMixin, BaseEstimator):
    """L2-penalized logistic regression fit by damped Newton steps."""

    def __init__(self, alpha: float = 1e-3, features=None, fit_intercept: bool = True,
                 max_iter: int = 100, tol: float = 1e-10):
        self.alpha = alpha
        self.features = features
        self.fit_intercept = fit_intercept
        self.max_iter = max_iter
        self.tol = tol

    def _loss(self, c, phi, y, w, mask):
        z = phi @ c
        # log(1 + e^z) - y z, stable
        return np.sum(w * (np.logaddexp(0.0, z) - y * z)) + self.alpha * np.sum(mask * c * c)

    def fit(self, X, y, sample_weight=None):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        phi = self._design(X)
        y = as_float_vector(y, "y", phi.shape[0])
        w = _weights(sample_weight, phi.shape[0])
        w = w / w.sum()
        self.classes_ = np.array([0.0, 1.0])
        self.n_features_in_ = as_float_matrix(X).shape[1]
        if np.all(y == y[0]):
            if self.alpha == 0:
                raise ValueError("single class in training labels; unpenalized logistic fit diverges")
            self.constant_ = float(y[0])
            self.coef_ = np.zeros(phi.shape[1])
            return self
        self.constant_ = None
        mask = self._penalty_mask(phi.shape[1])
        c = np.zeros(phi.shape[1])
        loss = self._loss(c, phi, y, w, mask)
        self.n_iter_ = 0
        for it in range(self.max_iter):
            p = expit(phi @ c)
            grad = phi.T @ (w * (p - y)) + 2 * self.alpha * mask * c
            hess = phi.T @ (phi * (w * p * (1 - p))[:, None])
            hess[np.diag_indices_from(hess)] += 2 * self.alpha * mask + 1e-12
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
            t = 1.0
            while True:
                cand = c - t * step
                new_loss = self._loss(cand, phi, y, w, mask)
                if new_loss <= loss - 1e-4 * t * grad @ step or t < 1e-10:
                    break
                t *= 0.5
            c = cand
            self.n_iter_ = it + 1
            if loss - new_loss <= self.tol * max(1.0, abs(loss)):
                loss = new_loss
                break
            loss = new_loss
        self.coef_ = c
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        return self._design(X) @ self.coef_

    def predict_proba(self, X):
        check_is_fitted(self, "coef_")
        if self.constant_ is not None:
            p1 = np.full(as_float_matrix(X).shape[0], self.constant_)
        else:
            p1 = expit(self.decision_function(X))
        return np.column_stack([1 - p1, p1])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] > 0.5).astype(float)

    def to_dict(self) -> dict:
        check_is_fitted(self, "coef_")
        return {
            "kind": "logistic",
            "lambda": self.alpha,
            "features": _feature_map(self.features).to_dict(),
            "fit_intercept": self.fit_intercept,
            "coef": self.coef_.tolist(),
            "constant": self.constant_,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PenalizedLogisticRegression":
        est = cls(alpha=d["lambda"], features=FeatureMap.from_dict(d["features"]),
                  fit_intercept=d["fit_intercept"])
        est.coef_ = np.asarray(d["coef"], dtype=float)
        est.constant_ = d["constant"]
        est.classes_ = np.array([0.0, 1.0])
        return est


class KNNRegressor(RegressorMixin, BaseEstimator):
    """Weighted mean of the ``k`` nearest training targets (Euclidean in x)."""

    def __init__(self, k: int = 10):
        self.k = k

    def fit(self, X, y, sample_weight=None):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        X = as_float_matrix(X)
        self.X_ = X
        self.y_ = as_float_vector(y, "y", X.shape[0])
        self.w_ = _weights(sample_weight, X.shape[0])
        self.n_features_in_ = X.shape[1]
        self._tree = cKDTree(X)
        return self

    def predict(self, X):
        check_is_fitted(self, "X_")
        X = as_float_matrix(X)
        k = min(self.k, self.X_.shape[0])
        _, nn = self._tree.query(X, k=k)
        nn = nn.reshape(X.shape[0], k)
        w = self.w_[nn]
        tot = w.sum(axis=1)
        vals = (w * self.y_[nn]).sum(axis=1)
        plain = self.y_[nn].mean(axis=1)
        return np.where(tot > 0, vals / np.where(tot > 0, tot, 1.0), plain)

    def to_dict(self) -> dict:
        check_is_fitted(self, "X_")
        return {"kind": "knn", "k": self.k, "X": self.X_.tolist(), "y": self.y_.tolist(),
                "w": self.w_.tolist()}

    @classmethod
    def from_dict(cls, d: dict):
        return cls(k=d["k"]).fit(np.asarray(d["X"]), np.asarray(d["y"]), np.asarray(d["w"]))


class KNNClassifier(ClassifierMixin, KNNRegressor):
    def fit(self, X, y, sample_weight=None):
        super().fit(X, y, sample_weight)
        self.classes_ = np.array([0.0, 1.0])
        return self

    def predict_proba(self, X):
        p1 = KNNRegressor.predict(self, X)
        return np.column_stack([1 - p1, p1])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] > 0.5).astype(float)

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["kind"] = "knn_classifier"
        return d


# --- gradient boosted trees on quantile thresholds ---------------------------

def _tree_apply(tree: list, X: np.ndarray) -> np.ndarray:
    out = np.empty(X.shape[0])
    stack = [(0, np.arange(X.shape[0]))]
    while stack:
        node, rows = stack.pop()
        nd = tree[node]
        if "v" in nd:
            out[rows] = nd["v"]
            continue
        go_left = X[rows, nd["f"]] <= nd["t"]
        stack.append((nd["l"], rows[go_left]))
        stack.append((nd["r"], rows[~go_left]))
    return out


class _BoostedStumps(BaseEstimator):
    """Newton-boosted shallow trees grown best-first up to ``max_leaves`` leaves.

    Candidate thresholds are the distinct training quantiles of each feature
    (``n_quantiles`` levels); samples with ``x <= threshold`` go left. Equal
    gains are broken toward the lowest feature index, then lowest threshold.
    """

    _loss = "squared"

    def __init__(self, rounds: int = 100, learning_rate: float = 0.1, max_leaves: int = 2,
                 n_quantiles: int = 32, reg_lambda: float = 1e-6):
        self.rounds = rounds
        self.learning_rate = learning_rate
        self.max_leaves = max_leaves
        self.n_quantiles = n_quantiles
        self.reg_lambda = reg_lambda

    def _grad_hess(self, F, y):
        if self._loss == "squared":
            return F - y, np.ones_like(F)
        p = expit(F)
        return p - y, np.maximum(p * (1 - p), 1e-12)

    def _grow(self, codes, thresholds, rows_all, g, h):
        lam = self.reg_lambda
        tree = [{"v": 0.0}]
        leaves = {0: rows_all}

        def best_split(rows):
            G, H = g[rows].sum(), h[rows].sum()
            parent = G * G / (H + lam)
            best = None
            for f, thr in enumerate(thresholds):
                if thr.size == 0:
                    continue
                c = codes[rows, f]
                gl = np.cumsum(np.bincount(c, weights=g[rows], minlength=thr.size + 1))[:-1]
                hl = np.cumsum(np.bincount(c, weights=h[rows], minlength=thr.size + 1))[:-1]
                cnt = np.cumsum(np.bincount(c, minlength=thr.size + 1))[:-1]
                ok = (cnt > 0) & (cnt < rows.size)
                if not ok.any():
                    continue
                gain = gl ** 2 / (hl + lam) + (G - gl) ** 2 / (H - hl + lam) - parent
                gain = np.where(ok, gain, -np.inf)
                t = int(np.argmax(gain))
                if gain[t] > 1e-12 and (best is None or gain[t] > best[0]):
                    best = (float(gain[t]), f, t)
            return best

        cand = {0: best_split(rows_all)}
        while len(leaves) < self.max_leaves:
            choices = [(v[0], k) for k, v in cand.items() if v is not None]
            if not choices:
                break
            # largest gain, ties to the earliest-created leaf
            _, node = max(choices, key=lambda c: (c[0], -c[1]))
            _, f, t = cand.pop(node)
            rows = leaves.pop(node)
            left_mask = codes[rows, f] <= t
            li, ri = len(tree), len(tree) + 1
            tree[node] = {"f": f, "t": float(thresholds[f][t]), "l": li, "r": ri}
            tree.extend([{"v": 0.0}, {"v": 0.0}])
            leaves[li], leaves[ri] = rows[left_mask], rows[~left_mask]
            cand[li] = best_split(leaves[li])
            cand[ri] = best_split(leaves[ri])
        for node, rows in leaves.items():
            tree[node] = {"v": float(-g[rows].sum() / (h[rows].sum() + lam))}
        return tree

    def fit(self, X, y, sample_weight=None):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.max_leaves < 2:
            raise ValueError("max_leaves must be >= 2")
        X = as_float_matrix(X)
        y = as_float_vector(y, "y", X.shape[0])
        w = _weights(sample_weight, X.shape[0])
        self.n_features_in_ = X.shape[1]
        qs = np.linspace(0, 1, self.n_quantiles + 2)[1:-1]
        thresholds = [np.unique(np.quantile(X[:, f], qs)) for f in range(X.shape[1])]
        # threshold t splits codes <= t (left) from codes > t
        codes = np.column_stack(
            [np.searchsorted(thr, X[:, f], side="left") for f, thr in enumerate(thresholds)]
        ).astype(np.intp)
        if self._loss == "squared":
            base = float(np.sum(w * y) / w.sum())
        else:
            pbar = float(np.clip(np.sum(w * y) / w.sum(), 1e-6, 1 - 1e-6))
            base = float(np.log(pbar / (1 - pbar)))
        F = np.full(X.shape[0], base)
        trees = []
        rows_all = np.flatnonzero(w > 0)
        for _ in range(self.rounds):
            g, h = self._grad_hess(F, y)
            tree = self._grow(codes, thresholds, rows_all, g * w, h * w)
            if len(tree) == 1:
                break
            for nd in tree:
                if "v" in nd:
                    nd["v"] *= self.learning_rate
            trees.append(tree)
            F += _tree_apply(tree, X)
        self.base_score_ = base
        self.trees_ = trees
        return self

    def _raw(self, X):
        check_is_fitted(self, "trees_")
        X = as_float_matrix(X)
        F = np.full(X.shape[0], self.base_score_)
        for tree in self.trees_:
            F += _tree_apply(tree, X)
        return F

    def to_dict(self) -> dict:
        check_is_fitted(self, "trees_")
        return {
            "kind": "boosted_stumps" if self._loss == "squared" else "boosted_stumps_classifier",
            "rounds": self.rounds,
            "learn_rate": self.learning_rate,
            "max_leaves": self.max_leaves,
            "n_quantiles": self.n_quantiles,
            "base_score": self.base_score_,
            "trees": self.trees_,
        }

    @classmethod
    def from_dict(cls, d: dict):
        est = cls(rounds=d["rounds"], learning_rate=d["learn_rate"], max_leaves=d["max_leaves"],
                  n_quantiles=d["n_quantiles"])
        est.base_score_ = d["base_score"]
        est.trees_ = d["trees"]
        return est


class BoostedStumpsRegressor(RegressorMixin, _BoostedStumps):
    _loss = "squared"

    def predict(self, X):
        return self._raw(X)


class BoostedStumpsClassifier(ClassifierMixin, _BoostedStumps):
    _loss = "log"

    def fit(self, X, y, sample_weight=None):
        super().fit(X, y, sample_weight)
        self.classes_ = np.array([0.0, 1.0])
        return self

    def predict_proba(self, X):
        p1 = expit(self._raw(X))
        return np.column_stack([1 - p1, p1])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] > 0.5).astype(float)


_FROM_DICT = {
    "ridge": RidgeRegression,
    "logistic": PenalizedLogisticRegression,
    "knn": KNNRegressor,
    "knn_classifier": KNNClassifier,
    "boosted_stumps": BoostedStumpsRegressor,
    "boosted_stumps_classifier": BoostedStumpsClassifier,
}


def learner_from_dict(d: dict):
    """Rebuild a fitted learner from its ``to_dict`` descriptor."""
    try:
        cls = _FROM_DICT[d["kind"]]
    except KeyError:
        raise ValueError(f"unknown learner descriptor kind {d.get('kind')!r}") from None
    return cls.from_dict(d)


@dataclass(frozen=True)
class LearnerSpec:
    """Tagged learner description, as it appears in experiment configs.

    ``{"kind": "ridge", "lambda": 1e-3, "features": {"kind": "piecewise_bins", "k": 64}}``
    """

    kind: str = "ridge"
    lam: float = 1e-3
    features: FeatureMap = field(default_factory=FeatureMap)
    k: int = 10
    rounds: int = 100
    learn_rate: float = 0.1
    max_leaves: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("ridge", "logistic", "knn", "boosted_stumps"):
            raise ValueError(f"unknown learner kind {self.kind!r}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not isinstance(self.features, FeatureMap):
            object.__setattr__(self, "features", FeatureMap.from_dict(self.features))

    def with_features(self, features: FeatureMap) -> "LearnerSpec":
        return replace(self, features=features)

    def make_regressor(self):
        if self.kind == "ridge":
            return RidgeRegression(alpha=self.lam, features=self.features)
        if self.kind == "knn":
            return KNNRegressor(k=self.k)
        if self.kind == "boosted_stumps":
            return BoostedStumpsRegressor(rounds=self.rounds, learning_rate=self.learn_rate,
                                          max_leaves=self.max_leaves)
        raise ValueError("logistic spec cannot be used for regression")

    def make_classifier(self):
        if self.kind == "logistic":
            return PenalizedLogisticRegression(alpha=self.lam, features=self.features)
        if self.kind == "knn":
            return KNNClassifier(k=self.k)
        if self.kind == "boosted_stumps":
            return BoostedStumpsClassifier(rounds=self.rounds, learning_rate=self.learn_rate,
                                           max_leaves=self.max_leaves)
        # ridge: linear probability model, clipped by the caller
        return RidgeRegression(alpha=self.lam, features=self.features)

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind in ("ridge", "logistic"):
            out.update({"lambda": self.lam, "features": self.features.to_dict()})
        elif self.kind == "knn":
            out["k"] = self.k
        else:
            out.update(rounds=self.rounds, learn_rate=self.learn_rate, max_leaves=self.max_leaves)
        out["seed"] = self.seed
        return out

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "LearnerSpec":
        if d is None:
            return cls()
        if isinstance(d, LearnerSpec):
            return d
        d = dict(d)
        allowed = {"kind", "lambda", "features", "k", "rounds", "learn_rate", "max_leaves", "seed"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown learner keys {sorted(unknown)}")
        return cls(
            kind=d.get("kind", "ridge"),
            lam=float(d.get("lambda", 1e-3)),
            features=FeatureMap.from_dict(d.get("features")),
            k=int(d.get("k", 10)),
            rounds=int(d.get("rounds", 100)),
            learn_rate=float(d.get("learn_rate", 0.1)),
            max_leaves=int(d.get("max_leaves", 2)),
            seed=int(d.get("seed", 0)),
        )
