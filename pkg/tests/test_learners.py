import numpy as np
import pytest
from scipy.optimize import minimize
from sklearn.base import clone

from causal_qagg.learners import (BoostedStumpsClassifier, BoostedStumpsRegressor, KNNClassifier,
                                  KNNRegressor, LearnerSpec, PenalizedLogisticRegression, RidgeRegression,
                                  SingularDesignError, learner_from_dict)
from causal_qagg.tabular import FeatureMap


@pytest.fixture
def reg_data():
    rng = np.random.default_rng(0)
    X = rng.random((80, 2))
    y = 1.0 + 2 * X[:, 0] - X[:, 1] + 0.1 * rng.normal(size=80)
    return X, y


class TestRidge:
    def test_matches_normal_equations(self, reg_data):
        X, y = reg_data
        w = np.random.default_rng(1).uniform(0.5, 2, size=80)
        est = RidgeRegression(alpha=0.3).fit(X, y, sample_weight=w)
        # oracle: unpenalized intercept appended last, normalized weights
        A = np.hstack([X, np.ones((80, 1))])
        wn = w / w.sum()
        P = np.diag([0.3, 0.3, 0.0])
        coef = np.linalg.solve(A.T @ (A * wn[:, None]) + P, A.T @ (wn * y))
        np.testing.assert_allclose(est.coef_, coef, rtol=1e-10)

    def test_alpha_zero_is_ols(self, reg_data):
        X, y = reg_data
        est = RidgeRegression(alpha=0.0).fit(X, y)
        ref = np.linalg.lstsq(np.hstack([X, np.ones((80, 1))]), y, rcond=None)[0]
        np.testing.assert_allclose(est.coef_, ref, atol=1e-10)

    def test_singular_design_raises(self):
        X = np.ones((10, 1))
        with pytest.raises(SingularDesignError):
            RidgeRegression(alpha=0.0).fit(X, np.arange(10.0))
        RidgeRegression(alpha=1e-3).fit(X, np.arange(10.0))

    def test_polynomial_intercept_unpenalized(self):
        X = np.linspace(0, 1, 30).reshape(-1, 1)
        y = np.full(30, 5.0)
        est = RidgeRegression(alpha=100.0, features=FeatureMap("polynomial", degree=2)).fit(X, y)
        np.testing.assert_allclose(est.predict(X), 5.0, atol=1e-8)

    def test_sklearn_api(self, reg_data):
        X, y = reg_data
        est = RidgeRegression(alpha=0.1)
        assert est.get_params()["alpha"] == 0.1
        c = clone(est).set_params(alpha=1e-4).fit(X, y)
        assert c.score(X, y) > 0.9

    def test_roundtrip(self, reg_data):
        X, y = reg_data
        est = RidgeRegression(alpha=0.1, features=FeatureMap("piecewise_bins", bins=5)).fit(X[:, :1], y)
        back = learner_from_dict(est.to_dict())
        np.testing.assert_array_equal(back.predict(X[:, :1]), est.predict(X[:, :1]))


class TestLogistic:
    def test_matches_direct_minimization(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(120, 2))
        y = (rng.random(120) < 1 / (1 + np.exp(-(0.5 + X[:, 0])))).astype(float)
        est = PenalizedLogisticRegression(alpha=0.05).fit(X, y)
        A = np.hstack([X, np.ones((120, 1))])

        def obj(c):
            z = A @ c
            return np.mean(np.logaddexp(0, z) - y * z) + 0.05 * (c[0] ** 2 + c[1] ** 2)

        ref = minimize(obj, np.zeros(3), method="BFGS", options={"gtol": 1e-10}).x
        np.testing.assert_allclose(est.coef_, ref, atol=1e-5)
        p = est.predict_proba(X)
        assert p.shape == (120, 2)
        np.testing.assert_allclose(p.sum(axis=1), 1.0)

    def test_single_class(self):
        X = np.zeros((5, 1))
        with pytest.raises(ValueError):
            PenalizedLogisticRegression(alpha=0.0).fit(X, np.ones(5))
        est = PenalizedLogisticRegression(alpha=0.1).fit(X, np.ones(5))
        assert np.all(est.predict_proba(X)[:, 1] == 1.0)

    def test_roundtrip(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(40, 1))
        y = (X[:, 0] + rng.normal(size=40) > 0).astype(float)
        est = PenalizedLogisticRegression(alpha=0.01).fit(X, y)
        back = learner_from_dict(est.to_dict())
        np.testing.assert_array_equal(back.predict_proba(X), est.predict_proba(X))


class TestKNN:
    def test_brute_force(self):
        rng = np.random.default_rng(4)
        X, Q = rng.random((50, 2)), rng.random((7, 2))
        y = rng.normal(size=50)
        pred = KNNRegressor(k=5).fit(X, y).predict(Q)
        dist = ((Q[:, None, :] - X[None]) ** 2).sum(-1)
        ref = np.array([y[np.argsort(r)[:5]].mean() for r in dist])
        np.testing.assert_allclose(pred, ref)

    def test_k_larger_than_n(self):
        X = np.arange(3.0).reshape(-1, 1)
        assert KNNRegressor(k=10).fit(X, [1.0, 2.0, 3.0]).predict([[0.0]])[0] == pytest.approx(2.0)

    def test_classifier_proba(self):
        X = np.arange(6.0).reshape(-1, 1)
        p = KNNClassifier(k=3).fit(X, [0, 0, 0, 1, 1, 1]).predict_proba([[5.0]])
        assert p[0, 1] == pytest.approx(1.0)


class TestBoostedStumps:
    def test_single_stump_matches_brute_force(self):
        rng = np.random.default_rng(5)
        X = rng.random((60, 2))
        y = np.where(X[:, 1] > 0.4, 1.0, 0.0) + 0.01 * rng.normal(size=60)
        est = BoostedStumpsRegressor(rounds=1, learning_rate=1.0, max_leaves=2, n_quantiles=8).fit(X, y)
        tree = est.trees_[0]
        best = None
        for f in range(2):
            thr = np.unique(np.quantile(X[:, f], np.linspace(0, 1, 10)[1:-1]))
            for t in thr:
                left = X[:, f] <= t
                if left.all() or not left.any():
                    continue
                sse = ((y[left] - y[left].mean()) ** 2).sum() + ((y[~left] - y[~left].mean()) ** 2).sum()
                if best is None or sse < best[0] - 1e-12:
                    best = (sse, f, t)
        assert (tree[0]["f"], tree[0]["t"]) == (best[1], pytest.approx(best[2]))
        pred = est.predict(X)
        left = X[:, best[1]] <= best[2]
        np.testing.assert_allclose(pred[left], y[left].mean(), atol=1e-5)

    def test_more_rounds_reduce_error(self):
        rng = np.random.default_rng(6)
        X = rng.random((200, 1))
        y = np.sin(6 * X[:, 0])
        errs = [np.mean((BoostedStumpsRegressor(rounds=r, max_leaves=4).fit(X, y).predict(X) - y) ** 2)
                for r in (5, 50)]
        assert errs[1] < errs[0]

    def test_classifier_and_roundtrip(self):
        rng = np.random.default_rng(7)
        X = rng.random((150, 1))
        y = (X[:, 0] > 0.5).astype(float)
        est = BoostedStumpsClassifier(rounds=30, learning_rate=0.5).fit(X, y)
        assert np.mean(est.predict(X) == y) > 0.95
        back = learner_from_dict(est.to_dict())
        np.testing.assert_array_equal(back.predict_proba(X), est.predict_proba(X))


class TestLearnerSpec:
    def test_dict_roundtrip(self):
        spec = LearnerSpec.from_dict({"kind": "ridge", "lambda": 1e-3,
                                      "features": {"kind": "piecewise_bins", "k": 64}})
        assert spec.lam == 1e-3 and spec.features.bins == 64
        assert LearnerSpec.from_dict(spec.to_dict()) == spec

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            LearnerSpec.from_dict({"kind": "ridge", "lamda": 1.0})

    def test_factories(self):
        assert isinstance(LearnerSpec("knn", k=3).make_regressor(), KNNRegressor)
        assert isinstance(LearnerSpec("logistic").make_classifier(), PenalizedLogisticRegression)
        with pytest.raises(ValueError):
            LearnerSpec("logistic").make_regressor()
        with pytest.raises(ValueError):
            LearnerSpec("forest")
