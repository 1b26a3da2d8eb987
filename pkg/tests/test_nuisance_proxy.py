import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causal_qagg.learners import LearnerSpec
from causal_qagg.nuisance import (IvNuisancePack, NuisancePack, OutcomeRegression, PropensityModel,
                                  clip_beta, fit_iv_nuisances, fit_outcome_regression, fit_propensity,
                                  riesz_from_propensity)
from causal_qagg.proxy import (ProxyLabels, bias_oracle, dr_labels, ipw_labels, iv_labels,
                               iv_labels_residualized)
from causal_qagg.simlab import DgpSpec, generate_dgp, generate_iv_dgp
from causal_qagg.tabular import Dataset, FeatureMap

SPEC = LearnerSpec("ridge", lam=1e-6, features=FeatureMap("piecewise_bins", bins=4))


def _obs(n=400, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.random((n, 1))
    d = (rng.random(n) < 0.3 + 0.4 * x[:, 0]).astype(float)
    y = x[:, 0] + 0.5 * d + 0.1 * rng.normal(size=n)
    return Dataset(x, d, y)


class TestNuisances:
    def test_propensity_clipped_at_boundary(self):
        data = Dataset(np.random.default_rng(0).random((30, 1)), np.ones(30), np.zeros(30))
        p = fit_propensity(data, np.arange(30), LearnerSpec("logistic", lam=0.1), clip_eps=0.01)
        np.testing.assert_allclose(p(np.linspace(0, 1, 5).reshape(-1, 1)), 0.99)

    @given(eps=st.floats(0.001, 0.49), seed=st.integers(0, 1000))
    @settings(max_examples=25, deadline=None)
    def test_propensity_range_property(self, eps, seed):
        data = _obs(60, seed)
        p = PropensityModel(LearnerSpec("ridge", lam=1e-3), eps).fit(data.x, data.treat)
        out = p.predict(np.linspace(-5, 5, 50).reshape(-1, 1))
        assert np.all(out >= eps) and np.all(out <= 1 - eps)

    def test_outcome_regression_additive_design(self):
        data = _obs()
        h = fit_outcome_regression(data, np.arange(data.n), SPEC)
        x = np.array([[0.1], [0.9]])
        # additive treatment column: constant contrast across x
        diff = h.predict(x, np.ones(2)) - h.predict(x, np.zeros(2))
        assert diff[0] == pytest.approx(diff[1])
        assert diff[0] == pytest.approx(0.5, abs=0.05)
        assert np.array_equal(h(1.0, x), h.predict(x, np.ones(2)))

    def test_outcome_needs_both_arms(self):
        data = Dataset(np.zeros((4, 1)), np.zeros(4), np.ones(4))
        with pytest.raises(ValueError):
            fit_outcome_regression(data, np.arange(4), SPEC)

    def test_riesz_formula(self):
        a = riesz_from_propensity(lambda x: np.full(len(x), 0.25))
        x = np.zeros((2, 1))
        np.testing.assert_allclose(a(np.array([1.0, 0.0]), x), [4.0, -4.0 / 3.0])

    def test_pack_clips_and_validates(self):
        pack = NuisancePack(lambda d, x: np.zeros(len(x)), lambda x: np.full(len(x), 0.999), 0.05)
        assert pack.p(np.zeros((1, 1)))[0] == pytest.approx(0.95)
        with pytest.raises(ValueError):
            NuisancePack(pack.h_fn, pack.p_fn, 0.5)

    def test_clip_beta(self):
        np.testing.assert_allclose(clip_beta(np.array([0.001, -0.001, 0.0, 0.3, -0.3]), 0.1),
                                   [0.1, -0.1, 0.1, 0.3, -0.3])

    def test_iv_pack_consistency(self):
        pack = IvNuisancePack(lambda x: x[:, 0], lambda x: np.full(len(x), 0.001), None, 0.1)
        x = np.array([[0.5], [2.0]])
        np.testing.assert_allclose(pack.tau_prelim(x) * pack.beta(x), pack.alpha(x))
        with pytest.raises(ValueError):
            pack.pi0(x)

    def test_fit_iv_nuisances_recovers_moments(self):
        sim = generate_iv_dgp(0.6, 20_000, seed=1)
        pack = fit_iv_nuisances(sim.data, np.arange(sim.data.n), SPEC, beta_floor=0.01)
        x = np.array([[0.3], [0.7]])
        np.testing.assert_allclose(pack.beta(x), sim.extras["beta0"](x), atol=0.01)

    def test_fit_iv_requires_instrument(self):
        with pytest.raises(ValueError):
            fit_iv_nuisances(_obs(), np.arange(10), SPEC)


class TestLabels:
    def test_dr_label_hand_computed(self):
        data = Dataset(np.array([[0.0], [0.0]]), [1, 0], [2.0, 1.0])
        pack = NuisancePack(lambda d, x: 0.5 + d, lambda x: np.full(len(x), 0.25), 0.01)
        lab = dr_labels(data, [0, 1], pack)
        # h1 - h0 = 1; a(1) = 4, a(0) = -4/3
        np.testing.assert_allclose(lab.values, [1 + 4 * (2.0 - 1.5), 1 - 4 / 3 * (1.0 - 0.5)])
        assert lab.kind == "dr" and lab.bound_u == pytest.approx(3.0)

    def test_ipw_label(self):
        data = Dataset(np.zeros((2, 1)), [1, 0], [2.0, 3.0])
        lab = ipw_labels(data, [0, 1], lambda x: np.full(len(x), 0.4))
        np.testing.assert_allclose(lab.values, [2.0 / 0.4, -3.0 / 0.6])

    def test_iv_label_hand_computed(self):
        data = Dataset(np.zeros((2, 1)), [1, 0], [2.0, 1.0], instrument=[1, 0], known_propensity=[0.5, 0.5])
        pack = IvNuisancePack(lambda x: np.full(len(x), 0.25), lambda x: np.full(len(x), 0.5), None, 0.1)
        lab = iv_labels(data, [0, 1], pack)
        # tau = 0.5; Z~ = +-0.5
        np.testing.assert_allclose(lab.values, [0.5 + (2 - 0.5) * 0.5 / 0.5, 0.5 + (1.0) * -0.5 / 0.5])

    def test_residualized_iv_unbiased(self):
        sim = generate_iv_dgp(0.5, 200_000, seed=2)
        e = sim.extras
        lab = iv_labels_residualized(sim.data, np.arange(sim.data.n), e["iv_pack"], e["h"], e["r"], e["pi"])
        assert lab.kind == "iv_residualized"
        tau = sim.tau(sim.data.x)
        diff = lab.values - tau
        assert abs(diff.mean()) < 4 * diff.std() / np.sqrt(diff.size)

    def test_labels_reject_nonfinite(self):
        with pytest.raises(ValueError):
            ProxyLabels(np.array([np.inf]), "dr", np.array([0]))
        with pytest.raises(ValueError):
            ProxyLabels(np.array([1.0]), "weird", np.array([0]))

    def test_to_csv(self, tmp_path):
        ProxyLabels(np.array([0.1, 2.0]), "dr", np.array([4, 7])).to_csv(tmp_path / "l.csv")
        assert (tmp_path / "l.csv").read_text().splitlines() == ["index,value,kind", "4,0.10000000000000001,dr",
                                                                  "7,2,dr"]


class TestBiasOracle:
    def test_zero_when_either_exact(self):
        truth = generate_dgp(DgpSpec(3), 10, seed=0).nuisances
        off = NuisancePack(lambda d, x: truth.h(d, x) - 1.0, truth.p, truth.clip_eps)
        rep = bias_oracle(truth, off, np.linspace(0.05, 0.95, 7), mc_draws=500)
        assert np.all(rep.bias == 0)

    def test_matches_closed_form(self):
        truth = NuisancePack(lambda d, x: d * 1.0, lambda x: np.full(len(x), 0.5), 0.01)
        est = NuisancePack(lambda d, x: d * 1.0 + 0.1, lambda x: np.full(len(x), 0.6), 0.01)
        rep = bias_oracle(truth, est, [0.5], mc_draws=200_000, seed=3)
        assert rep.bias[0] == pytest.approx(-0.01 / 0.24, abs=4 * rep.mc_stderr[0] + 1e-12)

    def test_order_independent_seeding(self):
        truth = generate_dgp(DgpSpec(2), 10, seed=0).nuisances
        est = NuisancePack(lambda d, x: truth.h(d, x) + 0.2, lambda x: truth.p(x) + 0.1, 0.01)
        a = bias_oracle(truth, est, [0.1, 0.5], mc_draws=300, seed=9)
        b = bias_oracle(truth, est, [0.1, 0.5, 0.9], mc_draws=300, seed=9)
        np.testing.assert_array_equal(a.bias, b.bias[:2])

    def test_min_draws(self):
        truth = generate_dgp(DgpSpec(2), 10, seed=0).nuisances
        with pytest.raises(ValueError):
            bias_oracle(truth, truth, [0.5], mc_draws=50)
