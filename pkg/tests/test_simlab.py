import csv

import numpy as np
import pytest

from causal_qagg.config import RunConfig
from causal_qagg.metalearners import CateModel
from causal_qagg.simlab import (DgpSpec, aggregate, evaluate_regret, generate_dgp, generate_iv_dgp,
                                generate_simple_semisynthetic, replication_seeds, rmse, run_benchmark)
from causal_qagg.simlab.benchmark import format_cell


class TestDgps:
    @pytest.mark.parametrize("dgp,x,pi,m,tau", [
        (1, 0.45, 0.05, 0.0, 0.5),
        (2, 0.2, 0.05, 0.0, 0.6),       # closed interval at 0.2
        (2, 0.41, 0.05, 0.0, 0.5),
        (3, 0.3, 0.01, 0.0, 0.045),     # propensity dips on [0.3, 0.6]
        (3, 0.61, 0.5, 0.1, 0.5 * 0.61 ** 2),
        (4, 0.6, 0.01, 0.1, 0.18),      # continuity at 0.6
        (4, 0.9, 0.5, 0.0, 0.18),
        (5, 0.8, 0.05, 0.1, 0.5),
        (6, 0.49, 0.95, 0.1, 0.0),
    ])
    def test_table_values(self, dgp, x, pi, m, tau):
        s = DgpSpec(dgp)
        X = np.array([[x]])
        assert s.pi(X)[0] == pytest.approx(pi)
        assert s.m(X)[0] == pytest.approx(m)
        assert s.tau(X)[0] == pytest.approx(tau)

    def test_dgp4_literal_reading(self):
        s = DgpSpec(4, dgp4_literal=True)
        assert s.tau(np.array([[0.5]]))[0] == pytest.approx(0.125 + 0.18)
        assert s.tau(np.array([[0.9]]))[0] == pytest.approx(0.18)

    def test_generation_deterministic_and_consistent(self):
        a = generate_dgp(DgpSpec(3), 500, seed=7)
        b = generate_dgp(DgpSpec(3), 500, seed=7)
        assert a.data.equals(b.data)
        data, tau, pack = a
        np.testing.assert_array_equal(data.known_propensity, DgpSpec(3).pi(data.x))
        resid = data.y - pack.h(data.treat, data.x)
        assert resid.std() == pytest.approx(0.1, rel=0.15)

    def test_sigma_zero(self):
        sim = generate_dgp(DgpSpec(1, sigma=0.0), 50, seed=0)
        np.testing.assert_allclose(sim.data.y, sim.nuisances.h(sim.data.treat, sim.data.x))

    def test_invalid(self):
        with pytest.raises(ValueError):
            DgpSpec(7)
        with pytest.raises(ValueError):
            DgpSpec(1, sigma=-1)

    def test_semisynthetic(self):
        sim = generate_simple_semisynthetic(5, 300, seed=2)
        assert sim.data.x.shape == (300, 5)
        assert np.count_nonzero(sim.extras["tau_coef"]) == 3
        p = sim.data.known_propensity
        assert p.min() >= 0.1 and p.max() <= 0.9

    def test_iv_dgp_moments(self):
        sim = generate_iv_dgp(0.4, 100_000, seed=3)
        d, z = sim.data.treat, sim.data.instrument
        assert np.all(d <= z)           # one-sided non-compliance
        zt = z - 0.5
        assert np.mean(d * zt) == pytest.approx(sim.extras["beta0"](np.zeros((1, 1)))[0], abs=0.003)
        with pytest.raises(ValueError):
            generate_iv_dgp(0.0, 10)


class TestRegret:
    def test_evaluate(self):
        x = np.linspace(0, 1, 11).reshape(-1, 1)
        truth = lambda xx: xx[:, 0]
        c1 = CateModel("a", lambda xx: xx[:, 0] + 0.1)
        c2 = CateModel("b", lambda xx: xx[:, 0] + 0.3)
        rep = evaluate_regret([("ens", lambda xx: xx[:, 0] + 0.2)], [c1, c2], truth, x)
        assert rep.oracle_name == "a"
        assert rep.regret["a"] == 0 and rep.regret["ens"] == pytest.approx(0.1)
        assert rep.rmse["b"] == pytest.approx(0.3)
        mean = np.mean([0.0, 0.2, 0.1])
        assert rep.normalized["b"] == pytest.approx(0.2 / mean)
        assert rmse([1.0, 3.0], [1.0, 1.0]) == pytest.approx(np.sqrt(2))

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate_regret([], [CateModel("a", lambda x: x[:, 0])], lambda x: x[:, 0], np.zeros((0, 1)))


class TestBenchmark:
    @pytest.fixture(scope="class")
    @staticmethod
    def result():
        return run_benchmark(RunConfig(dgps=(1,), n=2000, reps=5, seed=1))

    def test_row_count(self, result):
        assert len(result.rows) == 5 * 11
        assert not result.failures and not result.aborted

    def test_aggregate_recomputes_from_raw(self, result, tmp_path):
        paths = result.write(tmp_path)
        with open(paths["raw"]) as fh:
            raw = list(csv.DictReader(fh))
        with open(paths["aggregate"]) as fh:
            agg = list(csv.DictReader(fh))
        for row in agg:
            sel = [float(r["regret"]) for r in raw if r["method"] == row["method"]
                   and (row["dgp"] == "ALL" or r["dgp"] == row["dgp"])]
            assert float(row["mean"]) == pytest.approx(np.mean(sel), rel=1e-12)
            assert float(row["median"]) == pytest.approx(np.median(sel), rel=1e-12)
            assert float(row["p95"]) == pytest.approx(np.percentile(sel, 95), rel=1e-12)
            assert float(row["std"]) == pytest.approx(np.std(sel, ddof=1), rel=1e-12)
        assert "±" in paths["table"].read_text()

    def test_normalization_mean_is_one(self, result):
        assert np.mean([r["normalized_regret"] for r in result.rows]) == pytest.approx(1.0)

    def test_theta_only_for_ensembles(self, result):
        for r in result.rows:
            assert bool(r["theta_json"]) == (r["method"] in ("Best", "Convex", "Q"))

    def test_seeds(self):
        assert replication_seeds(0, 1, 2) == replication_seeds(0, 1, 2)
        assert replication_seeds(0, 1, 2) != replication_seeds(0, 2, 1)

    def test_parallel_equals_serial(self):
        cfg = RunConfig(dgps=(2, 5), n=300, reps=2, seed=3)
        assert run_benchmark(cfg, jobs=2).rows == run_benchmark(cfg, jobs=1).rows

    def test_no_split_runs(self):
        res = run_benchmark(RunConfig(dgps=(3,), n=300, reps=1, no_split=True))
        assert len(res.rows) == 11

    def test_format_cell(self):
        a = {"mean": 0.1234, "std": 0.01, "median": 0.12, "p95": 0.2}
        assert format_cell(a) == "[0.123 ± 0.010] 0.120 (0.200)"

    def test_aggregate_pooled_rows(self):
        rows = [{"dgp": g, "rep": 0, "method": m, "regret": v, "normalized_regret": v * g}
                for g in (1, 2) for m, v in (("A", 1.0), ("B", 3.0))]
        pooled = {a["method"]: a for a in aggregate(rows) if a["dgp"] == "ALL"}
        assert pooled["A"]["mean_normalized"] == pytest.approx(1.5)
        assert pooled["B"]["mean"] == pytest.approx(3.0)
