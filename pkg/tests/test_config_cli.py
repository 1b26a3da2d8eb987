import json

import numpy as np
import pytest

from causal_qagg import cli
from causal_qagg.config import ConfigError, RunConfig, load_config
from causal_qagg.simlab import DgpSpec, generate_dgp, generate_iv_dgp
from causal_qagg.tabular import write_csv


class TestConfig:
    def test_defaults_echoed(self):
        d = RunConfig().to_dict()
        assert d["nuisance"]["kind"] == "ridge" and d["propensity"]["kind"] == "logistic"
        assert d["qagg"]["nu"] == 0.1 and d["clip_eps"] == 0.01 and d["sigma"] == 0.1
        back = RunConfig.from_dict(d)
        assert back.to_dict() == d and back.config_hash() == RunConfig().config_hash()

    def test_dotted_keys(self):
        cfg = RunConfig.from_dict({"qagg.nu": 0.4, "qagg.solver": "greedy", "nuisance.kind": "knn",
                                   "nuisance.k": 5})
        assert cfg.qagg.nu == 0.4 and cfg.qagg.solver == "greedy"
        assert cfg.nuisance.kind == "knn" and cfg.nuisance.k == 5

    @pytest.mark.parametrize("raw", [{"bogus": 1}, {"qagg": {"mu": 1}}, {"mode": "train"}, {"dgps": [9]},
                                     {"split": [0.5, 0.5, 0.5]}, {"learners": ["Q"]}, {"qagg.nu": 2},
                                     {"mode": "fit"}, {"nuisance": {"kind": "ridge", "lamda": 1}}])
    def test_rejects(self, raw):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(raw)

    def test_hash_ignores_out(self):
        a, b = RunConfig(out="x"), RunConfig(out="y")
        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != RunConfig(seed=1).config_hash()

    def test_yaml_and_relative_data(self, tmp_path):
        (tmp_path / "sub").mkdir()
        p = tmp_path / "sub" / "c.yaml"
        p.write_text("mode: fit\ndata: d.csv\nqagg:\n  nu: 0.5\n")
        cfg = load_config(p)
        assert cfg.data == str((tmp_path / "sub" / "d.csv").resolve())
        assert cfg.qagg.nu == 0.5

    def test_unreadable(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.json")
        (tmp_path / "bad.json").write_text("{")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "bad.json")

    def test_priors_must_name_models(self):
        cfg = RunConfig.from_dict({"qagg": {"priors": {"DR": 1.0, "Nope": 0.5}}})
        with pytest.raises(ConfigError):
            cfg.qagg.to_config(["DR", "T"])


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    write_csv(generate_dgp(DgpSpec(2), 800, seed=4).data, tmp_path / "obs.csv")
    write_csv(generate_iv_dgp(0.5, 800, seed=4).data, tmp_path / "iv.csv")
    return tmp_path


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


class TestCli:
    def test_fit_writes_outputs(self, workdir, capsys):
        cfg = _write(workdir / "c.json", {"data": "obs.csv"})
        assert cli.main(["fit", "--config", cfg, "--out", "o"]) == 0
        fit = json.loads((workdir / "o" / "fit.json").read_text())
        assert fit["fit"]["method"] == "qagg_exact"
        assert len(fit["models"]) == 8 and fit["labels"] == "dr"
        preds = (workdir / "o" / "predictions.csv").read_text().splitlines()
        assert preds[0].startswith("index,tau_hat,S,T")
        assert len(preds) - 1 == fit["split_sizes"][2]
        assert "qagg_exact" in capsys.readouterr().out

    def test_best_equals_qagg_nu_one(self, workdir):
        thetas = {}
        for method, extra in (("best", {}), ("qagg", {"qagg.nu": 1.0, "qagg.beta": 0.0})):
            cfg = _write(workdir / f"{method}.json", {"data": "obs.csv", "method": method, **extra})
            assert cli.main(["fit", "--config", cfg, "--out", method]) == 0
            thetas[method] = json.loads((workdir / method / "fit.json").read_text())["fit"]["theta"]
        assert thetas["best"] == thetas["qagg"]
        assert max(thetas["best"]) == 1.0

    def test_missing_column_exit_2(self, workdir, capsys):
        (workdir / "bad.csv").write_text("x0,y\n0.1,1\n0.2,2\n")
        cfg = _write(workdir / "c.json", {"data": "bad.csv"})
        assert cli.main(["fit", "--config", cfg, "--out", "o"]) == cli.EXIT_INVALID
        assert "'d'" in capsys.readouterr().err

    def test_invalid_config_exit_2(self, workdir, capsys):
        cfg = _write(workdir / "c.json", {"reps": 0})
        assert cli.main(["benchmark", "--config", cfg, "--out", "o"]) == 2
        assert "reps" in capsys.readouterr().err

    def test_iv_fit_needs_instrument(self, workdir, capsys):
        cfg = _write(workdir / "c.json", {"data": "obs.csv"})
        assert cli.main(["iv-fit", "--config", cfg, "--out", "o"]) == 2
        assert "'z'" in capsys.readouterr().err

    def test_iv_fit(self, workdir):
        cfg = _write(workdir / "c.json", {"data": "iv.csv", "method": "greedy"})
        assert cli.main(["iv-fit", "--config", cfg, "--out", "o"]) == 0
        fit = json.loads((workdir / "o" / "fit.json").read_text())
        assert fit["labels"] == "iv" and fit["fit"]["method"] == "qagg_greedy"
        assert [m["name"] for m in fit["models"]][-2:] == ["IV-ratio", "IV-DR"]

    def test_diagnose_fresh_fit(self, workdir, capsys):
        cfg = _write(workdir / "c.json", {"data": "obs.csv"})
        cli.main(["fit", "--config", cfg, "--out", "o"])
        capsys.readouterr()
        assert cli.main(["diagnose", "--fit", "o/fit.json", "--out", "d"]) == 0
        rep = json.loads((workdir / "d" / "diagnostics.json").read_text())
        assert rep["objective_delta"] <= 1e-9
        assert rep["kkt_residual"] <= 1e-6
        assert rep["warnings"] == []
        assert rep["K"] == pytest.approx(np.log(8))
        assert set(rep["model_losses"]) == {"S", "T", "IPW", "X", "DR", "R", "DRX", "DAX"}

    def test_diagnose_vertex_has_zero_variance(self, workdir, capsys):
        cfg = _write(workdir / "c.json", {"data": "obs.csv", "method": "best"})
        cli.main(["fit", "--config", cfg, "--out", "o"])
        capsys.readouterr()
        assert cli.main(["diagnose", "--fit", "o/fit.json"]) == 0
        rep = json.loads(capsys.readouterr().out)
        assert rep["V_n"] == 0.0

    def test_diagnose_rejects_non_simplex(self, workdir, capsys):
        cfg = _write(workdir / "c.json", {"data": "obs.csv"})
        cli.main(["fit", "--config", cfg, "--out", "o"])
        fit = json.loads((workdir / "o" / "fit.json").read_text())
        fit["fit"]["theta"] = [0.5] * 8
        _write(workdir / "edited.json", fit)
        capsys.readouterr()
        assert cli.main(["diagnose", "--fit", "edited.json"]) == 2
        assert "renormalize" in capsys.readouterr().err
        fit["fit"]["theta"] = [-0.5, 1.5] + [0.0] * 6
        _write(workdir / "edited.json", fit)
        assert cli.main(["diagnose", "--fit", "edited.json"]) == 2

    def test_diagnose_stale_warns(self, workdir, capsys):
        cfg = _write(workdir / "c.json", {"data": "obs.csv"})
        cli.main(["fit", "--config", cfg, "--out", "o"])
        other = _write(workdir / "c2.json", {"data": "obs.csv", "clip_eps": 0.02})
        capsys.readouterr()
        assert cli.main(["diagnose", "--fit", "o/fit.json", "--config", other]) == 0
        err = capsys.readouterr().err
        assert "stale" in err

    def test_benchmark_outputs(self, workdir, capsys):
        cfg = _write(workdir / "b.json", {"dgps": [1], "n": 300, "reps": 2})
        assert cli.main(["benchmark", "--config", cfg, "--out", "b", "--jobs", "1", "--seed", "4"]) == 0
        man = json.loads((workdir / "b" / "manifest.json").read_text())
        assert man["version"] and len(man["config_hash"]) == 64
        assert man["config"]["seed"] == 4 and len(man["seeds"]) == 2
        assert {"raw.csv", "aggregate.csv", "table.txt", "failures.csv"} <= set(man["files"])

    def test_replication_failures_exit_3(self, workdir, monkeypatch):
        from causal_qagg.simlab import benchmark

        calls = iter(range(100))

        def flaky(cfg, dgp, rep):
            if next(calls) % 2:
                raise RuntimeError("boom")
            return [{"dgp": dgp, "rep": rep, "method": "S", "rmse": 1.0, "regret": 0.5, "theta_json": ""}]

        monkeypatch.setattr(benchmark, "run_replication", flaky)
        cfg = _write(workdir / "b.json", {"dgps": [1], "n": 300, "reps": 4})
        assert cli.main(["benchmark", "--config", cfg, "--out", "b", "--jobs", "1"]) == 3
        assert len((workdir / "b" / "failures.csv").read_text().splitlines()) == 3

    def test_jobs_env_fallback(self, monkeypatch):
        monkeypatch.setenv("CAUSAL_QAGG_JOBS", "3")
        assert cli._jobs(None) == 3
        assert cli._jobs(2) == 2
        monkeypatch.setenv("CAUSAL_QAGG_JOBS", "x")
        with pytest.raises(ValueError):
            cli._jobs(None)
        with pytest.raises(ValueError):
            cli._jobs(0)

    def test_help_lists_exit_codes(self, capsys):
        with pytest.raises(SystemExit):
            cli.main(["--help"])
        assert "Exit codes" in capsys.readouterr().out
