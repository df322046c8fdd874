import json

import numpy as np
import pytest

from blockfilter import experiment
from blockfilter.experiment import (
    ExperimentConfig,
    ExperimentError,
    ResultTable,
    derive_seed,
    ingest_series,
    moving_average_trend,
    run_experiment,
)

SMALL = dict(n=900, k=3, iters=120, burn_in=60, thin=2, replications=2, base_seed=5)


def write(tmp_path, text, name="series.txt"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestIngest:
    def test_values_in_order(self, tmp_path):
        p = write(tmp_path, "1.5\n-2\n3e-1\n4\n5\n")
        res = ingest_series(p, min_points=1)
        np.testing.assert_array_equal(res.values, [1.5, -2.0, 0.3, 4.0, 5.0])
        assert res.dropped == 0

    def test_header_and_missing(self, tmp_path):
        p = write(tmp_path, "rate\n" + "\n".join(["1", "NA", "", "2", "nan"] + [str(i) for i in range(10)]) + "\n")
        res = ingest_series(p)
        assert res.values.size == 12 and res.dropped == 3

    def test_non_numeric_line_number(self, tmp_path):
        p = write(tmp_path, "y\n" + "1\n" * 12 + "oops\n")
        with pytest.raises(ValueError, match=":14:"):
            ingest_series(p)

    def test_multi_column(self, tmp_path):
        with pytest.raises(ValueError, match="single column"):
            ingest_series(write(tmp_path, "1,2\n" * 12))

    def test_too_short(self, tmp_path):
        with pytest.raises(ValueError, match="usable"):
            ingest_series(write(tmp_path, "1\n2\nNA\n"))

    def test_constant_detrends_to_zero(self, tmp_path):
        res = ingest_series(write(tmp_path, "3.25\n" * 40), detrend="ma:11")
        np.testing.assert_array_equal(res.values, np.zeros(40))

    def test_ramp_detrends_to_zero(self, tmp_path):
        res = ingest_series(write(tmp_path, "\n".join(map(str, range(1, 101)))), detrend=("ma", 11))
        assert np.max(np.abs(res.values[5:-5])) < 1e-9

    def test_moving_average_window_one(self):
        y = np.random.default_rng(0).normal(size=20)
        np.testing.assert_allclose(moving_average_trend(y, 1), y)

    def test_bad_detrend(self, tmp_path):
        with pytest.raises(ValueError, match="detrend"):
            ingest_series(write(tmp_path, "1\n" * 12), detrend="loess:5")


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(replications=0), dict(workers=0), dict(mode="ingest"),
                                    dict(data_path="x.txt"), dict(baselines=["cmc"]), dict(k_policy="sqrt")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ExperimentConfig(**kw)

    def test_yaml_layout(self, tmp_path):
        p = write(tmp_path, """
mode: simulate
model: {S: 2, Q: [[0.9, 0.1], [0.2, 0.8]], mu: [0, 3], sigma: [1, 1]}
n: 500
k_policy: n14
sampler: {iters: 100, burn_in: 50, thin: 1}
combine: {center: mean_of_means, scale: sqrt_average}
em: {restarts: 2}
seed: 4
out: results
""", "cfg.yaml")
        cfg = ExperimentConfig.from_yaml(p)
        assert (cfg.S, cfg.k_policy, cfg.base_seed, cfg.out_dir, cfg.em_restarts) == (2, "n_quarter", 4, "results", 2)
        assert cfg.combine_spec().scale == "sqrt_average"
        np.testing.assert_allclose(cfg.model().sigma2, [1.0, 1.0])
        assert cfg.choose_K(500) == 5

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            ExperimentConfig.from_dict({"n": 10, "colour": "red"})

    def test_seed_derivation_is_positional(self):
        assert derive_seed(0, 1, 2) == derive_seed(0, 1, 2)
        assert len({derive_seed(0, r, k) for r in range(3) for k in range(3)}) == 9


class TestResultTable:
    def test_aggregate_is_exact_mean(self):
        t = ResultTable()
        t.add("BFP", 10, 2, 0, 0.1, 0.7, 1.0)
        t.add("BFP", 10, 2, 1, 0.2, 0.3, 3.0)
        agg = t.get("BFP")
        assert agg["acc_emission"] == np.mean([0.1, 0.2]) and agg["wall_time_s"] == 2.0

    def test_duplicate_key(self):
        t = ResultTable()
        t.add("BFP", 10, 2, 0, 0.1, 0.7, 1.0)
        with pytest.raises(ValueError, match="duplicate"):
            t.add("BFP", 10, 2, 0, 0.5, 0.5, 1.0)


@pytest.fixture(scope="module")
def small_run():
    return run_experiment(ExperimentConfig(**SMALL))


class TestRunExperiment:
    def test_rows(self, small_run):
        methods = {r["method"] for r in small_run.rows}
        assert methods == {"BFP", "DPMC", "PIE", "WASP", "DA"}
        assert len(small_run.rows) == 10 and not small_run.failures
        bfp = small_run.get("BFP", 0)
        assert 0 < bfp["acc_emission"] <= 1 and 0 < bfp["acc_Q"] <= 1

    def test_aggregates(self, small_run):
        for m in ("BFP", "PIE"):
            reps = [small_run.get(m, r)["acc_Q"] for r in (0, 1)]
            assert small_run.get(m)["acc_Q"] == np.mean(reps)

    def test_deterministic_and_worker_independent(self, small_run):
        again = run_experiment(ExperimentConfig(**{**SMALL, "workers": 2}))
        strip = lambda t: [{k: v for k, v in r.items() if k != "wall_time_s"} for r in t.rows]
        assert json.dumps(strip(again), default=str) == json.dumps(strip(small_run), default=str)

    def test_outputs(self, tmp_path):
        run_experiment(ExperimentConfig(**{**SMALL, "replications": 1, "out_dir": str(tmp_path)}), fmt="json")
        assert (tmp_path / "results.csv").read_text().startswith("method,n,K,replication,acc_emission,acc_Q,wall_time_s")
        assert json.loads((tmp_path / "results.json").read_text())["failures"] == []
        names = {p.name for p in (tmp_path / "draws").iterdir()}
        assert {"rep0_subset0.csv", "rep0_subset2.csv", "rep0_BFP.csv", "rep0_DA.csv"} <= names

    def test_failed_replication_is_recorded(self, monkeypatch):
        real = experiment.baum_welch
        calls = []

        def flaky(y, S, cfg):
            calls.append(1)
            if len(calls) == 1:
                raise RuntimeError("boom")
            return real(y, S, cfg)

        monkeypatch.setattr(experiment, "baum_welch", flaky)
        table = run_experiment(ExperimentConfig(**SMALL))
        assert {r["replication"] for r in table.rows} == {1}
        assert table.failures[0]["replication"] == 0 and "boom" in table.failures[0]["error"]

    def test_all_failed(self, monkeypatch):
        def broken(*a, **k):
            raise RuntimeError("nope")

        monkeypatch.setattr(experiment, "baum_welch", broken)
        with pytest.raises(ExperimentError, match="all replications failed"):
            run_experiment(ExperimentConfig(**SMALL))
