import json
import math

import numpy as np
import pandas as pd
import pytest

from drcosarc.cli import main as cli_main
from drcosarc.core import write_dataset_csv
from drcosarc.experiment import (
    ConfigError,
    ExperimentConfig,
    RESULT_COLUMNS,
    predict_lpbs,
    run_experiment,
)
from drcosarc.models import LognormalAFTModel, model_to_dict
from drcosarc.streams import SeedSpec
from drcosarc.synthdata import apply_right_censoring, generate_latent, get_setting


def small_config(**overrides):
    base = dict(
        setting=5,
        n_train=200,
        n_cal=150,
        n_test=300,
        surv_family="aft",
        cens_family="km",
        methods=("oracle", "uncalibrated", "drcosarc-adaptive"),
        alpha=0.1,
        reps=2,
        root_seed=123,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


class TestConfigValidation:
    def test_requires_exactly_one_source(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(setting=None, dataset_path=None)
        with pytest.raises(ConfigError):
            ExperimentConfig(setting=3, dataset_path="x.csv")

    def test_unknown_method(self):
        with pytest.raises(ConfigError, match="unknown methods"):
            small_config(methods=("bogus",))

    def test_oracle_needs_synthetic(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("x1,time,event\n1.0,1.0,1\n")
        with pytest.raises(ConfigError, match="oracle requires"):
            ExperimentConfig(dataset_path=str(path), methods=("oracle",))

    def test_sweep_needs_grid(self):
        with pytest.raises(ConfigError, match="sweep_grid"):
            small_config(sweep_axis="n_cal", sweep_grid=())

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            ExperimentConfig.from_dict({"setting": 3, "bogus_key": 1})


class TestRunExperiment:
    def test_oracle_coverage_window(self):
        config = small_config(setting=3, methods=("oracle",), reps=3, n_test=2000)
        report = run_experiment(config)
        covs = [r["coverage"] for r in report.rows]
        assert len(covs) == 3
        assert 0.88 <= np.mean(covs) <= 0.92
        agg = report.aggregates["None"]["oracle"]
        assert agg["normalized_lpb"]["mean"] == pytest.approx(1.0)

    def test_determinism_modulo_runtime(self):
        config = small_config()
        rows_a = run_experiment(config).rows
        rows_b = run_experiment(config).rows
        strip = lambda rows: [{k: v for k, v in r.items() if k != "runtime_ms"}
                              for r in rows]
        assert strip(rows_a) == strip(rows_b)

    def test_every_cell_appears_once(self):
        config = small_config(sweep_axis="n_cal", sweep_grid=(50, 150))
        report = run_experiment(config)
        keys = [(r["grid_value"], r["rep"], r["method"]) for r in report.rows]
        assert len(keys) == len(set(keys))
        assert len(keys) == 2 * 2 * 3  # grid x reps x methods

    def test_sandwich_columns_on_synthetic(self):
        report = run_experiment(small_config())
        for row in report.rows:
            assert row["cov_low"] - 1e-12 <= row["coverage"] <= row["cov_upp"] + 1e-12
            assert row["cov_low"] <= row["cov_mid"] <= row["cov_upp"]

    def test_real_data_rows_have_bounds_only(self, tmp_path):
        setting = get_setting(5)
        obs = apply_right_censoring(
            generate_latent(setting, 400, SeedSpec(1).stream(0, "real")))
        path = tmp_path / "real.csv"
        write_dataset_csv(obs, path)
        config = ExperimentConfig(dataset_path=str(path),
                                  surv_family="aft", cens_family="km",
                                  methods=("uncalibrated", "drcosarc-adaptive"),
                                  reps=2, root_seed=7)
        report = run_experiment(config)
        assert len(report.rows) == 4
        for row in report.rows:
            assert row["coverage"] is None and row["normalized_lpb"] is None
            assert 0.0 <= row["cov_low"] <= row["cov_mid"] <= row["cov_upp"] <= 1.0

    def test_real_data_all_methods(self, tmp_path):
        setting = get_setting(9)
        obs = apply_right_censoring(
            generate_latent(setting, 500, SeedSpec(2).stream(0, "real9")))
        path = tmp_path / "real9.csv"
        write_dataset_csv(obs, path)
        config = ExperimentConfig(
            dataset_path=str(path), surv_family="aft", cens_family="knn-km",
            methods=("uncalibrated", "naive-cqr", "km-decensor",
                     "drcosarc-fixed", "drcosarc-adaptive"),
            reps=2, root_seed=4,
        )
        report = run_experiment(config)
        assert not report.failures
        assert len(report.rows) == 10
        assert all(0.0 <= r["cov_mid"] <= 1.0 for r in report.rows)

    def test_failures_recorded_and_excluded(self, tmp_path):
        # all-censored data: survival-model fitting cannot succeed
        x = np.linspace(0, 1, 40).reshape(-1, 1)
        t = np.linspace(1, 2, 40)
        frame = pd.DataFrame({"x1": x[:, 0], "time": t, "event": 0})
        path = tmp_path / "allcens.csv"
        frame.to_csv(path, index=False)
        config = ExperimentConfig(dataset_path=str(path), surv_family="aft",
                                  cens_family="km", methods=("uncalibrated",),
                                  reps=2, root_seed=3)
        report = run_experiment(config)
        assert report.rows == []
        assert len(report.failures) == 2

    def test_keep_method_results(self):
        config = small_config(methods=("drcosarc-adaptive",), reps=1,
                              keep_method_results=True)
        report = run_experiment(config)
        assert len(report.method_results) == 1
        kept = report.method_results[0]
        lpbs = kept["result"].lpbs
        assert np.all(lpbs <= kept["q_alpha_test"] + 1e-12)

    def test_dr_active_fraction_reported(self):
        report = run_experiment(small_config(methods=("drcosarc-adaptive",), reps=1))
        frac = report.rows[0]["dr_active_frac"]
        assert frac is not None and 0.0 <= frac <= 1.0


class TestGoldenSchema:
    def test_results_csv_schema(self, tmp_path):
        report = run_experiment(small_config(reps=1))
        out = tmp_path / "results.csv"
        report.to_results_csv(out)
        frame = pd.read_csv(out)
        assert list(frame.columns) == RESULT_COLUMNS
        golden = pd.read_csv("tests/data/golden_results.csv")
        drop = ["runtime_ms"]
        pd.testing.assert_frame_equal(
            frame.drop(columns=drop), golden.drop(columns=drop),
            check_exact=False, rtol=1e-12, atol=1e-12,
        )


class TestPredict:
    def test_uncalibrated_analytic(self):
        from drcosarc.core import Dataset

        model = LognormalAFTModel(0.0, [0.0], 1.0)
        data = Dataset([[1.0], [2.0]], [1.0, 1.0], [1, 0])
        lpbs = predict_lpbs("uncalibrated", data, 0.1, 0, surv=model)
        np.testing.assert_allclose(lpbs, math.exp(-1.2815515655446004), rtol=1e-12)

    def test_oracle_requires_setting(self):
        from drcosarc.core import Dataset

        data = Dataset([[1.0]], [1.0], [1])
        with pytest.raises(ConfigError, match="oracle requires a synthetic setting"):
            predict_lpbs("oracle", data, 0.1, 0)

    def test_adaptive_below_uncalibrated(self):
        setting = get_setting(5)
        spec = SeedSpec(9)
        train = apply_right_censoring(generate_latent(setting, 300, spec.stream(0, "tr")))
        cal = apply_right_censoring(generate_latent(setting, 200, spec.stream(0, "ca")))
        test = apply_right_censoring(generate_latent(setting, 50, spec.stream(0, "te")))
        from drcosarc.models import fit_model

        surv = fit_model(train, "aft", target="survival")
        cens = fit_model(train, "km", target="censoring")
        adaptive = predict_lpbs("drcosarc-adaptive", test, 0.1, 0, surv=surv,
                                cens=cens, calibration=cal)
        raw = predict_lpbs("uncalibrated", test, 0.1, 0, surv=surv)
        assert np.all(adaptive <= raw + 1e-12)

    def test_dimension_mismatch(self):
        from drcosarc.core import Dataset

        model = LognormalAFTModel(0.0, [0.0, 0.5], 1.0)
        data = Dataset([[1.0]], [1.0], [1])
        with pytest.raises(ConfigError, match="covariates"):
            predict_lpbs("uncalibrated", data, 0.1, 0, surv=model)


class TestCli:
    def test_simulate_fit_impute_predict_roundtrip(self, tmp_path):
        obs = tmp_path / "obs.csv"
        assert cli_main(["simulate", "--setting", "5", "--n", "300",
                         "--seed", "3", "--out", str(obs),
                         "--latent-out", str(tmp_path / "latent.csv")]) == 0
        model_path = tmp_path / "surv.json"
        assert cli_main(["fit", "--data", str(obs), "--family", "aft",
                         "--out", str(model_path)]) == 0
        cens_path = tmp_path / "cens.json"
        assert cli_main(["fit", "--data", str(obs), "--family", "km",
                         "--target", "censoring", "--out", str(cens_path)]) == 0
        imputed_path = tmp_path / "imputed.csv"
        assert cli_main(["impute", "--data", str(obs), "--cens-model",
                         str(cens_path), "--out", str(imputed_path)]) == 0
        header = imputed_path.read_text().splitlines()[0]
        assert header == "x1,time,c_hat"
        pred_path = tmp_path / "lpb.csv"
        assert cli_main(["predict", "--data", str(obs), "--method",
                         "drcosarc-adaptive", "--surv-model", str(model_path),
                         "--cens-model", str(cens_path), "--calibration", str(obs),
                         "--out", str(pred_path)]) == 0
        frame = pd.read_csv(pred_path)
        assert list(frame.columns) == ["row_id", "lpb"]
        assert len(frame) == 300

    def test_predict_uncalibrated_constant_model(self, tmp_path):
        model_path = tmp_path / "m.json"
        model_path.write_text(json.dumps(model_to_dict(LognormalAFTModel(0.0, [0.0], 1.0))))
        data_path = tmp_path / "d.csv"
        data_path.write_text("x1,time,event\n0.3,1.0,1\n0.7,2.0,0\n")
        out = tmp_path / "o.csv"
        assert cli_main(["predict", "--data", str(data_path), "--method",
                         "uncalibrated", "--surv-model", str(model_path),
                         "--alpha", "0.1", "--out", str(out)]) == 0
        lpbs = pd.read_csv(out)["lpb"]
        np.testing.assert_allclose(lpbs, 0.27760624, atol=1e-6)

    def test_predict_oracle_without_setting_is_config_error(self, tmp_path, capsys):
        data_path = tmp_path / "d.csv"
        data_path.write_text("x1,time,event\n0.3,1.0,1\n")
        code = cli_main(["predict", "--data", str(data_path), "--method", "oracle",
                         "--out", str(tmp_path / "o.csv")])
        assert code == 2
        assert "oracle requires a synthetic setting" in capsys.readouterr().err

    def test_experiment_and_report_commands(self, tmp_path):
        config = {
            "setting": 5, "n_train": 150, "n_cal": 100, "n_test": 150,
            "surv_family": "aft", "cens_family": "km",
            "methods": ["oracle", "uncalibrated"], "reps": 2, "root_seed": 11,
        }
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(config))
        results = tmp_path / "results.csv"
        summary = tmp_path / "summary.json"
        assert cli_main(["experiment", "--config", str(cfg_path),
                         "--results", str(results), "--summary", str(summary)]) == 0
        frame = pd.read_csv(results)
        assert len(frame) == 4
        doc = json.loads(summary.read_text())
        assert doc["n_failures"] == 0
        assert "oracle" in doc["aggregates"]["None"]
        report_out = tmp_path / "agg.json"
        assert cli_main(["report", "--results", str(results),
                         "--out", str(report_out)]) == 0
        agg = json.loads(report_out.read_text())
        assert agg["n_rows"] == 4

    def test_experiment_flags_without_config(self, tmp_path):
        results = tmp_path / "r.csv"
        code = cli_main(["experiment", "--setting", "5", "--methods", "oracle",
                         "--reps", "1", "--n-train", "100", "--n-cal", "100",
                         "--n-test", "200", "--seed", "5",
                         "--results", str(results),
                         "--summary", str(tmp_path / "s.json")])
        assert code == 0
        assert len(pd.read_csv(results)) == 1

    def test_flags_override_config(self, tmp_path):
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps({
            "setting": 5, "methods": ["oracle"], "reps": 3,
            "n_train": 100, "n_cal": 100, "n_test": 100,
        }))
        results = tmp_path / "r.csv"
        code = cli_main(["experiment", "--config", str(cfg_path), "--reps", "1",
                         "--results", str(results),
                         "--summary", str(tmp_path / "s.json")])
        assert code == 0
        assert len(pd.read_csv(results)) == 1

    def test_dump_imputed_flag(self, tmp_path):
        code = cli_main(["experiment", "--setting", "5", "--methods",
                         "drcosarc-adaptive", "--reps", "1", "--n-train", "150",
                         "--n-cal", "100", "--n-test", "100",
                         "--surv-family", "aft", "--cens-family", "km",
                         "--results", str(tmp_path / "r.csv"),
                         "--summary", str(tmp_path / "s.json"),
                         "--dump-imputed", str(tmp_path / "imp.csv")])
        assert code == 0
        header = (tmp_path / "imp.csv").read_text().splitlines()[0]
        assert header == "x1,time,c_hat"

    def test_bad_config_exit_code(self, tmp_path, capsys):
        cfg_path = tmp_path / "bad.json"
        cfg_path.write_text(json.dumps({"setting": 99}))
        assert cli_main(["experiment", "--config", str(cfg_path)]) == 2
        assert "config error" in capsys.readouterr().err

    def test_fit_failure_exit_code(self, tmp_path):
        frame = pd.DataFrame({"x1": np.linspace(0, 1, 30),
                              "time": np.linspace(1, 2, 30), "event": 0})
        data_path = tmp_path / "allcens.csv"
        frame.to_csv(data_path, index=False)
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps({
            "dataset_path": str(data_path), "surv_family": "aft",
            "cens_family": "km", "methods": ["uncalibrated"], "reps": 2,
        }))
        code = cli_main(["experiment", "--config", str(cfg_path),
                         "--results", str(tmp_path / "r.csv"),
                         "--summary", str(tmp_path / "s.json")])
        assert code == 3
