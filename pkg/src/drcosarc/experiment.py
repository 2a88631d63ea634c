"""End-to-end experiment driver: simulate/ingest, fit, impute, calibrate,
evaluate, aggregate.

One repetition generates (or splits) data, fits the survival and censoring
models, imputes the calibration set, runs every configured method on the
test covariates, and records metrics.  Per-repetition randomness is keyed by
(root seed, repetition, stage), so repetitions are order-independent and
adding a method never changes another method's numbers.
"""

from __future__ import annotations

import json
import time as _time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import __version__
from .baselines import (
    km_decensor_lpb_batch,
    naive_cqr_lpb_batch,
    oracle_lpb_batch,
    uncalibrated_lpb_batch,
)
from .conformal import (
    DEFAULT_WEIGHT_FLOOR,
    default_cutoff,
    drcosarc_adaptive_batch,
    drcosarc_fixed_batch,
)
from .core import Dataset, read_dataset_csv
from .impute import impute_dataset
from .metrics import (
    MethodResult,
    coverage,
    coverage_bounds,
    mean_and_two_se,
    normalized_lpb,
)
from .models import FitConvergenceError, fit_model
from .streams import SeedSpec
from .synthdata import apply_right_censoring, generate_latent, get_setting

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ExperimentReport",
    "run_experiment",
    "predict_lpbs",
    "stability_study",
    "METHODS",
    "SWEEP_AXES",
    "RESULT_COLUMNS",
]

METHODS = (
    "oracle",
    "uncalibrated",
    "naive-cqr",
    "km-decensor",
    "drcosarc-fixed",
    "drcosarc-adaptive",
)
SWEEP_AXES = ("censoring-train-size", "total-train-size", "p1", "n_cal")
MODEL_FAMILIES = ("km", "aft", "cox", "knn-km")

RESULT_COLUMNS = [
    "source", "sweep_axis", "grid_value", "rep", "method",
    "coverage", "cov_low", "cov_mid", "cov_upp",
    "normalized_lpb", "mean_lpb", "dr_active_frac", "runtime_ms",
]


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


@dataclass
class ExperimentConfig:
    """Declarative description of one experiment (possibly a sweep)."""

    setting: int | None = None
    dataset_path: str | None = None
    n_train: int = 1000
    n_cal: int = 1000
    n_test: int = 1000
    surv_family: str = "aft"
    surv_options: dict = field(default_factory=dict)
    cens_family: str = "knn-km"
    cens_mask: int | None = None
    cens_options: dict = field(default_factory=dict)
    methods: tuple = ("drcosarc-adaptive",)
    alpha: float = 0.1
    reps: int = 1
    root_seed: int = 0
    sweep_axis: str | None = None
    sweep_grid: tuple = ()
    train_frac: float = 0.6
    cal_frac: float = 0.2
    candidate_family: str = "quantile"
    weight_floor: float = DEFAULT_WEIGHT_FLOOR
    max_failure_frac: float = 0.2
    keep_method_results: bool = False

    def __post_init__(self):
        self.methods = tuple(self.methods)
        self.sweep_grid = tuple(self.sweep_grid)
        if (self.setting is None) == (self.dataset_path is None):
            raise ConfigError("exactly one of setting / dataset_path is required")
        if self.setting is not None:
            try:
                get_setting(self.setting)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}; valid: {list(METHODS)}")
        if not self.methods:
            raise ConfigError("at least one method is required")
        if self.dataset_path is not None and "oracle" in self.methods:
            raise ConfigError("oracle requires a synthetic setting")
        if self.surv_family not in MODEL_FAMILIES or self.cens_family not in MODEL_FAMILIES:
            raise ConfigError(f"model families must be one of {list(MODEL_FAMILIES)}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.reps < 1:
            raise ConfigError("reps must be at least 1")
        if self.sweep_axis is not None:
            if self.sweep_axis not in SWEEP_AXES:
                raise ConfigError(f"unknown sweep axis {self.sweep_axis!r}")
            if not self.sweep_grid:
                raise ConfigError("sweep_axis requires a nonempty sweep_grid")
        if self.cens_mask is not None and self.cens_mask < 1:
            raise ConfigError("cens_mask (p1) must be a positive covariate count")
        if not 0 < self.train_frac < 1 or not 0 < self.cal_frac < 1 \
                or self.train_frac + self.cal_frac >= 1:
            raise ConfigError("split fractions must be positive and sum below 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**doc)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["methods"] = list(self.methods)
        doc["sweep_grid"] = list(self.sweep_grid)
        return doc


@dataclass
class ExperimentReport:
    """Per-rep result rows plus aggregates and a config echo."""

    config: dict
    rows: list
    aggregates: dict
    failures: list
    version: str = __version__
    method_results: list = field(default_factory=list)

    def to_results_csv(self, path) -> None:
        import pandas as pd

        frame = pd.DataFrame(self.rows, columns=RESULT_COLUMNS)
        frame.to_csv(path, index=False)

    def summary_dict(self) -> dict:
        return {
            "version": self.version,
            "config": self.config,
            "n_rows": len(self.rows),
            "n_failures": len(self.failures),
            "failures": self.failures,
            "aggregates": self.aggregates,
        }

    def to_summary_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary_dict(), fh, indent=2)


def _aggregate(rows) -> dict:
    """Mean and twice the standard error per (grid value, method, metric)."""
    groups: dict = {}
    for row in rows:
        groups.setdefault((row["grid_value"], row["method"]), []).append(row)
    out: dict = {}
    for (gval, method), members in sorted(
        groups.items(), key=lambda kv: (str(kv[0][0]), kv[0][1])
    ):
        entry: dict = {"n_reps": len(members)}
        for metric in ("coverage", "cov_low", "cov_mid", "cov_upp",
                       "normalized_lpb", "mean_lpb", "dr_active_frac"):
            values = [m[metric] for m in members if m[metric] is not None]
            if values:
                mean, two_se = mean_and_two_se(values)
                entry[metric] = {"mean": mean, "two_se": two_se}
        out.setdefault(str(gval), {})[method] = entry
    return out


def _resolve_sizes(config: ExperimentConfig, grid_value):
    """Apply the sweep axis to the default sizes/mask for one grid point."""
    n_surv_train = config.n_train
    n_cens_train = config.n_train
    p1 = config.cens_mask
    n_cal = config.n_cal
    axis = config.sweep_axis
    if axis == "censoring-train-size":
        n_cens_train = int(grid_value)
    elif axis == "total-train-size":
        n_surv_train = n_cens_train = int(grid_value)
    elif axis == "p1":
        p1 = int(grid_value)
    elif axis == "n_cal":
        n_cal = int(grid_value)
    return n_surv_train, n_cens_train, p1, n_cal


def _split_real(data: Dataset, config: ExperimentConfig, stream):
    perm = stream.permutation(data.n)
    n_train = int(round(config.train_frac * data.n))
    n_cal = int(round(config.cal_frac * data.n))
    idx_train = perm[:n_train]
    idx_cal = perm[n_train:n_train + n_cal]
    idx_test = perm[n_train + n_cal:]
    return data.subset(idx_train), data.subset(idx_cal), data.subset(idx_test)


def _run_methods(config, setting, surv, cens, imputed, cal_obs, c0,
                 X_test, spec, rep):
    """Evaluate every configured method on the test covariates."""
    out = []
    for method in config.methods:
        t0 = _time.perf_counter()
        dr_active = None
        if method == "oracle":
            lpbs = oracle_lpb_batch(setting, config.alpha, X_test)
        elif method == "uncalibrated":
            lpbs = np.maximum(uncalibrated_lpb_batch(surv, config.alpha, X_test), 0.0)
        elif method == "naive-cqr":
            lpbs = naive_cqr_lpb_batch(cal_obs, surv, config.alpha, X_test)
        elif method == "km-decensor":
            lpbs = km_decensor_lpb_batch(
                cal_obs, surv, config.alpha, X_test, spec.stream(rep, "km-decensor")
            )
        elif method == "drcosarc-fixed":
            lpbs, info = drcosarc_fixed_batch(
                imputed, surv, cens, config.alpha, c0, X_test,
                weight_floor=config.weight_floor,
            )
            dr_active = info["dr_active_frac"]
        elif method == "drcosarc-adaptive":
            lpbs, info = drcosarc_adaptive_batch(
                imputed, surv, cens, config.alpha, X_test,
                family=config.candidate_family, weight_floor=config.weight_floor,
            )
            dr_active = info["dr_active_frac"]
        else:  # pragma: no cover - guarded by config validation
            raise ConfigError(f"unknown method {method!r}")
        runtime_ms = 1000.0 * (_time.perf_counter() - t0)
        out.append(MethodResult(method=method, lpbs=lpbs, seed=(config.root_seed, rep),
                                diagnostics={"dr_active_frac": dr_active},
                                runtime_ms=runtime_ms))
    return out


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Run every (grid point, repetition, method) cell and aggregate."""
    spec = SeedSpec(config.root_seed)
    setting = get_setting(config.setting) if config.setting is not None else None
    real_data = read_dataset_csv(config.dataset_path) if config.dataset_path else None

    rows: list = []
    failures: list = []
    kept: list = []
    grid = config.sweep_grid if config.sweep_axis else (None,)

    for grid_value in grid:
        n_surv_train, n_cens_train, p1, n_cal = _resolve_sizes(config, grid_value)
        for rep in range(config.reps):
            try:
                if setting is not None:
                    train_lat = generate_latent(setting, config.n_train,
                                                spec.stream(rep, "generate-train"))
                    cal_lat = generate_latent(setting, config.n_cal,
                                              spec.stream(rep, "generate-cal"))
                    test_lat = generate_latent(setting, config.n_test,
                                               spec.stream(rep, "generate-test"))
                    train_obs = apply_right_censoring(train_lat)
                    cal_obs = apply_right_censoring(cal_lat)
                    test_obs = apply_right_censoring(test_lat)
                    t_true = test_lat.t
                else:
                    train_obs, cal_obs, test_obs = _split_real(
                        real_data, config, spec.stream(rep, "split")
                    )
                    t_true = None

                surv_train = (train_obs.subset(np.arange(n_surv_train))
                              if n_surv_train < train_obs.n else train_obs)
                cens_train = (train_obs.subset(np.arange(n_cens_train))
                              if n_cens_train < train_obs.n else train_obs)
                cal_use = (cal_obs.subset(np.arange(n_cal))
                           if n_cal < cal_obs.n else cal_obs)

                needs_surv = any(m != "oracle" for m in config.methods)
                needs_cens = any(m.startswith("drcosarc") for m in config.methods)
                surv = (fit_model(surv_train, config.surv_family,
                                  target="survival", **config.surv_options)
                        if needs_surv else None)
                cens = (fit_model(cens_train, config.cens_family,
                                  target="censoring", mask=p1, **config.cens_options)
                        if needs_cens else None)
                imputed = (impute_dataset(cal_use, cens, spec.stream(rep, "impute"))
                           if needs_cens else None)
                c0 = (default_cutoff(surv_train)
                      if "drcosarc-fixed" in config.methods else None)

                results = _run_methods(config, setting, surv, cens, imputed,
                                       cal_use, c0, test_obs.x, spec, rep)
            except (FitConvergenceError, ValueError) as exc:
                failures.append({"grid_value": grid_value, "rep": rep,
                                 "error": f"{type(exc).__name__}: {exc}"})
                continue

            oracle_ref = (oracle_lpb_batch(setting, config.alpha, test_obs.x)
                          if setting is not None else None)
            for res in results:
                bounds = coverage_bounds(res.lpbs, test_obs.time, test_obs.event)
                row = {
                    "source": f"setting-{setting.id}" if setting else config.dataset_path,
                    "sweep_axis": config.sweep_axis,
                    "grid_value": grid_value,
                    "rep": rep,
                    "method": res.method,
                    "coverage": coverage(res.lpbs, t_true) if t_true is not None else None,
                    "cov_low": bounds.low,
                    "cov_mid": bounds.mid,
                    "cov_upp": bounds.upp,
                    "normalized_lpb": (normalized_lpb(res.lpbs, oracle_ref)
                                       if oracle_ref is not None else None),
                    "mean_lpb": float(res.lpbs.mean()),
                    "dr_active_frac": res.diagnostics.get("dr_active_frac"),
                    "runtime_ms": res.runtime_ms,
                }
                rows.append(row)
                if config.keep_method_results:
                    q_ref = (np.asarray(surv.quantile_rows(test_obs.x, config.alpha),
                                        dtype=float) if surv is not None else None)
                    kept.append({"grid_value": grid_value, "rep": rep, "result": res,
                                 "q_alpha_test": q_ref, "t_true": t_true})

    return ExperimentReport(config=config.to_dict(), rows=rows,
                            aggregates=_aggregate(rows), failures=failures,
                            method_results=kept)


# ---------------------------------------------------------------------------
# Fit/predict split used by the CLI
# ---------------------------------------------------------------------------

def predict_lpbs(method: str, dataset: Dataset, alpha: float, seed: int,
                 surv=None, cens=None, calibration: Dataset | None = None,
                 setting_id: int | None = None,
                 candidate_family: str = "quantile",
                 weight_floor: float = DEFAULT_WEIGHT_FLOOR) -> np.ndarray:
    """One LPB per dataset row for the selected method."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; valid: {list(METHODS)}")
    spec = SeedSpec(seed)
    X = dataset.x
    if method == "oracle":
        if setting_id is None:
            raise ConfigError("oracle requires a synthetic setting")
        return oracle_lpb_batch(get_setting(setting_id), alpha, X)
    if surv is None:
        raise ConfigError(f"method {method!r} requires a survival model")
    dim = _model_dim(surv)
    if surv.mask is None and dim >= 0 and X.shape[1] != dim:
        raise ConfigError(
            f"dataset has {X.shape[1]} covariates but the model expects {dim}"
        )
    if method == "uncalibrated":
        return np.maximum(uncalibrated_lpb_batch(surv, alpha, X), 0.0)
    if calibration is None:
        raise ConfigError(f"method {method!r} requires calibration data")
    if method == "naive-cqr":
        return naive_cqr_lpb_batch(calibration, surv, alpha, X)
    if method == "km-decensor":
        return km_decensor_lpb_batch(calibration, surv, alpha, X,
                                     spec.stream(0, "km-decensor"))
    if cens is None:
        raise ConfigError(f"method {method!r} requires a censoring model")
    imputed = impute_dataset(calibration, cens, spec.stream(0, "impute"))
    if method == "drcosarc-fixed":
        c0 = default_cutoff(calibration)
        lpbs, _ = drcosarc_fixed_batch(imputed, surv, cens, alpha, c0, X,
                                       weight_floor=weight_floor)
        return lpbs
    lpbs, _ = drcosarc_adaptive_batch(imputed, surv, cens, alpha, X,
                                      family=candidate_family,
                                      weight_floor=weight_floor)
    return lpbs


def _model_dim(model) -> int:
    beta = getattr(model, "beta", None)
    if beta is not None:
        return int(np.asarray(beta).size)
    means = getattr(model, "means", None)
    if means is not None:
        return int(np.asarray(means).size)
    return -1  # covariate-free families accept any width


# ---------------------------------------------------------------------------
# Imputation-stability study
# ---------------------------------------------------------------------------

def stability_study(setting_id: int, n_train: int = 1000, n_cal: int = 1000,
                    n_test: int = 100, alpha: float = 0.1,
                    n_imputations: int = 10, dataset_seeds=(0, 1, 2, 3, 4),
                    surv_family: str = "knn-km", cens_family: str = "knn-km",
                    cens_mask: int | None = None, root_seed: int = 2024) -> dict:
    """Coefficient of variation of the bounds across repeated imputations.

    For each dataset seed the data and fitted models are frozen; only the
    imputation draw changes across runs.  Returns per-method CVs averaged
    over dataset seeds.
    """
    from .metrics import stability_cv

    setting = get_setting(setting_id)
    spec = SeedSpec(root_seed)
    per_method: dict[str, list] = {"drcosarc-fixed": [], "drcosarc-adaptive": []}
    for ds in dataset_seeds:
        train_obs = apply_right_censoring(
            generate_latent(setting, n_train, spec.stream(ds, "generate-train")))
        cal_obs = apply_right_censoring(
            generate_latent(setting, n_cal, spec.stream(ds, "generate-cal")))
        test_obs = apply_right_censoring(
            generate_latent(setting, n_test, spec.stream(ds, "generate-test")))
        surv = fit_model(train_obs, surv_family, target="survival")
        cens = fit_model(train_obs, cens_family, target="censoring", mask=cens_mask)
        c0 = default_cutoff(train_obs)
        fixed_rows, adaptive_rows = [], []
        imp_stream = spec.stream(ds, "stability-impute")
        for j in range(n_imputations):
            imputed = impute_dataset(cal_obs, cens, imp_stream.substream(j))
            lpb_f, _ = drcosarc_fixed_batch(imputed, surv, cens, alpha, c0, test_obs.x)
            lpb_a, _ = drcosarc_adaptive_batch(imputed, surv, cens, alpha, test_obs.x)
            fixed_rows.append(lpb_f)
            adaptive_rows.append(lpb_a)
        per_method["drcosarc-fixed"].append(stability_cv(np.vstack(fixed_rows)))
        per_method["drcosarc-adaptive"].append(stability_cv(np.vstack(adaptive_rows)))
    return {
        "per_seed": per_method,
        "mean_cv": {m: float(np.mean(v)) for m, v in per_method.items()},
    }
