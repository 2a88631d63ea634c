"""Command-line interface.

Commands: simulate, fit, impute, predict, experiment, report.
Exit codes: 0 success, 2 configuration error, 3 model-fit failures above the
configured threshold fraction.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np
import pandas as pd

from . import __version__
from .core import read_dataset_csv, write_dataset_csv
from .experiment import (
    ConfigError,
    ExperimentConfig,
    METHODS,
    SWEEP_AXES,
    predict_lpbs,
    run_experiment,
)
from .metrics import mean_and_two_se
from .models import fit_model, load_model, save_model
from .impute import impute_dataset
from .streams import SeedSpec
from .synthdata import apply_right_censoring, generate_latent, get_setting


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drcosarc",
        description="Survival lower prediction bounds from right-censored data",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a synthetic dataset")
    p.add_argument("--setting", type=int, required=True, help="setting id (1-10)")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="observed-view CSV path")
    p.add_argument("--latent-out", help="optional latent-view CSV (columns x1..xp,t,c)")

    p = sub.add_parser("fit", help="fit a survival or censoring model")
    p.add_argument("--data", required=True)
    p.add_argument("--family", required=True, choices=["km", "aft", "cox", "knn-km"])
    p.add_argument("--target", default="survival", choices=["survival", "censoring"])
    p.add_argument("--mask", type=int, help="use only the first p1 covariates")
    p.add_argument("--k", type=int, help="neighbor count for knn-km")
    p.add_argument("--out", required=True, help="model JSON path")

    p = sub.add_parser("impute", help="impute censoring times for event rows")
    p.add_argument("--data", required=True)
    p.add_argument("--cens-model", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="CSV with columns x1..xp,time,c_hat")

    p = sub.add_parser("predict", help="compute LPBs for a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--method", required=True, choices=list(METHODS))
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--surv-model")
    p.add_argument("--cens-model")
    p.add_argument("--calibration", help="calibration CSV (conformal methods)")
    p.add_argument("--setting", type=int, help="synthetic setting id (oracle)")
    p.add_argument("--candidate-family", default="quantile", choices=["quantile", "shift"])
    p.add_argument("--out", required=True, help="CSV with columns row_id,lpb")

    p = sub.add_parser("experiment",
                       help="run a full experiment (JSON config and/or flags)")
    p.add_argument("--config", help="JSON config file; flags override its fields")
    p.add_argument("--setting", type=int)
    p.add_argument("--dataset", help="real-data CSV path")
    p.add_argument("--methods", help="comma-separated method list")
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int, help="root seed")
    p.add_argument("--reps", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-cal", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--surv-family", choices=["km", "aft", "cox", "knn-km"])
    p.add_argument("--cens-family", choices=["km", "aft", "cox", "knn-km"])
    p.add_argument("--p1", type=int, help="censoring-model covariate mask")
    p.add_argument("--sweep", choices=list(SWEEP_AXES), help="sweep axis")
    p.add_argument("--sweep-grid", help="comma-separated grid values")
    p.add_argument("--results", default="results.csv")
    p.add_argument("--summary", default="summary.json")
    p.add_argument("--dump-imputed", help="also write one imputed calibration set")

    p = sub.add_parser("report", help="aggregate a results.csv into a summary")
    p.add_argument("--results", required=True)
    p.add_argument("--out", help="summary JSON path (default: print)")
    return parser


def _cmd_simulate(args) -> int:
    setting = get_setting(args.setting)
    latent = generate_latent(setting, args.n, SeedSpec(args.seed).stream(0, "simulate"))
    write_dataset_csv(apply_right_censoring(latent), args.out)
    if args.latent_out:
        frame = pd.DataFrame(latent.x, columns=[f"x{i}" for i in range(1, setting.p + 1)])
        frame["t"] = latent.t
        frame["c"] = latent.c
        frame.to_csv(args.latent_out, index=False)
    return 0


def _cmd_fit(args) -> int:
    data = read_dataset_csv(args.data)
    options = {}
    if args.k is not None:
        options["k"] = args.k
    model = fit_model(data, args.family, target=args.target, mask=args.mask, **options)
    save_model(model, args.out)
    return 0


def _cmd_impute(args) -> int:
    data = read_dataset_csv(args.data)
    cens = load_model(args.cens_model)
    imputed = impute_dataset(data, cens, SeedSpec(args.seed).stream(0, "impute"))
    imputed.to_csv(args.out)
    return 0


def _cmd_predict(args) -> int:
    data = read_dataset_csv(args.data)
    surv = load_model(args.surv_model) if args.surv_model else None
    cens = load_model(args.cens_model) if args.cens_model else None
    calibration = read_dataset_csv(args.calibration) if args.calibration else None
    lpbs = predict_lpbs(
        args.method, data, args.alpha, args.seed, surv=surv, cens=cens,
        calibration=calibration, setting_id=args.setting,
        candidate_family=args.candidate_family,
    )
    pd.DataFrame({"row_id": np.arange(len(lpbs)), "lpb": lpbs}).to_csv(
        args.out, index=False
    )
    return 0


def _experiment_config(args) -> ExperimentConfig:
    doc = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    overrides = {
        "setting": args.setting,
        "dataset_path": args.dataset,
        "alpha": args.alpha,
        "root_seed": args.seed,
        "reps": args.reps,
        "n_train": args.n_train,
        "n_cal": args.n_cal,
        "n_test": args.n_test,
        "surv_family": args.surv_family,
        "cens_family": args.cens_family,
        "cens_mask": args.p1,
        "sweep_axis": args.sweep,
    }
    if args.methods:
        overrides["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    if args.sweep_grid:
        overrides["sweep_grid"] = [float(v) if "." in v else int(v)
                                   for v in args.sweep_grid.split(",")]
    doc.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(doc)


def _cmd_experiment(args) -> int:
    config = _experiment_config(args)
    report = run_experiment(config)
    report.to_results_csv(args.results)
    report.to_summary_json(args.summary)
    if args.dump_imputed and config.setting is not None:
        spec = SeedSpec(config.root_seed)
        setting = get_setting(config.setting)
        cal_obs = apply_right_censoring(
            generate_latent(setting, config.n_cal, spec.stream(0, "generate-cal")))
        train_obs = apply_right_censoring(
            generate_latent(setting, config.n_train, spec.stream(0, "generate-train")))
        cens = fit_model(train_obs, config.cens_family, target="censoring",
                         mask=config.cens_mask, **config.cens_options)
        impute_dataset(cal_obs, cens, spec.stream(0, "impute")).to_csv(args.dump_imputed)
    total_cells = max(len(report.rows) + len(report.failures), 1)
    if len(report.failures) / total_cells > config.max_failure_frac:
        print(f"error: {len(report.failures)} failed repetitions "
              f"(threshold {config.max_failure_frac:.0%})", file=sys.stderr)
        return 3
    return 0


def _cmd_report(args) -> int:
    frame = pd.read_csv(args.results)
    aggregates: dict = {}
    for (gval, method), group in frame.groupby(["grid_value", "method"], dropna=False):
        entry: dict = {"n_reps": int(len(group))}
        for metric in ("coverage", "cov_low", "cov_mid", "cov_upp",
                       "normalized_lpb", "mean_lpb", "dr_active_frac"):
            values = group[metric].dropna().to_numpy() if metric in group else []
            if len(values):
                mean, two_se = mean_and_two_se(values)
                entry[metric] = {"mean": mean, "two_se": two_se}
        aggregates.setdefault(str(gval), {})[str(method)] = entry
    doc = {"version": __version__, "n_rows": int(len(frame)), "aggregates": aggregates}
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
    else:
        json.dump(doc, sys.stdout, indent=2)
        print()
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "fit": _cmd_fit,
    "impute": _cmd_impute,
    "predict": _cmd_predict,
    "experiment": _cmd_experiment,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
