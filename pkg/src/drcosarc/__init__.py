"""Calibrated lower prediction bounds for survival times under right censoring.

The pipeline: fit a censoring model, impute the unobserved censoring times,
then calibrate candidate survival bounds with weighted conformal inference
(fixed or covariate-adaptive cutoff), finishing with a min against the raw
model quantile for robustness.  Benchmarks, synthetic generators, and a
Monte Carlo experiment harness are included.
"""

__version__ = "0.1.0"

from .core import (
    Dataset,
    DiscreteDistribution,
    LatentRecord,
    LatentSample,
    ObservedRecord,
    normalized_weights,
    read_dataset_csv,
    weighted_quantile,
    write_dataset_csv,
)
from .streams import RandomStream, SeedSpec
from .models import (
    ConditionalModel,
    CoxPHModel,
    FitConvergenceError,
    KMCurve,
    KaplanMeierModel,
    KnnKMModel,
    LognormalAFTModel,
    fit_cox,
    fit_kaplan_meier,
    fit_knn_km,
    fit_lognormal_aft,
    fit_model,
    load_model,
    save_model,
)
from .impute import ImputedDataset, censoring_tail, impute_dataset, sample_truncated
from .conformal import (
    AdaptiveCalibrator,
    FixedCutoffCalibrator,
    adaptive_lpb,
    breakpoint_grid,
    default_cutoff,
    dr_adjust,
    drcosarc_adaptive_batch,
    drcosarc_fixed_batch,
    fixed_cutoff_lpb,
    miscoverage_hat,
)
from .baselines import (
    km_decensor_lpb,
    naive_cqr_lpb,
    oracle_lpb,
    uncalibrated_lpb,
)
from .synthdata import (
    SettingSpec,
    apply_right_censoring,
    generate_latent,
    get_setting,
    oracle_quantile,
    true_censoring_model,
    true_survival_model,
)
from .metrics import (
    CoverageBounds,
    MethodResult,
    coverage,
    coverage_bounds,
    normalized_lpb,
    stability_cv,
)
from .experiment import (
    ConfigError,
    ExperimentConfig,
    ExperimentReport,
    predict_lpbs,
    run_experiment,
    stability_study,
)
