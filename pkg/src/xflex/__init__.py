"""Probabilistic forecasting of daily count outcomes with extreme tails.

Additive quantile regression carries the bulk of the predictive distribution;
a discrete generalized Pareto model fitted to threshold exceedances carries
the tail; the two are spliced into one distribution per forecast instance,
combined across NWP ensemble members, and summarized as RAG band
probabilities. A simulation laboratory and a CSV-driven pipeline/CLI wrap the
method end to end.
"""

from .banding import AMBER, GREEN, RED, BandProbabilities, BandSpec, assign_band, band_probs
from .distributions import (
    DiscreteGammaParams,
    GpParams,
    dgamma_cdf,
    dgamma_pmf,
    dgamma_quantile,
    dgamma_sample,
    dgp_cdf,
    dgp_loglik,
    dgp_loglik_grad,
    dgp_pmf,
    dgp_quantile,
    dgp_sample,
    gp_cdf,
    gp_quantile,
)
from .ensemble import (
    DEFAULT_PROB_GRID,
    HRES_MEMBER_ID,
    CombinedForecast,
    MemberForecast,
    WeightSchedule,
    combine,
    member_weights,
    weighted_quantile_average,
)
from .exceptions import ConvergenceError, RankError, ValidationError, XflexError
from .pipeline import (
    ForecastRecord,
    FoldPlan,
    ModelBundle,
    PipelineConfig,
    ScoreReport,
    cross_validate,
    evaluate,
    fit_bundle,
    forecast,
    forecast_many,
    load_bands,
    load_bundle,
    load_config,
    load_faults,
    load_weather,
    make_demo_dataset,
    make_folds,
    save_bundle,
    select_model,
    training_frame,
)
from .quantile_model import (
    QuantileGrid,
    QuantileModelSet,
    fit_quantile_set,
    pinball_loss,
    predict_quantile_frame,
    predict_quantiles,
    smoothed_pinball,
)
from .scoring import (
    auc,
    brier,
    brier_skill,
    multiclass_auc,
    pinball,
    reliability,
    rmse_quantiles,
    scaled_pinball,
    twcrps_sample,
)
from .simlab import (
    ScanConfig,
    ScenarioConfig,
    oracle_quantiles,
    run_scenario,
    sample_scenario,
    scenario_config,
    threshold_scan,
)
from .splice import (
    BulkCdf,
    PredictiveDistribution,
    build_bulk_cdf,
    make_bulk_only,
    make_spliced,
    splice_cdf,
)
from .splines import (
    BasisExpansion,
    SplineSpec,
    build_basis,
    difference_penalty,
    evaluate_basis,
    evaluate_basis_matrix,
)
from .tail_model import TailModel, extract_exceedances, fit_tail, tail_scale, tail_scale_rows

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # errors
    "XflexError", "ValidationError", "RankError", "ConvergenceError",
    # distributions
    "GpParams", "DiscreteGammaParams", "gp_cdf", "gp_quantile",
    "dgp_pmf", "dgp_cdf", "dgp_quantile", "dgp_sample", "dgp_loglik", "dgp_loglik_grad",
    "dgamma_pmf", "dgamma_cdf", "dgamma_quantile", "dgamma_sample",
    # splines
    "SplineSpec", "BasisExpansion", "build_basis", "difference_penalty",
    "evaluate_basis", "evaluate_basis_matrix",
    # bulk quantile model
    "QuantileGrid", "QuantileModelSet", "fit_quantile_set",
    "predict_quantiles", "predict_quantile_frame", "smoothed_pinball", "pinball_loss",
    # tail model
    "TailModel", "fit_tail", "extract_exceedances", "tail_scale", "tail_scale_rows",
    # splice
    "BulkCdf", "PredictiveDistribution", "build_bulk_cdf",
    "make_spliced", "make_bulk_only", "splice_cdf",
    # ensemble combination
    "WeightSchedule", "MemberForecast", "CombinedForecast",
    "member_weights", "weighted_quantile_average", "combine",
    "HRES_MEMBER_ID", "DEFAULT_PROB_GRID",
    # banding
    "BandSpec", "BandProbabilities", "band_probs", "assign_band",
    "GREEN", "AMBER", "RED",
    # scoring
    "pinball", "scaled_pinball", "brier", "brier_skill", "auc", "multiclass_auc",
    "reliability", "twcrps_sample", "rmse_quantiles",
    # simulation laboratory
    "ScenarioConfig", "ScanConfig", "scenario_config", "sample_scenario",
    "oracle_quantiles", "run_scenario", "threshold_scan",
    # pipeline
    "PipelineConfig", "ModelBundle", "ForecastRecord", "FoldPlan", "ScoreReport",
    "load_faults", "load_weather", "load_bands", "load_config", "training_frame",
    "make_folds", "fit_bundle", "save_bundle", "load_bundle",
    "forecast", "forecast_many", "evaluate", "cross_validate", "select_model",
    "make_demo_dataset",
]
