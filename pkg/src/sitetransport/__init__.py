"""Transported exposure effects across heterogeneous data sources.

Estimates the average effect of a binary exposure on a binary outcome in a
target population whose own exposure, mediator, and outcome are unobserved,
by borrowing the mediator law from one source and the outcome law from
another. Fitting every source pairing gives a grid of transported effects;
the grid's spread is then decomposed into mediator-related and
outcome-related heterogeneity, nonparametrically and through a Bayesian
two-way random-effects model.
"""

from .data import (
    Dataset,
    EstimandSpec,
    PositivityReport,
    dataset_from_arrays,
    positivity_diagnostics,
    read_dataset_csv,
    spec_for_dataset,
    write_dataset_csv,
    write_positivity_json,
)
from .errors import (
    ChainNotConverged,
    ConfigError,
    DataError,
    EmptyInput,
    EmptySite,
    IncompleteGrid,
    InvalidFoldCount,
    MixedMissingness,
    NegativeVariance,
    NoExposedRecordsInSite,
    NonBinaryField,
    NonPositiveRisk,
    NoTargetRecords,
    SeparationDetected,
    SiteAbsent,
    UnknownAnchorSite,
)
from .estimators import (
    METHODS,
    LogRREstimate,
    RiskEstimate,
    TransportEffects,
    TransportGrid,
    eif_evaluate,
    gcomp_risk,
    grid_from_json_dict,
    log_rr,
    onestep_risk,
    transport_grid,
    weighting_regression_risk,
    weighting_risk,
    write_grid_csv,
    write_grid_json,
)
from .heterogeneity import (
    NO_HETEROGENEITY,
    McmcConfig,
    NPDecomposition,
    REPosterior,
    SummaryEffect,
    heterogeneity_table,
    i2_shares,
    np_decompose,
    re_model_fit,
    summary_effect,
)
from .learners import (
    LearnerSpec,
    default_interactions_spec,
    default_super_spec,
    fit_binary_regressor,
    parse_learner,
)
from .nuisance import (
    FoldAssignment,
    NuisanceSet,
    fit_nuisance_set,
    make_folds,
    single_fold,
)
from .simulation import (
    DGPConfig,
    OracleNuisanceSet,
    default_estimand,
    dgp_sample,
    enumeration_dataset,
    mc_counterfactual_risk,
    oracle_log_rr,
    oracle_log_rr_matrix,
    oracle_nuisances,
    oracle_risk,
    scenario_nuisances,
)
from .study import (
    MetricsSummary,
    RepResult,
    StudyConfig,
    StudyResult,
    replication_stream,
    run_single_replication,
    run_study,
    write_heterogeneity_table_csv,
    write_metrics_panels_csv,
    write_replications_csv,
)

__version__ = "0.1.0"

__all__ = [
    "ChainNotConverged",
    "ConfigError",
    "DGPConfig",
    "DataError",
    "Dataset",
    "EmptyInput",
    "EmptySite",
    "EstimandSpec",
    "FoldAssignment",
    "IncompleteGrid",
    "InvalidFoldCount",
    "LearnerSpec",
    "LogRREstimate",
    "METHODS",
    "McmcConfig",
    "MetricsSummary",
    "MixedMissingness",
    "NO_HETEROGENEITY",
    "NPDecomposition",
    "NegativeVariance",
    "NoExposedRecordsInSite",
    "NonBinaryField",
    "NonPositiveRisk",
    "NoTargetRecords",
    "NuisanceSet",
    "OracleNuisanceSet",
    "PositivityReport",
    "REPosterior",
    "RepResult",
    "RiskEstimate",
    "SeparationDetected",
    "SiteAbsent",
    "StudyConfig",
    "StudyResult",
    "SummaryEffect",
    "TransportEffects",
    "TransportGrid",
    "UnknownAnchorSite",
    "dataset_from_arrays",
    "default_estimand",
    "default_interactions_spec",
    "default_super_spec",
    "dgp_sample",
    "eif_evaluate",
    "enumeration_dataset",
    "fit_binary_regressor",
    "fit_nuisance_set",
    "gcomp_risk",
    "grid_from_json_dict",
    "heterogeneity_table",
    "i2_shares",
    "log_rr",
    "make_folds",
    "mc_counterfactual_risk",
    "np_decompose",
    "onestep_risk",
    "oracle_log_rr",
    "oracle_log_rr_matrix",
    "oracle_nuisances",
    "oracle_risk",
    "parse_learner",
    "positivity_diagnostics",
    "re_model_fit",
    "read_dataset_csv",
    "replication_stream",
    "run_single_replication",
    "run_study",
    "scenario_nuisances",
    "single_fold",
    "spec_for_dataset",
    "summary_effect",
    "transport_grid",
    "weighting_regression_risk",
    "weighting_risk",
    "write_dataset_csv",
    "write_grid_csv",
    "write_grid_json",
    "write_heterogeneity_table_csv",
    "write_metrics_panels_csv",
    "write_positivity_json",
    "write_replications_csv",
]
