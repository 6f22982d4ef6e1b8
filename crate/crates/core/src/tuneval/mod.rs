//! Hyperparameter tuning on a stratified hold-out and evaluation metrics.

pub mod metrics;
pub mod search;

pub use metrics::{
    adjusted_ba, balanced_accuracy, evaluate, report_from_confusion, ClassMetrics, FormationSummary, MeanStd,
    MetricsReport,
};
pub use search::{
    apply_config, grid_search, holdout_objective, neural_grid, optimize, split_tuning_holdout, tune, write_trials,
    Config, Domain, Param, SearchSpace, Stage, TrialRecord, TrialStatus, TuneOutcome, DEFAULT_HOLDOUT_FRACTION,
};

/// Classes with fewer plots than this are dropped before training.
pub const MIN_CLASS_PLOTS: usize = 5;
