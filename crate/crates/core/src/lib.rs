//! Resource-aware app reduction selection.
//!
//! Given an app's candidate reductions, their resource savings and a
//! specification `(λ, α)`, pick the reduction maximizing
//! `u + λ⟨α, w⟩` where `u` is the user-experience score. Scores are learned
//! with a Bayesian linear model whose prior is fitted by ARD regression on
//! other apps, and a small budget of user queries is spent by Thompson
//! sampling.

pub mod ard;
pub mod dataset;
pub mod domain;
pub mod engine;
pub mod harness;
pub mod oracle;
pub mod seed;
pub mod synth;

pub use ard::{
    fit_ard, fit_prior, fit_prior_with, map_estimate, posterior_extend, posterior_update, predict_score,
    sample_weights, ArdConfig, ArdFit, ModelError, Posterior, PriorParams, WeightVector,
    DEFAULT_PRIOR_SCALE,
};
pub use dataset::{
    export_results, load_dataset, load_prior, load_trace, save_dataset, save_prior, save_trace,
    DatasetError, DatasetFile, ResultRow,
};
pub use domain::{
    argmax_objective, normalize_score, normalized_objective, objective, App, Budget, DomainError,
    FeatureVector, HistoricalDataset, HistoryEntry, RawRating, Reduction, ReductionKind,
    Resource, ResourceSavings, ResourceWeights, Specification, SurveyRecord, UserScore,
    ViewAggregation, FEATURE_DIM,
};
pub use engine::{
    optimize_reduction, run_query_loop, thompson_select, EngineError, QuerySession,
    SessionTrace,
};
pub use harness::{
    binarized_accuracy, leave_one_out_eval, rho_curve, ExperimentConfig, HarnessError,
};
pub use oracle::{
    InteractiveOracle, Oracle, OracleError, RatingChannel, ReplayOracle, SurveyIndex,
    SyntheticOracle,
};
