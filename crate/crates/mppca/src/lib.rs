//! Mixture-of-probabilistic-PCA modeling for multivariate process
//! monitoring: EM training with automatic component-count selection,
//! kernel-density alarm thresholds, and missing-value handling.

pub mod error;
pub mod io;
pub mod missing;
pub mod mixture;
pub mod monitoring;
pub mod ppca;
pub mod synth;

pub use error::{Error, Result};
pub use io::{read_csv, standardize, write_csv, Dataset, ModelArtifact, Standardization};
pub use missing::{em_fit_missing, impute_all, monitor_missing, MaskedSample};
pub use mixture::{
    em_fit, select_k, select_k_by_delta, sample_mixture, KChoice, MixtureParams, QChoice,
    SelectionReport, TrainingConfig, TrainingReport,
};
pub use monitoring::{
    detect, evaluate, fit_thresholds, global_statistics, local_statistics, AlarmDecision,
    DetectionMode, EvaluationReport, GlobalStatistics, LocalStatistics, StatisticMode,
    ThresholdSet,
};
pub use ppca::{fit_ppca_closed_form, PpcaParams};
pub use synth::{generate, ClusterSpec, FaultKind, FaultSpec, ScenarioSpec};
