//! Metrics and experiment runners.

mod correlate;
mod grid;
mod metrics;
mod sweep;

pub use correlate::{correlate_fraction_with_covariate, StageCorrelation, DEFAULT_STAGE_SPLIT};
pub use grid::{grid_search, GridCell, GridSearchResult};
pub use metrics::{nrmse, pearson};
pub use sweep::{
    estimate_with, parameter_nrmse, predict_all, sampling_factor_sweep, ExperimentResult, Method, Parameter,
    SweepCell, SweepConfig, SweepProvenance,
};
