//! Regression-kink estimation with a threshold that varies with an observed
//! shifter.
//!
//! The estimator runs in two steps. First, for each query value `m` of the
//! shifter, a kernel-weighted profile least-squares search over a grid of
//! candidate kinks gives the threshold contour `gamma(m)`. Second, the
//! slope coefficients are estimated by OLS on the kink basis evaluated at
//! leave-one-out thresholds. A control function handles endogenous
//! regressors and a wild bootstrap provides inference.

pub mod cli;
pub mod error;
pub mod estimator;
pub mod fit;
pub mod inference;
pub mod kernel;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod simulation;
pub mod stats;

pub use error::{KinkError, Result};
pub use estimator::{
    estimate_contour, grid_search, leave_one_out_thresholds, second_step_beta, CoefficientEstimate,
    ProfileCurve, ThresholdContour,
};
pub use fit::{fit, BootstrapSettings, FitResult};
pub use inference::{control_function, wild_bootstrap, BootstrapResult};
pub use kernel::{bandwidth, local_weights, WeightVector};
pub use model::{kink_basis, validate, BandwidthRule, Column, Dataset, Grid, ModelSpec};
pub use pipeline::{clean, heatmap, load_csv, CleaningSpec, CsvSchema, HeatmapGrid};
pub use simulation::{generate, run_monte_carlo, snr, true_threshold, DgpKind, DgpSpec};
