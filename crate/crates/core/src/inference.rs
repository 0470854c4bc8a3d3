//! Control-function correction for endogenous regressors and wild-bootstrap
//! inference on the second-step coefficients.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KinkError, Result};
use crate::estimator::{CoefficientEstimate, SecondStepDesign};
use crate::linalg::{self, PivotedQr};
use crate::model::{Column, ColumnRole, Dataset};
use crate::stats;

pub const DEFAULT_DRAWS: usize = 999;
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlFunctionResult {
    /// One residual column per endogenous regressor, in declaration order.
    pub residuals: Vec<Column>,
    /// First-stage coefficients per endogenous regressor: intercept first,
    /// then one per instrument used.
    pub first_stage_coefficients: Vec<Vec<f64>>,
    pub first_stage_names: Vec<String>,
    pub augmented: Dataset,
}

fn endogenous_values<'a>(dataset: &'a Dataset, name: &str) -> Result<&'a [f64]> {
    if name == dataset.running_name {
        return Ok(&dataset.running);
    }
    dataset
        .covariates
        .iter()
        .find(|c| c.name == name && c.role == ColumnRole::Regressor)
        .map(|c| c.values.as_slice())
        .ok_or_else(|| KinkError::MissingColumn(name.to_string()))
}

/// Regresses each endogenous column on an intercept and the instruments and
/// appends the residuals to the covariates.
pub fn control_function(
    dataset: &Dataset,
    endogenous: &[String],
    instruments: &[Column],
) -> Result<ControlFunctionResult> {
    if endogenous.is_empty() {
        return Ok(ControlFunctionResult {
            residuals: Vec::new(),
            first_stage_coefficients: Vec::new(),
            first_stage_names: Vec::new(),
            augmented: dataset.clone(),
        });
    }
    let n = dataset.n();
    // constant instrument columns are absorbed by the intercept
    let used: Vec<&Column> = instruments
        .iter()
        .filter(|c| c.values.iter().any(|v| *v != c.values[0]))
        .collect();
    if used.is_empty() {
        return Err(KinkError::validation(
            "control function needs at least one non-constant instrument",
        ));
    }
    if used.iter().any(|c| c.values.len() != n) {
        return Err(KinkError::validation("instrument length differs from dataset"));
    }
    let mut design = vec![vec![1.0; n]];
    design.extend(used.iter().map(|c| c.values.clone()));
    let qr = PivotedQr::new(&design)
        .ok_or_else(|| KinkError::singular(None, "first-stage instrument design is rank deficient"))?;

    let mut names = vec!["const".to_string()];
    names.extend(used.iter().map(|c| c.name.clone()));

    let mut augmented = dataset.clone();
    let mut residuals = Vec::new();
    let mut coefs = Vec::new();
    for name in endogenous {
        let target = endogenous_values(dataset, name)?;
        let eta = qr.solve(target);
        let v = linalg::residuals(&design, target, &eta);
        let col = Column::new(format!("v_{name}"), ColumnRole::Control, v);
        augmented.covariates.push(col.clone());
        residuals.push(col);
        coefs.push(eta);
    }
    Ok(ControlFunctionResult {
        residuals,
        first_stage_coefficients: coefs,
        first_stage_names: names,
        augmented,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// `n_draws` rows of coefficients in design order.
    pub replicates: Vec<Vec<f64>>,
    pub standard_errors: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub alpha: f64,
    pub seed: u64,
    pub n_draws: usize,
}

/// Rademacher multipliers of one bootstrap draw.
///
/// Multiplier `i` of draw `d` is a pure function of `(seed, d, i)`: it is
/// the low bit of word `i` of ChaCha8 stream `d` under `seed`, so draws can
/// be evaluated in any order or in parallel.
pub fn rademacher_draw(seed: u64, draw: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw);
    (0..n)
        .map(|_| if rng.next_u32() & 1 == 1 { 1.0 } else { -1.0 })
        .collect()
}

/// Single multiplier addressed directly by its key.
pub fn rademacher(seed: u64, draw: u64, obs: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw);
    rng.set_word_pos(obs as u128);
    if rng.next_u32() & 1 == 1 {
        1.0
    } else {
        -1.0
    }
}

/// Wild bootstrap of the second-step regression holding `z_i(gamma_{-i}(m_i))`
/// fixed; thresholds are not re-estimated.
pub fn wild_bootstrap(
    dataset: &Dataset,
    loo_gamma: &[Option<f64>],
    interior_mask: &[bool],
    beta_star: &CoefficientEstimate,
    draws: usize,
    alpha: f64,
    seed: u64,
) -> Result<BootstrapResult> {
    if draws < 2 {
        return Err(KinkError::validation("bootstrap needs at least 2 draws"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(KinkError::validation(format!("alpha must lie in (0, 1) (got {alpha})")));
    }
    let design = SecondStepDesign::new(dataset, loo_gamma, interior_mask);
    let beta = beta_star.coefficients();
    if beta.len() != design.columns.len() {
        return Err(KinkError::validation(
            "coefficient estimate does not match the dataset design",
        ));
    }
    let qr = PivotedQr::new(&design.columns)
        .ok_or_else(|| KinkError::singular(None, "second-step design is rank deficient"))?;
    let resid = linalg::residuals(&design.columns, &design.y, &beta);
    let n = resid.len();

    let replicates: Vec<Vec<f64>> = (0..draws)
        .into_par_iter()
        .map(|d| {
            let eps = rademacher_draw(seed, d as u64, n);
            let shock: Vec<f64> = resid.iter().zip(&eps).map(|(u, e)| u * e).collect();
            // beta* + (Z'Z)^{-1} Z'(u * eps) is the refit on fitted + u * eps
            let delta = qr.solve(&shock);
            beta.iter().zip(delta).map(|(b, db)| b + db).collect()
        })
        .collect();

    let k = beta.len();
    let mut standard_errors = Vec::with_capacity(k);
    let mut ci_lower = Vec::with_capacity(k);
    let mut ci_upper = Vec::with_capacity(k);
    let (lo_idx, hi_idx) = percentile_indices(draws, alpha);
    for j in 0..k {
        let col: Vec<f64> = replicates.iter().map(|r| r[j]).collect();
        standard_errors.push(stats::std_dev(&col));
        let sorted = stats::sorted(&col);
        ci_lower.push(sorted[lo_idx]);
        ci_upper.push(sorted[hi_idx]);
    }
    Ok(BootstrapResult {
        replicates,
        standard_errors,
        ci_lower,
        ci_upper,
        alpha,
        seed,
        n_draws: draws,
    })
}

/// Zero-based order-statistic positions of the `alpha/2` and `1 - alpha/2`
/// percentiles under the `(B + 1) p` rule.
pub fn percentile_indices(draws: usize, alpha: f64) -> (usize, usize) {
    let b1 = (draws + 1) as f64;
    let lo = ((b1 * alpha / 2.0 + 1e-9).floor() as usize).clamp(1, draws);
    let hi = ((b1 * (1.0 - alpha / 2.0) - 1e-9).ceil() as usize).clamp(1, draws);
    (lo - 1, hi - 1)
}
