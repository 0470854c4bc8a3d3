//! End-to-end estimation: optional control function, contour, leave-one-out
//! thresholds, second step and bootstrap.

use serde::{Deserialize, Serialize};

use crate::error::{KinkError, Result};
use crate::estimator::{self, CoefficientEstimate, ThresholdContour};
use crate::inference::{self, BootstrapResult, ControlFunctionResult};
use crate::model::{self, Dataset, Diagnostic, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSettings {
    pub draws: usize,
    pub alpha: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// The dataset actually estimated on (control residuals appended).
    pub dataset: Dataset,
    pub control: Option<ControlFunctionResult>,
    pub contour: ThresholdContour,
    /// Full-sample thresholds at each observation's own shifter value.
    pub full_gamma: Vec<Option<f64>>,
    pub coefficients: CoefficientEstimate,
    pub bootstrap: Option<BootstrapResult>,
    pub diagnostics: Vec<Diagnostic>,
}

pub fn fit(dataset: &Dataset, spec: &ModelSpec, boot: Option<BootstrapSettings>) -> Result<FitResult> {
    let diagnostics = model::ensure_valid(dataset, spec)?;

    let control = if spec.endogenous.is_empty() {
        None
    } else {
        let inst = dataset
            .instruments
            .as_deref()
            .ok_or_else(|| KinkError::validation("endogenous columns need instruments"))?;
        Some(inference::control_function(dataset, &spec.endogenous, inst)?)
    };
    let data = control
        .as_ref()
        .map_or_else(|| dataset.clone(), |c| c.augmented.clone());

    let mut contour = estimator::estimate_contour(&data, spec)?;
    if !contour.query_points.is_empty() && contour.gamma_hat.iter().all(Option::is_none) {
        return Err(KinkError::DegenerateWindow {
            query: contour.query_points[0],
            reason: format!(
                "no query point has kernel mass of at least {} with a full-rank local fit",
                estimator::min_mass(&data)
            ),
        });
    }
    let loo = estimator::leave_one_out_both(&data, spec)?;
    let mut coefficients = estimator::second_step_beta(&data, &loo.loo, &contour.interior_mask)?;

    let (lo, hi) = (
        contour.gamma_grid.first().copied(),
        contour.gamma_grid.last().copied(),
    );
    coefficients.n_boundary = loo
        .loo
        .iter()
        .zip(&contour.interior_mask)
        .filter(|(g, &inside)| inside && g.is_some() && (**g == lo || **g == hi))
        .count();

    let bootstrap = match boot {
        Some(b) => {
            let res = inference::wild_bootstrap(
                &data,
                &loo.loo,
                &contour.interior_mask,
                &coefficients,
                b.draws,
                b.alpha,
                b.seed,
            )?;
            coefficients.standard_errors = Some(res.standard_errors.clone());
            Some(res)
        }
        None => None,
    };

    contour.loo_gamma = Some(loo.loo);
    Ok(FitResult {
        dataset: data,
        control,
        contour,
        full_gamma: loo.full,
        coefficients,
        bootstrap,
        diagnostics,
    })
}
