//! Gaussian kernel, bandwidth rules and normalized local weights.

use serde::{Deserialize, Serialize};

use crate::error::{KinkError, Result};
use crate::model::BandwidthRule;

/// Scaled distances beyond this are given exactly zero weight.
pub const TRUNCATION: f64 = 6.0;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
#[inline]
pub fn kernel_eval(t: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * t * t).exp()
}

/// Kernel value with the support truncated at [`TRUNCATION`].
#[inline]
pub fn truncated_kernel(t: f64) -> f64 {
    if t.abs() > TRUNCATION {
        0.0
    } else {
        kernel_eval(t)
    }
}

pub fn bandwidth(n: usize, rule: BandwidthRule) -> Result<f64> {
    if n < 2 {
        return Err(KinkError::validation(format!(
            "bandwidth needs at least 2 observations (got {n})"
        )));
    }
    let b = match rule {
        BandwidthRule::RuleOfThumb => (n as f64).powf(-1.0 / 5.0),
        BandwidthRule::Undersmooth => (n as f64).powf(-1.0 / 3.5),
        BandwidthRule::Fixed(b) => b,
    };
    if !(b > 0.0) || !b.is_finite() {
        return Err(KinkError::validation(format!("invalid bandwidth {b}")));
    }
    Ok(b)
}

/// Normalized kernel weights `k_{i,n}` around one query point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    /// Sum of the unnormalized kernel values.
    pub total_mass: f64,
    pub query_point: f64,
}

impl WeightVector {
    /// Indices with strictly positive weight.
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(i, _)| i)
    }

    /// Same weights with observation `i` removed and the rest renormalized.
    pub fn without(&self, i: usize) -> Result<WeightVector> {
        let own = self.weights[i] * self.total_mass;
        let total = self.total_mass - own;
        let mut raw: Vec<f64> = self.weights.iter().map(|w| w * self.total_mass).collect();
        raw[i] = 0.0;
        normalize(raw, total, self.query_point)
    }
}

fn normalize(raw: Vec<f64>, total: f64, m: f64) -> Result<WeightVector> {
    if !(total > 0.0) {
        return Err(KinkError::DegenerateWindow {
            query: m,
            reason: "no observation within the kernel support".into(),
        });
    }
    Ok(WeightVector {
        weights: raw.into_iter().map(|k| k / total).collect(),
        total_mass: total,
        query_point: m,
    })
}

pub fn local_weights(shifter: &[f64], m: f64, b: f64) -> Result<WeightVector> {
    if shifter.is_empty() {
        return Err(KinkError::validation("local weights need a non-empty shifter"));
    }
    if !(b > 0.0) {
        return Err(KinkError::validation(format!("bandwidth must be positive (got {b})")));
    }
    let raw: Vec<f64> = shifter.iter().map(|&mi| truncated_kernel((mi - m) / b)).collect();
    let total = raw.iter().sum();
    normalize(raw, total, m)
}
