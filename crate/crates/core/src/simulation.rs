//! Monte Carlo designs with a cubic threshold contour, signal-to-noise
//! ratios and bias/RMSE aggregation.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KinkError, Result};
use crate::fit::{self, BootstrapSettings};
use crate::model::{BandwidthRule, Dataset, Grid, ModelSpec};
use crate::stats;

/// Fixed seed of the Monte Carlo variance oracle behind [`snr`].
pub const SNR_ORACLE_SEED: u64 = 0x5eed_0f_5a_2024;
pub const SNR_ORACLE_DRAWS: usize = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpKind {
    Exogenous,
    Endogenous,
}

impl DgpKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DgpKind::Exogenous => "exogenous",
            DgpKind::Endogenous => "endogenous",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub beta_g0: f64,
    pub beta_x0: f64,
    /// Intercept and slope on the scalar covariate.
    pub beta_c0: (f64, f64),
    /// Scale on the error primitives: `noise * u` (exogenous) or
    /// `noise * (eps + v)` (endogenous).
    pub noise_scale: f64,
    pub n: usize,
    pub seed: u64,
}

impl DgpSpec {
    pub fn new(kind: DgpKind, beta_g0: f64, n: usize, seed: u64) -> Self {
        DgpSpec {
            kind,
            beta_g0,
            beta_x0: 0.0,
            beta_c0: (0.0, 0.0),
            noise_scale: 0.5,
            n,
            seed,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.n == 0 {
            return Err(KinkError::validation("design needs n >= 1"));
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return Err(KinkError::validation("noise scale must be finite and non-negative"));
        }
        Ok(())
    }

    /// Variance of the structural error.
    pub fn noise_variance(&self) -> f64 {
        let s2 = self.noise_scale * self.noise_scale;
        match self.kind {
            DgpKind::Exogenous => s2,
            DgpKind::Endogenous => 2.0 * s2,
        }
    }
}

/// `gamma_0(m) = (m + 1)^3 / 8`
pub fn true_threshold(m: f64) -> f64 {
    let a = m + 1.0;
    a * a * a / 8.0
}

pub fn generate(spec: &DgpSpec) -> Result<Dataset> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n;
    let (mut y, mut g, mut m, mut x, mut w) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    let mut z = || -> f64 { rng.sample(StandardNormal) };
    for _ in 0..n {
        let (gi, mi, xi, ui, wi) = match spec.kind {
            DgpKind::Exogenous => {
                let (gi, mi, xi, ui) = (z(), z(), z(), z());
                (gi, mi, xi, spec.noise_scale * ui, None)
            }
            DgpKind::Endogenous => {
                let (mi, xi, ei, vi, wi) = (z(), z(), z(), z(), z());
                (vi + wi, mi, xi, spec.noise_scale * (ei + vi), Some(wi))
            }
        };
        let d = gi - true_threshold(mi);
        y.push(
            spec.beta_g0 * d.min(0.0)
                + spec.beta_x0 * d.max(0.0)
                + spec.beta_c0.0
                + spec.beta_c0.1 * xi
                + ui,
        );
        g.push(gi);
        m.push(mi);
        x.push(xi);
        if let Some(wi) = wi {
            w.push(wi);
        }
    }
    let flags = g
        .iter()
        .zip(&m)
        .map(|(&gi, &mi)| u8::from(gi > true_threshold(mi)))
        .collect();
    let mut data = Dataset::new(y, g, m)
        .with_names("pi", "g", "m")
        .with_covariate("x", x)
        .with_export_flag(flags);
    if spec.kind == DgpKind::Endogenous {
        data = data.with_instrument("w", w);
    }
    Ok(data)
}

/// `Var((g - gamma_0(m))_-)` by Monte Carlo with the fixed oracle seed;
/// `m = None` integrates over the shifter distribution.
pub fn kink_signal_variance(kind: DgpKind, m: Option<f64>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(SNR_ORACLE_SEED);
    let (mut sum, mut sumsq) = (0.0f64, 0.0f64);
    // chunked accumulation keeps the running sums well scaled
    const CHUNK: usize = 10_000;
    for _ in 0..SNR_ORACLE_DRAWS / CHUNK {
        let (mut s, mut ss) = (0.0, 0.0);
        for _ in 0..CHUNK {
            let g: f64 = match kind {
                DgpKind::Exogenous => rng.sample(StandardNormal),
                DgpKind::Endogenous => {
                    rng.sample::<f64, _>(StandardNormal) + rng.sample::<f64, _>(StandardNormal)
                }
            };
            let mi = match m {
                Some(v) => v,
                None => rng.sample(StandardNormal),
            };
            let d = (g - true_threshold(mi)).min(0.0);
            s += d;
            ss += d * d;
        }
        sum += s;
        sumsq += ss;
    }
    let n = SNR_ORACLE_DRAWS as f64;
    let mean = sum / n;
    (sumsq / n - mean * mean) * n / (n - 1.0)
}

/// Signal-to-noise ratio `beta^2 Var((g - gamma_0(m))_-) / Var(u)`.
pub fn snr(spec: &DgpSpec, m: Option<f64>) -> f64 {
    snr_from_variance(spec, kink_signal_variance(spec.kind, m))
}

pub fn snr_from_variance(spec: &DgpSpec, variance: f64) -> f64 {
    spec.beta_g0 * spec.beta_g0 * variance / spec.noise_variance()
}

/// Monte Carlo settings beyond the designs themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    pub replications: usize,
    pub seed: u64,
    /// Shifter values at which `gamma_hat(m)` is scored.
    pub gamma_points: Vec<f64>,
    /// Shifter grid for the averaged-contour output.
    pub contour_points: Vec<f64>,
    /// Apply the control function to endogenous designs.
    pub control_function: bool,
    /// Wild-bootstrap draws per replication for interval coverage (0 = off).
    pub bootstrap_draws: usize,
    pub alpha: f64,
    pub histogram_bins: usize,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        MonteCarloConfig {
            replications: 200,
            seed: 20_240_601,
            gamma_points: vec![0.0, 0.25, 0.5],
            contour_points: (0..=20).map(|k| -1.0 + 0.1 * k as f64).collect(),
            control_function: true,
            bootstrap_draws: 0,
            alpha: 0.05,
            histogram_bins: 30,
        }
    }
}

/// Estimation settings used by the Monte Carlo designs: undersmoothing
/// bandwidth and the default grids.
pub fn simulation_model_spec() -> ModelSpec {
    ModelSpec {
        bandwidth: BandwidthRule::Undersmooth,
        ..ModelSpec::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    BetaG,
    Gamma(f64),
}

impl Target {
    pub fn label(&self) -> String {
        match self {
            Target::BetaG => "beta_g".into(),
            Target::Gamma(m) => format!("gamma({m})"),
        }
    }

    pub fn m(&self) -> Option<f64> {
        match self {
            Target::BetaG => None,
            Target::Gamma(m) => Some(*m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub kind: DgpKind,
    pub n: usize,
    pub beta_g0: f64,
    pub target: Target,
    pub bias: f64,
    pub rmse: f64,
    /// Monte Carlo standard errors of the two statistics.
    pub bias_se: f64,
    pub rmse_se: f64,
    /// Empirical coverage of the bootstrap interval, when computed.
    pub coverage: Option<f64>,
    pub n_ok: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrEntry {
    pub kind: DgpKind,
    pub beta_g0: f64,
    pub m: Option<f64>,
    pub snr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub left: f64,
    pub right: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub kind: DgpKind,
    pub n: usize,
    pub beta_g0: f64,
    pub bins: Vec<HistogramBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageContour {
    pub kind: DgpKind,
    pub n: usize,
    pub beta_g0: f64,
    pub m: Vec<f64>,
    pub mean_gamma: Vec<Option<f64>>,
    pub truth: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignDraws {
    pub kind: DgpKind,
    pub n: usize,
    pub beta_g0: f64,
    pub beta_g_hat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub cells: Vec<Cell>,
    pub snr: Vec<SnrEntry>,
    pub histogram: Option<Histogram>,
    pub average_contours: Vec<AverageContour>,
    pub draws: Vec<DesignDraws>,
    pub n_replications: usize,
    pub failures: usize,
}

/// Per-replication outcome.
#[derive(Debug, Clone)]
struct Replication {
    beta_g: Option<f64>,
    covered: Option<bool>,
    gamma: Vec<Option<f64>>,
    contour: Vec<Option<f64>>,
}

/// Seed of replication `rep` of design `design` under the master `seed`.
pub fn replication_seed(seed: u64, design: usize, rep: usize) -> u64 {
    let mut x = seed ^ (design as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = x.wrapping_add((rep as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn run_replication(design: &DgpSpec, spec: &ModelSpec, cfg: &MonteCarloConfig, seed: u64) -> Replication {
    let failed = Replication {
        beta_g: None,
        covered: None,
        gamma: vec![None; cfg.gamma_points.len()],
        contour: vec![None; cfg.contour_points.len()],
    };
    let data = match generate(&DgpSpec { seed, ..design.clone() }) {
        Ok(d) => d,
        Err(_) => return failed,
    };
    let mut spec = spec.clone();
    spec.endogenous = if design.kind == DgpKind::Endogenous && cfg.control_function {
        vec![data.running_name.clone()]
    } else {
        Vec::new()
    };
    let mut points = cfg.gamma_points.clone();
    points.extend_from_slice(&cfg.contour_points);
    spec.query_grid = Grid::Points(points);
    let boot = (cfg.bootstrap_draws > 0).then(|| BootstrapSettings {
        draws: cfg.bootstrap_draws,
        alpha: cfg.alpha,
        seed: seed ^ 0xB007,
    });
    match fit::fit(&data, &spec, boot) {
        Ok(res) => {
            let k = cfg.gamma_points.len();
            let covered = res.bootstrap.as_ref().map(|b| {
                b.ci_lower[0] <= design.beta_g0 && design.beta_g0 <= b.ci_upper[0]
            });
            Replication {
                beta_g: Some(res.coefficients.beta_g),
                covered,
                gamma: res.contour.gamma_hat[..k].to_vec(),
                contour: res.contour.gamma_hat[k..].to_vec(),
            }
        }
        Err(_) => failed,
    }
}

fn summarize(errors: &[f64]) -> (f64, f64, f64, f64) {
    let r = errors.len() as f64;
    if errors.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN, f64::NAN);
    }
    let bias = errors.iter().sum::<f64>() / r;
    let sq: Vec<f64> = errors.iter().map(|e| e * e).collect();
    let mse = sq.iter().sum::<f64>() / r;
    let rmse = mse.sqrt();
    let bias_se = stats::std_dev(errors) / r.sqrt();
    let mse_se = stats::std_dev(&sq) / r.sqrt();
    let rmse_se = if rmse > 0.0 { mse_se / (2.0 * rmse) } else { 0.0 };
    (bias, rmse, bias_se, rmse_se)
}

pub fn run_monte_carlo(
    designs: &[DgpSpec],
    spec: &ModelSpec,
    cfg: &MonteCarloConfig,
) -> Result<SimulationReport> {
    if cfg.replications == 0 {
        return Err(KinkError::validation("replications must be at least 1"));
    }
    spec.check()?;
    for d in designs {
        d.check()?;
    }

    let mut cells = Vec::new();
    let mut contours = Vec::new();
    let mut draws = Vec::new();
    let mut failures = 0;
    for (di, design) in designs.iter().enumerate() {
        let reps: Vec<Replication> = (0..cfg.replications)
            .into_par_iter()
            .map(|r| run_replication(design, spec, cfg, replication_seed(cfg.seed, di, r)))
            .collect();

        let beta: Vec<f64> = reps.iter().filter_map(|r| r.beta_g).collect();
        let failed = reps.len() - beta.len();
        failures += failed;
        let errs: Vec<f64> = beta.iter().map(|b| b - design.beta_g0).collect();
        let (bias, rmse, bias_se, rmse_se) = summarize(&errs);
        let cov: Vec<bool> = reps.iter().filter_map(|r| r.covered).collect();
        cells.push(Cell {
            kind: design.kind,
            n: design.n,
            beta_g0: design.beta_g0,
            target: Target::BetaG,
            bias,
            rmse,
            bias_se,
            rmse_se,
            coverage: (!cov.is_empty())
                .then(|| cov.iter().filter(|c| **c).count() as f64 / cov.len() as f64),
            n_ok: beta.len(),
            n_failed: failed,
        });
        draws.push(DesignDraws {
            kind: design.kind,
            n: design.n,
            beta_g0: design.beta_g0,
            beta_g_hat: beta,
        });

        for (k, &m) in cfg.gamma_points.iter().enumerate() {
            let truth = true_threshold(m);
            let errs: Vec<f64> = reps.iter().filter_map(|r| r.gamma[k]).map(|g| g - truth).collect();
            let (bias, rmse, bias_se, rmse_se) = summarize(&errs);
            cells.push(Cell {
                kind: design.kind,
                n: design.n,
                beta_g0: design.beta_g0,
                target: Target::Gamma(m),
                bias,
                rmse,
                bias_se,
                rmse_se,
                coverage: None,
                n_ok: errs.len(),
                n_failed: reps.len() - errs.len(),
            });
        }

        let mean_gamma = (0..cfg.contour_points.len())
            .map(|k| {
                let v: Vec<f64> = reps.iter().filter_map(|r| r.contour[k]).collect();
                (!v.is_empty()).then(|| stats::mean(&v))
            })
            .collect();
        contours.push(AverageContour {
            kind: design.kind,
            n: design.n,
            beta_g0: design.beta_g0,
            m: cfg.contour_points.clone(),
            mean_gamma,
            truth: cfg.contour_points.iter().map(|&m| true_threshold(m)).collect(),
        });
    }

    let snr = snr_table(designs, &cfg.gamma_points);
    let histogram = reference_histogram(designs, &draws, cfg.histogram_bins);
    Ok(SimulationReport {
        cells,
        snr,
        histogram,
        average_contours: contours,
        draws,
        n_replications: cfg.replications,
        failures,
    })
}

/// Global and conditional SNR for every distinct `(kind, beta_g0)` design.
pub fn snr_table(designs: &[DgpSpec], points: &[f64]) -> Vec<SnrEntry> {
    let mut cache: HashMap<(DgpKind, Option<u64>), f64> = HashMap::new();
    let mut out: Vec<SnrEntry> = Vec::new();
    for d in designs {
        let ms = std::iter::once(None).chain(points.iter().map(|&m| Some(m)));
        for m in ms {
            if out
                .iter()
                .any(|e| e.kind == d.kind && e.beta_g0 == d.beta_g0 && e.m == m)
            {
                continue;
            }
            let var = *cache
                .entry((d.kind, m.map(f64::to_bits)))
                .or_insert_with(|| kink_signal_variance(d.kind, m));
            out.push(SnrEntry {
                kind: d.kind,
                beta_g0: d.beta_g0,
                m,
                snr: snr_from_variance(d, var),
            });
        }
    }
    out
}

fn reference_histogram(designs: &[DgpSpec], draws: &[DesignDraws], bins: usize) -> Option<Histogram> {
    let idx = designs
        .iter()
        .position(|d| d.n == 1000 && d.beta_g0 == 4.0)
        .or(if designs.is_empty() { None } else { Some(0) })?;
    let d = &draws[idx];
    let errs: Vec<f64> = d.beta_g_hat.iter().map(|b| b - d.beta_g0).collect();
    Some(Histogram {
        kind: d.kind,
        n: d.n,
        beta_g0: d.beta_g0,
        bins: histogram(&errs, bins.max(1)),
    })
}

pub fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    if values.is_empty() {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(k, count)| HistogramBin {
            left: lo + width * k as f64,
            right: if k + 1 == bins { hi.max(lo + width * bins as f64) } else { lo + width * (k + 1) as f64 },
            count,
        })
        .collect()
}
