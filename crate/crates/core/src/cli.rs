//! Command-line front end: argument parsing, run manifests and the CSV/JSON
//! artifacts written by each command.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{KinkError, Result};
use crate::fit::{self, BootstrapSettings, FitResult};
use crate::inference::{DEFAULT_ALPHA, DEFAULT_DRAWS};
use crate::model::{BandwidthRule, Dataset, Grid, ModelSpec};
use crate::pipeline::{self, CleaningSpec, CsvSchema};
use crate::simulation::{self, DgpKind, DgpSpec, MonteCarloConfig, SimulationReport, Target};
use crate::{estimator, stats};

pub const ENV_PREFIX: &str = "KINKREG_";
pub const MISSING: &str = "NA";

#[derive(Debug, Parser)]
#[command(name = "kinkreg", version, about = "Regression-kink estimation with a shifting threshold")]
struct Cli {
    /// Worker threads: a count or `auto`.
    #[arg(long, global = true, env = "KINKREG_THREADS", default_value = "auto")]
    threads: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate the threshold contour and the slope coefficients.
    Fit(FitArgs),
    /// Fit with wild-bootstrap standard errors and percentile intervals.
    Bootstrap(FitArgs),
    /// Run the Monte Carlo designs.
    Simulate(SimulateArgs),
    /// Exporter share by decile cell with the fitted contour overlaid.
    Heatmap(HeatmapArgs),
    /// Signal-to-noise ratios of the simulation designs.
    Snr(SnrArgs),
    /// Rerun a command from the manifest it wrote.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long, env = "KINKREG_INPUT")]
    input: PathBuf,
    #[arg(long, env = "KINKREG_OUTCOME_COL")]
    outcome_col: String,
    #[arg(long, env = "KINKREG_RUNNING_COL")]
    running_col: String,
    #[arg(long, env = "KINKREG_SHIFTER_COL")]
    shifter_col: String,
    #[arg(long, env = "KINKREG_COVARIATE_COLS", value_delimiter = ',')]
    covariate_cols: Vec<String>,
    #[arg(long, env = "KINKREG_INSTRUMENT_COLS", value_delimiter = ',')]
    instrument_cols: Vec<String>,
    /// Covariate instrumented under `--model 3`.
    #[arg(long, env = "KINKREG_ENDOGENOUS_COLS", value_delimiter = ',')]
    endogenous_cols: Vec<String>,
    #[arg(long, env = "KINKREG_EXPORT_FLAG_COL")]
    export_flag_col: Option<String>,
    #[arg(long, env = "KINKREG_DELIMITER", default_value = ",")]
    delimiter: char,
    /// Share of rows with the largest outcome dropped.
    #[arg(long, env = "KINKREG_TRIM", default_value_t = 0.0)]
    trim: f64,
    #[arg(long, env = "KINKREG_REQUIRE_POSITIVE", value_delimiter = ',')]
    require_positive: Vec<String>,
    #[arg(long, env = "KINKREG_REQUIRE_NONNEGATIVE", value_delimiter = ',')]
    require_nonnegative: Vec<String>,
    #[arg(long, env = "KINKREG_STANDARDIZE", value_delimiter = ',')]
    standardize: Vec<String>,
    #[arg(long, env = "KINKREG_QUANTILE_COLS", value_delimiter = ',')]
    quantile_cols: Vec<String>,
}

#[derive(Debug, Args)]
struct SpecArgs {
    /// 1 exogenous, 2 control function for the running variable, 3 also for
    /// one covariate.
    #[arg(long, env = "KINKREG_MODEL", default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=3))]
    model: u8,
    /// `rot`, `under` or a positive number.
    #[arg(long, env = "KINKREG_BANDWIDTH", default_value = "rot")]
    bandwidth: String,
    /// `lo:hi:count` in running-variable units, or `auto`.
    #[arg(long, env = "KINKREG_GAMMA_GRID", default_value = "auto")]
    gamma_grid: String,
    /// `lo:hi:count` in shifter quantile levels, or `auto`.
    #[arg(long, env = "KINKREG_QUERY_GRID", default_value = "auto")]
    query_grid: String,
    /// Shifter quantile bounds `lo,hi` of the second-step sample.
    #[arg(long, env = "KINKREG_INTERIOR", default_value = "0.01,0.99")]
    interior: String,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    spec: SpecArgs,
    #[arg(long, env = "KINKREG_OUTPUT_DIR")]
    output_dir: PathBuf,
    /// Bootstrap draws (0 disables).
    #[arg(long, env = "KINKREG_BOOTSTRAP")]
    bootstrap: Option<usize>,
    #[arg(long, env = "KINKREG_ALPHA", default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, env = "KINKREG_SEED", default_value_t = 1)]
    seed: u64,
}

#[derive(Debug, Args)]
struct HeatmapArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    spec: SpecArgs,
    #[arg(long, env = "KINKREG_OUTPUT_DIR")]
    output_dir: PathBuf,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, env = "KINKREG_OUTPUT_DIR")]
    output_dir: PathBuf,
    #[arg(long, env = "KINKREG_REPLICATIONS", default_value_t = 200)]
    replications: usize,
    #[arg(long, env = "KINKREG_SEED", default_value_t = 20_240_601)]
    seed: u64,
    #[arg(long, env = "KINKREG_KINDS", value_delimiter = ',', default_value = "exogenous,endogenous")]
    kinds: Vec<String>,
    #[arg(long, env = "KINKREG_SIZES", value_delimiter = ',', default_value = "100,500")]
    sizes: Vec<usize>,
    #[arg(long, env = "KINKREG_BETAS", value_delimiter = ',', default_value = "1,2,3,4")]
    betas: Vec<f64>,
    /// Skip the control function in endogenous designs.
    #[arg(long, env = "KINKREG_NO_CONTROL_FUNCTION")]
    no_control_function: bool,
    /// Bootstrap draws per replication for coverage (0 disables).
    #[arg(long, env = "KINKREG_BOOTSTRAP", default_value_t = 0)]
    bootstrap: usize,
    #[arg(long, env = "KINKREG_ALPHA", default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, env = "KINKREG_BANDWIDTH", default_value = "under")]
    bandwidth: String,
}

#[derive(Debug, Args)]
struct SnrArgs {
    #[arg(long, env = "KINKREG_OUTPUT_DIR")]
    output_dir: PathBuf,
    #[arg(long, env = "KINKREG_KINDS", value_delimiter = ',', default_value = "exogenous,endogenous")]
    kinds: Vec<String>,
    #[arg(long, env = "KINKREG_BETAS", value_delimiter = ',', default_value = "1,2,3,4")]
    betas: Vec<f64>,
    /// Shifter values for conditional ratios.
    #[arg(long, env = "KINKREG_M_POINTS", value_delimiter = ',', default_value = "0,0.25,0.5")]
    m_points: Vec<f64>,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    #[arg(long, env = "KINKREG_MANIFEST")]
    manifest: PathBuf,
    #[arg(long, env = "KINKREG_OUTPUT_DIR")]
    output_dir: PathBuf,
}

/// Input file, column mapping and cleaning for data-driven commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub input: PathBuf,
    pub schema: CsvSchema,
    pub cleaning: CleaningSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub data: DataConfig,
    pub model: u8,
    pub spec: ModelSpec,
    pub bootstrap: Option<BootstrapSettings>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapConfig {
    pub data: DataConfig,
    pub model: u8,
    pub spec: ModelSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateConfig {
    pub designs: Vec<DgpSpec>,
    pub spec: ModelSpec,
    pub monte_carlo: MonteCarloConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrConfig {
    pub kinds: Vec<DgpKind>,
    pub betas: Vec<f64>,
    pub m_points: Vec<f64>,
}

/// Fully resolved run settings. Thread count and output location are
/// deliberately absent: they do not affect any output byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum RunConfig {
    Fit(FitConfig),
    Bootstrap(FitConfig),
    Simulate(SimulateConfig),
    Heatmap(HeatmapConfig),
    Snr(SnrConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: RunConfig,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Float formatting used in every CSV: 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| MISSING.to_string(), fmt_f64)
}

pub fn parse_bandwidth(s: &str) -> Result<BandwidthRule> {
    match s.trim() {
        "rot" => Ok(BandwidthRule::RuleOfThumb),
        "under" => Ok(BandwidthRule::Undersmooth),
        v => match v.parse::<f64>() {
            Ok(b) if b > 0.0 && b.is_finite() => Ok(BandwidthRule::Fixed(b)),
            _ => Err(KinkError::validation(format!(
                "bandwidth must be rot, under or a positive number (got {s:?})"
            ))),
        },
    }
}

fn parse_triple(s: &str) -> Result<(f64, f64, usize)> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || KinkError::validation(format!("grid must be lo:hi:count or auto (got {s:?})"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo = parts[0].trim().parse().map_err(|_| bad())?;
    let hi = parts[1].trim().parse().map_err(|_| bad())?;
    let count = parts[2].trim().parse().map_err(|_| bad())?;
    Ok((lo, hi, count))
}

/// `lo:hi:count` in running-variable units, or `auto`.
pub fn parse_gamma_grid(s: &str) -> Result<Grid> {
    if s.trim() == "auto" {
        return Ok(Grid::default_gamma());
    }
    let (lo, hi, count) = parse_triple(s)?;
    let g = Grid::Linear { lo, hi, count };
    g.check()?;
    Ok(g)
}

/// `lo:hi:count` in shifter quantile levels, or `auto`.
pub fn parse_query_grid(s: &str, auto: Grid) -> Result<Grid> {
    if s.trim() == "auto" {
        return Ok(auto);
    }
    let (lo, hi, count) = parse_triple(s)?;
    let g = Grid::QuantileLevels { lo, hi, count };
    g.check()?;
    Ok(g)
}

pub fn parse_interior(s: &str) -> Result<(f64, f64)> {
    let bad = || KinkError::validation(format!("interior must be lo,hi (got {s:?})"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    Ok((
        a.trim().parse().map_err(|_| bad())?,
        b.trim().parse().map_err(|_| bad())?,
    ))
}

fn parse_kind(s: &str) -> Result<DgpKind> {
    match s.trim() {
        "exogenous" | "exo" => Ok(DgpKind::Exogenous),
        "endogenous" | "endo" => Ok(DgpKind::Endogenous),
        other => Err(KinkError::validation(format!("unknown design kind {other:?}"))),
    }
}

fn parse_threads(s: &str) -> Result<usize> {
    match s.trim() {
        "auto" => Ok(0),
        v => v
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| KinkError::validation(format!("threads must be a positive count or auto (got {s:?})"))),
    }
}

/// Endogenous columns implied by the model number.
pub fn endogenous_for_model(model: u8, running: &str, declared: &[String], covariates: &[String]) -> Result<Vec<String>> {
    match model {
        1 => {
            if !declared.is_empty() {
                return Err(KinkError::validation("model 1 takes no endogenous columns"));
            }
            Ok(Vec::new())
        }
        2 => {
            if declared.iter().any(|c| c != running) {
                return Err(KinkError::validation(
                    "model 2 instruments only the running variable; use model 3 for a covariate",
                ));
            }
            Ok(vec![running.to_string()])
        }
        3 => {
            let extra: Vec<&String> = declared.iter().filter(|c| *c != running).collect();
            if extra.len() != 1 {
                return Err(KinkError::validation(
                    "model 3 needs exactly one endogenous covariate in --endogenous-cols",
                ));
            }
            if !covariates.contains(extra[0]) {
                return Err(KinkError::MissingColumn(extra[0].clone()));
            }
            Ok(vec![running.to_string(), extra[0].clone()])
        }
        m => Err(KinkError::validation(format!("unknown model {m}"))),
    }
}

fn data_config(a: &DataArgs) -> Result<DataConfig> {
    if !a.delimiter.is_ascii() {
        return Err(KinkError::validation("delimiter must be a single ASCII character"));
    }
    let schema = CsvSchema {
        outcome: a.outcome_col.clone(),
        running: a.running_col.clone(),
        shifter: a.shifter_col.clone(),
        covariates: a.covariate_cols.clone(),
        instruments: a.instrument_cols.clone(),
        export_flag: a.export_flag_col.clone(),
        extras: Vec::new(),
        delimiter: a.delimiter as u8,
    };
    let cleaning = CleaningSpec {
        require_positive: a.require_positive.clone(),
        require_nonnegative: a.require_nonnegative.clone(),
        trim_upper_fraction: a.trim,
        standardize: a.standardize.clone(),
        quantile_transform: a.quantile_cols.clone(),
    };
    Ok(DataConfig {
        input: a.input.clone(),
        schema,
        cleaning,
    })
}

fn model_spec(s: &SpecArgs, data: &DataArgs, query_auto: Grid) -> Result<ModelSpec> {
    let spec = ModelSpec {
        bandwidth: parse_bandwidth(&s.bandwidth)?,
        gamma_grid: parse_gamma_grid(&s.gamma_grid)?,
        query_grid: parse_query_grid(&s.query_grid, query_auto)?,
        interior: parse_interior(&s.interior)?,
        endogenous: endogenous_for_model(s.model, &data.running_col, &data.endogenous_cols, &data.covariate_cols)?,
        ..ModelSpec::default()
    };
    spec.check()?;
    Ok(spec)
}

fn fit_config(a: &FitArgs, default_draws: Option<usize>) -> Result<FitConfig> {
    let draws = a.bootstrap.or(default_draws).filter(|b| *b > 0);
    Ok(FitConfig {
        data: data_config(&a.data)?,
        model: a.spec.model,
        spec: model_spec(&a.spec, &a.data, Grid::default_query())?,
        bootstrap: draws.map(|draws| BootstrapSettings {
            draws,
            alpha: a.alpha,
            seed: a.seed,
        }),
    })
}

/// Heatmap overlay default: one contour point per shifter decile midpoint.
pub fn decile_midpoints() -> Grid {
    Grid::QuantileLevels {
        lo: 0.05,
        hi: 0.95,
        count: 10,
    }
}

fn simulate_config(a: &SimulateArgs) -> Result<SimulateConfig> {
    let kinds: Vec<DgpKind> = a.kinds.iter().map(|k| parse_kind(k)).collect::<Result<_>>()?;
    let mut designs = Vec::new();
    for &kind in &kinds {
        for &n in &a.sizes {
            for &beta in &a.betas {
                designs.push(DgpSpec::new(kind, beta, n, 0));
            }
        }
    }
    let spec = ModelSpec {
        bandwidth: parse_bandwidth(&a.bandwidth)?,
        ..simulation::simulation_model_spec()
    };
    Ok(SimulateConfig {
        designs,
        spec,
        monte_carlo: MonteCarloConfig {
            replications: a.replications,
            seed: a.seed,
            control_function: !a.no_control_function,
            bootstrap_draws: a.bootstrap,
            alpha: a.alpha,
            ..MonteCarloConfig::default()
        },
    })
}

fn resolve(cmd: &Command) -> Result<(RunConfig, PathBuf)> {
    Ok(match cmd {
        Command::Fit(a) => (RunConfig::Fit(fit_config(a, None)?), a.output_dir.clone()),
        Command::Bootstrap(a) => (
            RunConfig::Bootstrap(fit_config(a, Some(DEFAULT_DRAWS))?),
            a.output_dir.clone(),
        ),
        Command::Heatmap(a) => (
            RunConfig::Heatmap(HeatmapConfig {
                data: data_config(&a.data)?,
                model: a.spec.model,
                spec: model_spec(&a.spec, &a.data, decile_midpoints())?,
            }),
            a.output_dir.clone(),
        ),
        Command::Simulate(a) => (RunConfig::Simulate(simulate_config(a)?), a.output_dir.clone()),
        Command::Snr(a) => (
            RunConfig::Snr(SnrConfig {
                kinds: a.kinds.iter().map(|k| parse_kind(k)).collect::<Result<_>>()?,
                betas: a.betas.clone(),
                m_points: a.m_points.clone(),
            }),
            a.output_dir.clone(),
        ),
        Command::Replay(a) => (read_manifest(&a.manifest)?.config, a.output_dir.clone()),
    })
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| KinkError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| KinkError::validation(format!("invalid manifest {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| KinkError::Io(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| KinkError::Io(format!("serializing {}: {e}", path.display())))?;
    s.push('\n');
    write_text(path, &s)
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let io = |e: csv::Error| KinkError::Io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

fn load_and_clean(cfg: &DataConfig) -> Result<(Dataset, pipeline::CleaningReport)> {
    let raw = pipeline::load_csv(&cfg.input, &cfg.schema)?;
    pipeline::clean(&raw, &cfg.cleaning)
}

/// Runs a resolved configuration, writing its artifacts and manifest into
/// `out`. Returns the paths written.
pub fn execute(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| KinkError::Io(format!("{}: {e}", out.display())))?;
    let mut written = match config {
        RunConfig::Fit(c) | RunConfig::Bootstrap(c) => run_fit(c, out)?,
        RunConfig::Simulate(c) => run_simulate(c, out)?,
        RunConfig::Heatmap(c) => run_heatmap(c, out)?,
        RunConfig::Snr(c) => run_snr(c, out)?,
    };
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
    };
    let path = out.join(MANIFEST_FILE);
    write_json(&path, &manifest)?;
    written.push(path);
    Ok(written)
}

fn run_fit(c: &FitConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let (data, cleaning) = load_and_clean(&c.data)?;
    let res = fit::fit(&data, &c.spec, c.bootstrap)?;

    let contour_path = out.join("contour.csv");
    write_contour(&contour_path, &res)?;

    let loo_path = out.join("loo_thresholds.csv");
    let loo = res.contour.loo_gamma.as_deref().unwrap_or_default();
    let rows: Vec<Vec<String>> = (0..res.dataset.n())
        .map(|i| {
            let used = res.contour.interior_mask[i] && loo[i].is_some();
            vec![
                (i + 1).to_string(),
                fmt_f64(res.dataset.shifter[i]),
                fmt_opt(res.full_gamma[i]),
                fmt_opt(loo[i]),
                u8::from(res.contour.interior_mask[i]).to_string(),
                u8::from(used).to_string(),
            ]
        })
        .collect();
    write_csv(&loo_path, &["row", "m", "gamma_full", "gamma_loo", "interior", "used"], &rows)?;

    let coef_path = out.join("coefficients.json");
    write_json(&coef_path, &coefficients_record(c, &res, &cleaning))?;
    Ok(vec![contour_path, loo_path, coef_path])
}

fn write_contour(path: &Path, res: &FitResult) -> Result<()> {
    let c = &res.contour;
    let rows: Vec<Vec<String>> = (0..c.query_points.len())
        .map(|k| {
            vec![
                fmt_f64(c.query_levels[k]),
                fmt_f64(c.query_points[k]),
                fmt_opt(c.gamma_hat[k]),
                fmt_f64(c.effective_mass[k]),
                u8::from(c.gamma_hat[k].is_none()).to_string(),
            ]
        })
        .collect();
    write_csv(
        path,
        &["m_quantile", "m", "gamma_hat", "effective_mass", "missing_flag"],
        &rows,
    )
}

/// Coefficient table as written to `coefficients.json`; the intercept is
/// left out.
pub fn coefficients_record(c: &FitConfig, res: &FitResult, cleaning: &pipeline::CleaningReport) -> serde_json::Value {
    let est = &res.coefficients;
    let names = est.names();
    let values = est.coefficients();
    let boot = res.bootstrap.as_ref();
    let table: Vec<serde_json::Value> = names
        .iter()
        .enumerate()
        .filter(|(_, n)| n.as_str() != crate::model::INTERCEPT)
        .map(|(j, name)| {
            let se = est.standard_errors.as_ref().map(|s| s[j]);
            let p = se.filter(|s| *s > 0.0).map(|s| stats::two_sided_p(values[j] / s));
            json!({
                "name": name,
                "estimate": values[j],
                "std_error": se,
                "ci_lower": boot.map(|b| b.ci_lower[j]),
                "ci_upper": boot.map(|b| b.ci_upper[j]),
                "p_value": p,
                "stars": p.map(stats::stars),
            })
        })
        .collect();
    let grid = &res.contour.gamma_grid;
    json!({
        "model": c.model,
        "coefficients": table,
        "beta_g": est.beta_g,
        "beta_x": est.beta_x,
        "n_used": est.n_used,
        "n_boundary": est.n_boundary,
        "n": res.dataset.n(),
        "bandwidth": res.contour.bandwidth,
        "gamma_grid": {
            "lo": grid.first(),
            "hi": grid.last(),
            "count": grid.len(),
        },
        "query_points": res.contour.query_points.len(),
        "missing_query_points": res.contour.gamma_hat.iter().filter(|g| g.is_none()).count(),
        "bootstrap": boot.map(|b| json!({
            "draws": b.n_draws,
            "alpha": b.alpha,
            "seed": b.seed,
        })),
        "first_stage": res.control.as_ref().map(|cf| json!({
            "regressors": cf.first_stage_names,
            "coefficients": cf.first_stage_coefficients,
            "residual_columns": cf.residuals.iter().map(|r| r.name.clone()).collect::<Vec<_>>(),
        })),
        "cleaning": cleaning,
        "diagnostics": res.diagnostics,
    })
}

fn run_heatmap(c: &HeatmapConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let (data, _) = load_and_clean(&c.data)?;
    if data.export_flag.is_none() {
        return Err(KinkError::validation("heatmap needs --export-flag-col"));
    }
    let estimation = if c.spec.endogenous.is_empty() {
        data.clone()
    } else {
        let inst = data
            .instruments
            .as_deref()
            .ok_or_else(|| KinkError::validation("endogenous columns need instruments"))?;
        crate::inference::control_function(&data, &c.spec.endogenous, inst)?.augmented
    };
    crate::model::ensure_valid(&estimation, &c.spec)?;
    let contour = estimator::estimate_contour(&estimation, &c.spec)?;
    let pairs: Vec<(f64, f64)> = contour
        .query_points
        .iter()
        .zip(&contour.gamma_hat)
        .filter_map(|(&m, g)| g.map(|g| (m, g)))
        .collect();
    let grid = pipeline::heatmap(&data, &pairs)?;

    let cells_path = out.join("heatmap_cells.csv");
    let mut rows = Vec::new();
    for (a, row) in grid.fractions.iter().enumerate() {
        for (b, f) in row.iter().enumerate() {
            rows.push(vec![
                (a + 1).to_string(),
                (b + 1).to_string(),
                grid.counts[a][b].to_string(),
                fmt_opt(*f),
            ]);
        }
    }
    write_csv(&cells_path, &["m_decile", "g_decile", "count", "export_fraction"], &rows)?;

    let overlay_path = out.join("heatmap_overlay.csv");
    let rows: Vec<Vec<String>> = pairs
        .iter()
        .zip(&grid.overlay)
        .map(|(&(m, g), &(mp, gp))| vec![fmt_f64(mp), fmt_f64(gp), fmt_f64(m), fmt_f64(g)])
        .collect();
    write_csv(&overlay_path, &["m_percentile", "gamma_percentile", "m", "gamma_hat"], &rows)?;
    Ok(vec![cells_path, overlay_path])
}

fn run_snr(c: &SnrConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let designs: Vec<DgpSpec> = c
        .kinds
        .iter()
        .flat_map(|&k| c.betas.iter().map(move |&b| DgpSpec::new(k, b, 1, 0)))
        .collect();
    let table = simulation::snr_table(&designs, &c.m_points);
    let path = out.join("snr.csv");
    let rows: Vec<Vec<String>> = table
        .iter()
        .map(|e| {
            vec![
                e.kind.as_str().to_string(),
                fmt_f64(e.beta_g0),
                e.m.map_or_else(|| "global".to_string(), fmt_f64),
                fmt_f64(e.snr),
            ]
        })
        .collect();
    write_csv(&path, &["kind", "beta_g0", "m", "snr"], &rows)?;
    Ok(vec![path])
}

fn run_simulate(c: &SimulateConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let report = simulation::run_monte_carlo(&c.designs, &c.spec, &c.monte_carlo)?;
    write_simulation(&report, out)
}

/// Writes every simulation artifact: the long cell table, the wide tables
/// per design kind, the histogram, averaged contours and the JSON report.
pub fn write_simulation(report: &SimulationReport, out: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();

    let path = out.join("simulation_cells.csv");
    let mut rows = Vec::new();
    for cell in &report.cells {
        let base = |stat: &str, v: f64, se: String| {
            vec![
                cell.kind.as_str().to_string(),
                cell.n.to_string(),
                fmt_f64(cell.beta_g0),
                cell.target.label(),
                stat.to_string(),
                fmt_f64(v),
                se,
                cell.n_ok.to_string(),
                cell.n_failed.to_string(),
            ]
        };
        rows.push(base("bias", cell.bias, fmt_f64(cell.bias_se)));
        rows.push(base("rmse", cell.rmse, fmt_f64(cell.rmse_se)));
        if let Some(cov) = cell.coverage {
            rows.push(base("coverage", cov, MISSING.into()));
        }
    }
    write_csv(
        &path,
        &["kind", "n", "beta_g0", "target", "statistic", "value", "mc_se", "n_ok", "n_failed"],
        &rows,
    )?;
    written.push(path);

    let snr_of = |kind: DgpKind, beta: f64, m: Option<f64>| {
        report
            .snr
            .iter()
            .find(|e| e.kind == kind && e.beta_g0 == beta && e.m == m)
            .map(|e| e.snr)
    };
    for kind in [DgpKind::Exogenous, DgpKind::Endogenous] {
        let cells: Vec<_> = report.cells.iter().filter(|c| c.kind == kind).collect();
        if cells.is_empty() {
            continue;
        }
        let path = out.join(format!("table_beta_{}.csv", kind.as_str()));
        let rows: Vec<Vec<String>> = cells
            .iter()
            .filter(|c| c.target == Target::BetaG)
            .map(|c| {
                vec![
                    c.n.to_string(),
                    fmt_f64(c.beta_g0),
                    fmt_opt(snr_of(kind, c.beta_g0, None)),
                    fmt_f64(c.bias),
                    fmt_f64(c.rmse),
                    fmt_f64(c.bias_se),
                    fmt_f64(c.rmse_se),
                ]
            })
            .collect();
        write_csv(&path, &["n", "beta_g0", "snr", "bias", "rmse", "bias_se", "rmse_se"], &rows)?;
        written.push(path);

        let ms: Vec<f64> = {
            let mut v: Vec<f64> = Vec::new();
            for c in &cells {
                if let Some(m) = c.target.m() {
                    if !v.contains(&m) {
                        v.push(m);
                    }
                }
            }
            v
        };
        if ms.is_empty() {
            continue;
        }
        let mut header = vec!["n".to_string(), "beta_g0".to_string()];
        for m in &ms {
            for s in ["snr", "bias", "rmse"] {
                header.push(format!("{s}[m={m}]"));
            }
        }
        let mut rows = Vec::new();
        for c in cells.iter().filter(|c| c.target == Target::BetaG) {
            let mut row = vec![c.n.to_string(), fmt_f64(c.beta_g0)];
            for &m in &ms {
                let g = cells
                    .iter()
                    .find(|x| x.n == c.n && x.beta_g0 == c.beta_g0 && x.target == Target::Gamma(m));
                row.push(fmt_opt(snr_of(kind, c.beta_g0, Some(m))));
                row.push(fmt_opt(g.map(|g| g.bias)));
                row.push(fmt_opt(g.map(|g| g.rmse)));
            }
            rows.push(row);
        }
        let path = out.join(format!("table_gamma_{}.csv", kind.as_str()));
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(&path, &header, &rows)?;
        written.push(path);
    }

    if let Some(h) = &report.histogram {
        let path = out.join("histogram.csv");
        let rows: Vec<Vec<String>> = h
            .bins
            .iter()
            .map(|b| vec![fmt_f64(b.left), fmt_f64(b.right), b.count.to_string()])
            .collect();
        write_csv(&path, &["bin_left", "bin_right", "count"], &rows)?;
        written.push(path);
    }

    let path = out.join("average_contour.csv");
    let mut rows = Vec::new();
    for c in &report.average_contours {
        for k in 0..c.m.len() {
            rows.push(vec![
                c.kind.as_str().to_string(),
                c.n.to_string(),
                fmt_f64(c.beta_g0),
                fmt_f64(c.m[k]),
                fmt_opt(c.mean_gamma[k]),
                fmt_f64(c.truth[k]),
            ]);
        }
    }
    write_csv(&path, &["kind", "n", "beta_g0", "m", "mean_gamma_hat", "true_gamma"], &rows)?;
    written.push(path);

    let path = out.join("simulation.json");
    write_json(&path, report)?;
    written.push(path);
    Ok(written)
}

/// Error record printed on stderr when a command fails.
pub fn error_record(e: &KinkError) -> serde_json::Value {
    let mut v = json!({
        "error": e.kind(),
        "message": e.to_string(),
        "exit_code": e.exit_code(),
    });
    match e {
        KinkError::Load { row, column, .. } => {
            v["row"] = json!(row);
            v["column"] = json!(column);
        }
        KinkError::MissingColumn(c) => v["column"] = json!(c),
        KinkError::DegenerateWindow { query, .. } => v["query"] = json!(query),
        KinkError::SingularFit { gamma, .. } => v["gamma"] = json!(gamma),
        _ => {}
    }
    v
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let result = parse_threads(&cli.threads).and_then(|threads| {
        let (config, out) = resolve(&cli.command)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| KinkError::validation(format!("thread pool: {e}")))?;
        pool.install(|| execute(&config, &out))
    });
    match result {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            e.exit_code()
        }
    }
}

pub fn main() -> i32 {
    run(std::env::args_os())
}
