//! Data types shared by the estimator, inference and pipeline modules.

use serde::{Deserialize, Serialize};

use crate::error::{KinkError, Result};

/// Name given to the intercept column created by [`Dataset::new`].
pub const INTERCEPT: &str = "const";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    Intercept,
    Regressor,
    /// First-stage residual appended by the control-function step.
    Control,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub role: ColumnRole,
    pub values: Vec<f64>,
}

impl Column {
    pub fn new(name: impl Into<String>, role: ColumnRole, values: Vec<f64>) -> Self {
        Column {
            name: name.into(),
            role,
            values,
        }
    }
}

/// Column-oriented table of observations.
///
/// `covariates` always holds the intercept as one of its columns; control
/// residuals appended by the control-function step are tagged with
/// [`ColumnRole::Control`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub outcome_name: String,
    pub outcome: Vec<f64>,
    pub running_name: String,
    pub running: Vec<f64>,
    pub shifter_name: String,
    pub shifter: Vec<f64>,
    pub covariates: Vec<Column>,
    pub instruments: Option<Vec<Column>>,
    pub export_flag: Option<Vec<u8>>,
    /// Columns carried through cleaning but not used in estimation.
    pub extras: Vec<Column>,
}

impl Dataset {
    /// Creates a dataset with an intercept as its only covariate.
    pub fn new(outcome: Vec<f64>, running: Vec<f64>, shifter: Vec<f64>) -> Self {
        let n = outcome.len();
        Dataset {
            outcome_name: "outcome".into(),
            outcome,
            running_name: "running".into(),
            running,
            shifter_name: "shifter".into(),
            shifter,
            covariates: vec![Column::new(INTERCEPT, ColumnRole::Intercept, vec![1.0; n])],
            instruments: None,
            export_flag: None,
            extras: Vec::new(),
        }
    }

    pub fn with_names(mut self, outcome: &str, running: &str, shifter: &str) -> Self {
        self.outcome_name = outcome.into();
        self.running_name = running.into();
        self.shifter_name = shifter.into();
        self
    }

    pub fn with_covariate(mut self, name: impl Into<String>, values: Vec<f64>) -> Self {
        self.covariates
            .push(Column::new(name, ColumnRole::Regressor, values));
        self
    }

    pub fn with_instrument(mut self, name: impl Into<String>, values: Vec<f64>) -> Self {
        self.instruments
            .get_or_insert_with(Vec::new)
            .push(Column::new(name, ColumnRole::Regressor, values));
        self
    }

    pub fn with_export_flag(mut self, flags: Vec<u8>) -> Self {
        self.export_flag = Some(flags);
        self
    }

    pub fn with_extra(mut self, name: impl Into<String>, values: Vec<f64>) -> Self {
        self.extras
            .push(Column::new(name, ColumnRole::Regressor, values));
        self
    }

    pub fn n(&self) -> usize {
        self.outcome.len()
    }

    /// Number of covariate columns, intercept and control residuals included.
    pub fn p(&self) -> usize {
        self.covariates.len()
    }

    /// Total regressors in the local kink design: both slopes plus covariates.
    pub fn design_width(&self) -> usize {
        self.p() + 2
    }

    /// Looks up any numeric column by name.
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        if name == self.outcome_name {
            return Some(&self.outcome);
        }
        if name == self.running_name {
            return Some(&self.running);
        }
        if name == self.shifter_name {
            return Some(&self.shifter);
        }
        self.covariates
            .iter()
            .chain(self.instruments.iter().flatten())
            .chain(self.extras.iter())
            .find(|c| c.name == name)
            .map(|c| c.values.as_slice())
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names = vec![
            self.outcome_name.clone(),
            self.running_name.clone(),
            self.shifter_name.clone(),
        ];
        names.extend(self.covariates.iter().map(|c| c.name.clone()));
        names.extend(self.instruments.iter().flatten().map(|c| c.name.clone()));
        names.extend(self.extras.iter().map(|c| c.name.clone()));
        names
    }

    /// Keeps the rows whose mask entry is true, in order.
    pub fn select_rows(&self, keep: &[bool]) -> Dataset {
        let pick = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(x, _)| *x)
                .collect()
        };
        let pick_cols = |cols: &[Column]| -> Vec<Column> {
            cols.iter()
                .map(|c| Column::new(c.name.clone(), c.role, pick(&c.values)))
                .collect()
        };
        Dataset {
            outcome_name: self.outcome_name.clone(),
            outcome: pick(&self.outcome),
            running_name: self.running_name.clone(),
            running: pick(&self.running),
            shifter_name: self.shifter_name.clone(),
            shifter: pick(&self.shifter),
            covariates: pick_cols(&self.covariates),
            instruments: self.instruments.as_deref().map(pick_cols),
            export_flag: self.export_flag.as_ref().map(|f| {
                f.iter()
                    .zip(keep)
                    .filter(|(_, &k)| k)
                    .map(|(x, _)| *x)
                    .collect()
            }),
            extras: pick_cols(&self.extras),
        }
    }

    /// Mutable access to a numeric column by name.
    pub fn column_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        if name == self.outcome_name {
            return Some(&mut self.outcome);
        }
        if name == self.running_name {
            return Some(&mut self.running);
        }
        if name == self.shifter_name {
            return Some(&mut self.shifter);
        }
        self.covariates
            .iter_mut()
            .chain(self.instruments.iter_mut().flatten())
            .chain(self.extras.iter_mut())
            .find(|c| c.name == name)
            .map(|c| &mut c.values)
    }

    /// Kink design row `z_i(gamma)` for observation `i`.
    pub fn design_row(&self, i: usize, gamma: f64) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.design_width());
        let d = self.running[i] - gamma;
        row.push(d.min(0.0));
        row.push(d.max(0.0));
        row.extend(self.covariates.iter().map(|c| c.values[i]));
        row
    }

    /// Names of the kink design columns in coefficient order.
    pub fn design_names(&self) -> Vec<String> {
        let mut names = vec!["beta_g".to_string(), "beta_x".to_string()];
        names.extend(self.covariates.iter().map(|c| c.name.clone()));
        names
    }
}

/// The kink basis `((g - gamma)_-, (g - gamma)_+, x)` of one observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinkBasis {
    pub neg: f64,
    pub pos: f64,
    pub covs: Vec<f64>,
}

pub fn kink_basis(g: f64, gamma: f64, covs: &[f64]) -> Result<KinkBasis> {
    if !g.is_finite() || !gamma.is_finite() || covs.iter().any(|c| !c.is_finite()) {
        return Err(KinkError::validation("kink basis requires finite inputs"));
    }
    let d = g - gamma;
    Ok(KinkBasis {
        neg: d.min(0.0),
        pos: d.max(0.0),
        covs: covs.to_vec(),
    })
}

/// Pointwise estimate `theta(m)` at one query point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalFit {
    pub query_point: f64,
    pub gamma: f64,
    pub beta_g: f64,
    pub beta_x: f64,
    pub beta_c: Vec<f64>,
    pub ssr: f64,
    pub effective_mass: f64,
}

impl LocalFit {
    pub fn coefficients(&self) -> Vec<f64> {
        let mut v = vec![self.beta_g, self.beta_x];
        v.extend_from_slice(&self.beta_c);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    #[default]
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    /// `n^(-1/5)`
    RuleOfThumb,
    /// `n^(-1/3.5)`
    Undersmooth,
    Fixed(f64),
}

/// How a one-dimensional grid is laid out against a variable's sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grid {
    /// `count` equally spaced values on `[lo, hi]`.
    Linear { lo: f64, hi: f64, count: usize },
    /// `count` equally spaced values between the empirical `lo` and `hi`
    /// quantiles of the variable.
    QuantileSpan { lo: f64, hi: f64, count: usize },
    /// Empirical quantiles at `count` equally spaced levels on `[lo, hi]`.
    QuantileLevels { lo: f64, hi: f64, count: usize },
    Points(Vec<f64>),
}

impl Grid {
    pub fn default_gamma() -> Self {
        Grid::QuantileSpan {
            lo: 0.02,
            hi: 0.98,
            count: 401,
        }
    }

    pub fn default_query() -> Self {
        Grid::QuantileLevels {
            lo: 0.15,
            hi: 0.85,
            count: 71,
        }
    }

    pub fn check(&self) -> Result<()> {
        match *self {
            Grid::Linear { lo, hi, count } => {
                if count < 2 || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(KinkError::validation(format!(
                        "linear grid needs count >= 2 and lo < hi (got {lo}:{hi}:{count})"
                    )));
                }
            }
            Grid::QuantileSpan { lo, hi, count } | Grid::QuantileLevels { lo, hi, count } => {
                if count < 2 || !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi
                {
                    return Err(KinkError::validation(format!(
                        "quantile grid needs count >= 2 and 0 <= lo < hi <= 1 (got {lo}:{hi}:{count})"
                    )));
                }
            }
            Grid::Points(ref pts) => {
                if pts.iter().any(|p| !p.is_finite()) {
                    return Err(KinkError::validation("grid points must be finite"));
                }
            }
        }
        Ok(())
    }

    /// Materializes the grid against the sample `values`.
    pub fn resolve(&self, values: &[f64]) -> Vec<f64> {
        let lin = |lo: f64, hi: f64, count: usize| -> Vec<f64> {
            (0..count)
                .map(|k| {
                    if k + 1 == count {
                        hi
                    } else {
                        lo + (hi - lo) * k as f64 / (count - 1) as f64
                    }
                })
                .collect()
        };
        match *self {
            Grid::Linear { lo, hi, count } => lin(lo, hi, count),
            Grid::QuantileSpan { lo, hi, count } => {
                let sorted = crate::stats::sorted(values);
                lin(
                    crate::stats::quantile_sorted(&sorted, lo),
                    crate::stats::quantile_sorted(&sorted, hi),
                    count,
                )
            }
            Grid::QuantileLevels { lo, hi, count } => {
                let sorted = crate::stats::sorted(values);
                lin(lo, hi, count)
                    .into_iter()
                    .map(|p| crate::stats::quantile_sorted(&sorted, p))
                    .collect()
            }
            Grid::Points(ref pts) => pts.clone(),
        }
    }
}

/// Estimation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kernel: KernelKind,
    pub bandwidth: BandwidthRule,
    pub gamma_grid: Grid,
    pub query_grid: Grid,
    /// Quantile bounds of the shifter defining the second-step interior set.
    pub interior: (f64, f64),
    /// Columns instrumented by a control function: the running variable's
    /// name or covariate names.
    pub endogenous: Vec<String>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            kernel: KernelKind::Gaussian,
            bandwidth: BandwidthRule::RuleOfThumb,
            gamma_grid: Grid::default_gamma(),
            query_grid: Grid::default_query(),
            interior: (0.01, 0.99),
            endogenous: Vec::new(),
        }
    }
}

impl ModelSpec {
    pub fn check(&self) -> Result<()> {
        if let BandwidthRule::Fixed(b) = self.bandwidth {
            if !(b > 0.0) || !b.is_finite() {
                return Err(KinkError::validation(format!(
                    "fixed bandwidth must be positive (got {b})"
                )));
            }
        }
        self.gamma_grid.check()?;
        if let Grid::Points(p) = &self.gamma_grid {
            if p.is_empty() || p.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(KinkError::validation(
                    "gamma grid points must be non-empty and strictly increasing",
                ));
            }
        }
        self.query_grid.check()?;
        let (lo, hi) = self.interior;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
            return Err(KinkError::validation(format!(
                "interior quantiles need 0 <= lo < hi <= 1 (got {lo}, {hi})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub row: Option<usize>,
    pub column: Option<String>,
    pub message: String,
}

impl Diagnostic {
    fn error(row: Option<usize>, column: Option<&str>, message: impl Into<String>) -> Self {
        Diagnostic {
            severity: Severity::Error,
            row,
            column: column.map(str::to_string),
            message: message.into(),
        }
    }
}

/// Checks dataset invariants and consistency with `spec`. Errors and
/// warnings are both returned; the dataset is usable iff no error is present.
pub fn validate(dataset: &Dataset, spec: &ModelSpec) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let n = dataset.n();
    if n == 0 {
        out.push(Diagnostic::error(None, None, "dataset has no rows"));
    }

    let mut numeric: Vec<(&str, &[f64])> = vec![
        (dataset.outcome_name.as_str(), &dataset.outcome),
        (dataset.running_name.as_str(), &dataset.running),
        (dataset.shifter_name.as_str(), &dataset.shifter),
    ];
    numeric.extend(
        dataset
            .covariates
            .iter()
            .chain(dataset.instruments.iter().flatten())
            .map(|c| (c.name.as_str(), c.values.as_slice())),
    );
    for (name, values) in &numeric {
        if values.len() != n {
            out.push(Diagnostic::error(
                None,
                Some(name),
                format!("column has {} rows, expected {n}", values.len()),
            ));
            continue;
        }
        if let Some(row) = values.iter().position(|v| !v.is_finite()) {
            out.push(Diagnostic::error(
                Some(row),
                Some(name),
                format!("non-finite value {}", values[row]),
            ));
        }
    }
    if let Some(flags) = &dataset.export_flag {
        if flags.len() != n {
            out.push(Diagnostic::error(
                None,
                Some("export_flag"),
                format!("column has {} rows, expected {n}", flags.len()),
            ));
        } else if let Some(row) = flags.iter().position(|&f| f > 1) {
            out.push(Diagnostic::error(
                Some(row),
                Some("export_flag"),
                "export flag must be 0 or 1",
            ));
        }
    }

    let constant = |v: &[f64]| v.len() == n && n > 0 && v.iter().all(|x| *x == v[0]);
    let n_const = dataset
        .covariates
        .iter()
        .filter(|c| constant(&c.values))
        .count();
    if n_const != 1 {
        out.push(Diagnostic::error(
            None,
            None,
            format!("covariates must contain exactly one constant column (found {n_const})"),
        ));
    }

    if dataset
        .covariates
        .iter()
        .any(|c| c.values == dataset.shifter)
    {
        out.push(Diagnostic {
            severity: Severity::Warning,
            row: None,
            column: Some(dataset.shifter_name.clone()),
            message: "threshold shifter also enters the covariates; local designs may be nearly collinear".into(),
        });
    }

    if !spec.endogenous.is_empty() {
        for name in &spec.endogenous {
            let known = *name == dataset.running_name
                || dataset.covariates.iter().any(|c| c.name == *name);
            if !known {
                out.push(Diagnostic::error(
                    None,
                    Some(name),
                    "endogenous column is neither the running variable nor a covariate",
                ));
            }
        }
        match &dataset.instruments {
            None => out.push(Diagnostic::error(
                None,
                None,
                "endogenous columns declared but no instruments supplied",
            )),
            Some(inst) if inst.len() < spec.endogenous.len() => out.push(Diagnostic::error(
                None,
                None,
                format!(
                    "{} instruments cannot identify {} endogenous columns",
                    inst.len(),
                    spec.endogenous.len()
                ),
            )),
            _ => {}
        }
    }

    if let Err(e) = spec.check() {
        out.push(Diagnostic::error(None, None, e.to_string()));
    }
    out
}

/// Converts validation diagnostics into an error if any is fatal.
pub fn ensure_valid(dataset: &Dataset, spec: &ModelSpec) -> Result<Vec<Diagnostic>> {
    let diags = validate(dataset, spec);
    if let Some(d) = diags.iter().find(|d| d.severity == Severity::Error) {
        let loc = match (&d.row, &d.column) {
            (Some(r), Some(c)) => format!(" (row {r}, column '{c}')"),
            (None, Some(c)) => format!(" (column '{c}')"),
            _ => String::new(),
        };
        return Err(KinkError::validation(format!("{}{loc}", d.message)));
    }
    Ok(diags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(n: usize) -> Dataset {
        let g: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let m: Vec<f64> = (0..n).map(|i| (i as f64 * 0.11).cos()).collect();
        let y: Vec<f64> = g.iter().map(|v| v * 2.0).collect();
        Dataset::new(y, g, m)
    }

    #[test]
    fn basis_examples() {
        let b = kink_basis(2.0, 1.0, &[1.0]).unwrap();
        assert_eq!((b.neg, b.pos, b.covs), (0.0, 1.0, vec![1.0]));
        let b = kink_basis(-0.5, 0.0, &[1.0]).unwrap();
        assert_eq!((b.neg, b.pos), (-0.5, 0.0));
        let b = kink_basis(1.0, 1.0, &[1.0]).unwrap();
        assert_eq!((b.neg, b.pos), (0.0, 0.0));
        assert!(kink_basis(f64::NAN, 0.0, &[]).is_err());
        assert!(kink_basis(0.0, 0.0, &[f64::INFINITY]).is_err());
    }

    proptest! {
        #[test]
        fn basis_splits_exactly(g in -1e3f64..1e3, gamma in -1e3f64..1e3) {
            let b = kink_basis(g, gamma, &[]).unwrap();
            prop_assert!(b.neg <= 0.0 && b.pos >= 0.0);
            prop_assert!(b.neg * b.pos == 0.0);
            prop_assert_eq!(b.neg + b.pos, g - gamma);
        }

        #[test]
        fn basis_is_lipschitz_in_gamma(g in -10f64..10.0, a in -10f64..10.0, b in -10f64..10.0) {
            let x = kink_basis(g, a, &[]).unwrap();
            let y = kink_basis(g, b, &[]).unwrap();
            let tol = (a - b).abs() * (1.0 + 1e-12) + 1e-12;
            prop_assert!((x.neg - y.neg).abs() <= tol);
            prop_assert!((x.pos - y.pos).abs() <= tol);
        }
    }

    #[test]
    fn well_formed_dataset_has_no_diagnostics() {
        assert!(validate(&sample(100), &ModelSpec::default()).is_empty());
    }

    #[test]
    fn non_finite_outcome_is_located() {
        let mut d = sample(100);
        d.outcome[17] = f64::NAN;
        let diags = validate(&d, &ModelSpec::default());
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].row, Some(17));
        assert_eq!(diags[0].column.as_deref(), Some("outcome"));
    }

    #[test]
    fn endogenous_without_instruments() {
        let spec = ModelSpec {
            endogenous: vec!["running".into()],
            ..ModelSpec::default()
        };
        let diags = validate(&sample(100), &spec);
        assert_eq!(diags.len(), 1);
        assert!(diags[0].message.contains("no instruments"));
    }

    #[test]
    fn constant_column_count_is_enforced() {
        let d = sample(10).with_covariate("dup_const", vec![3.0; 10]);
        assert_eq!(validate(&d, &ModelSpec::default()).len(), 1);
    }

    #[test]
    fn shifter_as_covariate_warns() {
        let d = sample(20);
        let m = d.shifter.clone();
        let diags = validate(&d.with_covariate("m", m), &ModelSpec::default());
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].severity, Severity::Warning);
    }

    #[test]
    fn spec_checks() {
        let mut s = ModelSpec::default();
        assert!(s.check().is_ok());
        s.bandwidth = BandwidthRule::Fixed(0.0);
        assert!(s.check().is_err());
        s.bandwidth = BandwidthRule::RuleOfThumb;
        s.interior = (0.5, 0.5);
        assert!(s.check().is_err());
        s.interior = (0.01, 0.99);
        s.gamma_grid = Grid::Linear {
            lo: 0.0,
            hi: 1.0,
            count: 1,
        };
        assert!(s.check().is_err());
    }

    #[test]
    fn grids_resolve() {
        let v: Vec<f64> = (0..=100).map(f64::from).collect();
        let g = Grid::QuantileSpan {
            lo: 0.1,
            hi: 0.9,
            count: 5,
        }
        .resolve(&v);
        assert_eq!(g, vec![10.0, 30.0, 50.0, 70.0, 90.0]);
        let q = Grid::QuantileLevels {
            lo: 0.0,
            hi: 1.0,
            count: 3,
        }
        .resolve(&v);
        assert_eq!(q, vec![0.0, 50.0, 100.0]);
    }
}
