//! CSV loading, sample cleaning and the decile heatmap of the running
//! variable against the shifter.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KinkError, Result};
use crate::model::Dataset;
use crate::stats;

/// Which CSV columns play which role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub outcome: String,
    pub running: String,
    pub shifter: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub instruments: Vec<String>,
    #[serde(default)]
    pub export_flag: Option<String>,
    /// Loaded and carried through cleaning, not used in estimation.
    #[serde(default)]
    pub extras: Vec<String>,
    #[serde(default = "default_delimiter")]
    pub delimiter: u8,
}

fn default_delimiter() -> u8 {
    b','
}

impl CsvSchema {
    pub fn new(outcome: &str, running: &str, shifter: &str) -> Self {
        CsvSchema {
            outcome: outcome.into(),
            running: running.into(),
            shifter: shifter.into(),
            covariates: Vec::new(),
            instruments: Vec::new(),
            export_flag: None,
            extras: Vec::new(),
            delimiter: b',',
        }
    }
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| KinkError::Io(format!("{}: {e}", path.display())))?;
    load_csv_reader(file, schema)
}

/// Parses a CSV with a header row. Row numbers in errors count data rows
/// from 1.
pub fn load_csv_reader<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| KinkError::Io(format!("reading header: {e}")))?
        .clone();
    let index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| KinkError::MissingColumn(name.to_string()))
    };

    let mut wanted: Vec<&str> = vec![&schema.outcome, &schema.running, &schema.shifter];
    wanted.extend(schema.covariates.iter().map(String::as_str));
    wanted.extend(schema.instruments.iter().map(String::as_str));
    wanted.extend(schema.export_flag.as_deref());
    wanted.extend(schema.extras.iter().map(String::as_str));
    let idx: Vec<usize> = wanted.iter().map(|w| index(w)).collect::<Result<_>>()?;

    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); wanted.len()];
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| KinkError::Load {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        for ((name, &j), col) in wanted.iter().zip(&idx).zip(cols.iter_mut()) {
            let raw = rec.get(j).unwrap_or("");
            let v: f64 = raw.parse().map_err(|_| KinkError::Load {
                row,
                column: name.to_string(),
                message: format!("cannot parse {raw:?} as a number"),
            })?;
            if !v.is_finite() {
                return Err(KinkError::Load {
                    row,
                    column: name.to_string(),
                    message: format!("non-finite value {raw:?}"),
                });
            }
            col.push(v);
        }
    }

    let mut it = cols.into_iter();
    let mut next = || it.next().unwrap_or_default();
    let (y, g, m) = (next(), next(), next());
    let mut data = Dataset::new(y, g, m).with_names(&schema.outcome, &schema.running, &schema.shifter);
    for name in &schema.covariates {
        data = data.with_covariate(name.clone(), next());
    }
    for name in &schema.instruments {
        data = data.with_instrument(name.clone(), next());
    }
    if let Some(name) = &schema.export_flag {
        let vals = next();
        let mut flags = Vec::with_capacity(vals.len());
        for (i, v) in vals.into_iter().enumerate() {
            if v != 0.0 && v != 1.0 {
                return Err(KinkError::Load {
                    row: i + 1,
                    column: name.clone(),
                    message: format!("export flag must be 0 or 1 (got {v})"),
                });
            }
            flags.push(v as u8);
        }
        data = data.with_export_flag(flags);
    }
    for name in &schema.extras {
        data = data.with_extra(name.clone(), next());
    }
    Ok(data)
}

/// Sample restrictions and transformations, applied in the order of the
/// fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningSpec {
    /// Rows with a value `<= 0` in any of these columns are dropped.
    #[serde(default)]
    pub require_positive: Vec<String>,
    /// Rows with a value `< 0` are dropped; zeros are kept.
    #[serde(default)]
    pub require_nonnegative: Vec<String>,
    /// Upper tail of the outcome dropped as a share of the rows that survive
    /// the sign restrictions.
    #[serde(default)]
    pub trim_upper_fraction: f64,
    #[serde(default)]
    pub standardize: Vec<String>,
    /// Replaced by average rank divided by the row count.
    #[serde(default)]
    pub quantile_transform: Vec<String>,
}

impl Default for CleaningSpec {
    fn default() -> Self {
        CleaningSpec {
            require_positive: Vec::new(),
            require_nonnegative: Vec::new(),
            trim_upper_fraction: 0.15,
            standardize: Vec::new(),
            quantile_transform: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub n_input: usize,
    /// Rows removed by each sign restriction, in application order.
    pub dropped_sign: Vec<(String, usize)>,
    pub dropped_trim: usize,
    /// Outcome value at and above which rows were trimmed.
    pub trim_cutoff: Option<f64>,
    pub n_output: usize,
    /// Mean and standard deviation used for each standardized column.
    pub standardized: Vec<(String, f64, f64)>,
}

fn column_or_missing<'a>(data: &'a Dataset, name: &str) -> Result<&'a [f64]> {
    data.column(name)
        .ok_or_else(|| KinkError::MissingColumn(name.to_string()))
}

pub fn clean(dataset: &Dataset, spec: &CleaningSpec) -> Result<(Dataset, CleaningReport)> {
    if !(0.0..1.0).contains(&spec.trim_upper_fraction) {
        return Err(KinkError::validation(format!(
            "trim fraction must lie in [0, 1) (got {})",
            spec.trim_upper_fraction
        )));
    }
    let n_input = dataset.n();
    let mut data = dataset.clone();
    let mut dropped_sign = Vec::new();

    let rules = spec
        .require_positive
        .iter()
        .map(|c| (c, true))
        .chain(spec.require_nonnegative.iter().map(|c| (c, false)));
    for (name, strict) in rules {
        let keep: Vec<bool> = column_or_missing(&data, name)?
            .iter()
            .map(|&v| if strict { v > 0.0 } else { v >= 0.0 })
            .collect();
        let dropped = keep.iter().filter(|k| !**k).count();
        data = data.select_rows(&keep);
        dropped_sign.push((name.clone(), dropped));
    }

    let mut dropped_trim = 0;
    let mut trim_cutoff = None;
    let k = (spec.trim_upper_fraction * data.n() as f64 + 1e-9).floor() as usize;
    if k > 0 {
        let sorted = stats::sorted(&data.outcome);
        let cutoff = sorted[sorted.len() - k];
        let keep: Vec<bool> = data.outcome.iter().map(|&v| v < cutoff).collect();
        dropped_trim = keep.iter().filter(|k| !**k).count();
        data = data.select_rows(&keep);
        trim_cutoff = Some(cutoff);
    }

    if data.n() == 0 {
        return Err(KinkError::EmptyDataset(format!(
            "no rows left after cleaning {n_input} input rows"
        )));
    }

    let mut standardized = Vec::new();
    for name in &spec.standardize {
        let v = column_or_missing(&data, name)?;
        let (mu, sd) = (stats::mean(v), stats::std_dev(v));
        if !(sd > 0.0) {
            return Err(KinkError::validation(format!(
                "cannot standardize constant column {name}"
            )));
        }
        for x in data.column_mut(name).expect("column checked above") {
            *x = (*x - mu) / sd;
        }
        standardized.push((name.clone(), mu, sd));
    }
    for name in &spec.quantile_transform {
        let v = column_or_missing(&data, name)?;
        let n = v.len() as f64;
        let ranks = stats::average_ranks(v);
        for (x, r) in data
            .column_mut(name)
            .expect("column checked above")
            .iter_mut()
            .zip(ranks)
        {
            *x = r / n;
        }
    }

    let report = CleaningReport {
        n_input,
        dropped_sign,
        dropped_trim,
        trim_cutoff,
        n_output: data.n(),
        standardized,
    };
    Ok((data, report))
}

/// Share of exporters by running-variable decile (columns) and shifter
/// decile (rows), with the fitted contour in percentile coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapGrid {
    /// `fractions[m_cell][g_cell]`; `None` for empty cells.
    pub fractions: Vec<Vec<Option<f64>>>,
    pub counts: Vec<Vec<usize>>,
    pub g_edges: Vec<f64>,
    pub m_edges: Vec<f64>,
    /// `(m percentile, gamma percentile)` pairs of the overlaid contour.
    pub overlay: Vec<(f64, f64)>,
}

/// Decile edges: the 10%, ..., 90% type-7 quantiles.
pub fn decile_edges(values: &[f64]) -> Vec<f64> {
    let sorted = stats::sorted(values);
    (1..10)
        .map(|k| stats::quantile_sorted(&sorted, k as f64 / 10.0))
        .collect()
}

/// Cell of `v` given interior edges; a value on an edge goes to the lower
/// cell.
fn cell_of(edges: &[f64], v: f64) -> usize {
    edges.iter().filter(|&&e| e < v).count()
}

pub fn heatmap(dataset: &Dataset, contour: &[(f64, f64)]) -> Result<HeatmapGrid> {
    let g_edges = decile_edges(&dataset.running);
    let m_edges = decile_edges(&dataset.shifter);
    heatmap_with_edges(dataset, g_edges, m_edges, contour)
}

/// Heatmap over caller-supplied interior edges. `contour` holds `(m, gamma)`
/// pairs in raw units.
pub fn heatmap_with_edges(
    dataset: &Dataset,
    g_edges: Vec<f64>,
    m_edges: Vec<f64>,
    contour: &[(f64, f64)],
) -> Result<HeatmapGrid> {
    let flags = dataset
        .export_flag
        .as_ref()
        .ok_or_else(|| KinkError::MissingColumn("export flag".into()))?;
    if dataset.n() == 0 {
        return Err(KinkError::EmptyDataset("heatmap of an empty dataset".into()));
    }
    let (gc, mc) = (g_edges.len() + 1, m_edges.len() + 1);
    let mut counts = vec![vec![0usize; gc]; mc];
    let mut exporters = vec![vec![0usize; gc]; mc];
    for i in 0..dataset.n() {
        let a = cell_of(&m_edges, dataset.shifter[i]);
        let b = cell_of(&g_edges, dataset.running[i]);
        counts[a][b] += 1;
        exporters[a][b] += flags[i] as usize;
    }
    let fractions = counts
        .iter()
        .zip(&exporters)
        .map(|(c, e)| {
            c.iter()
                .zip(e)
                .map(|(&c, &e)| (c > 0).then(|| e as f64 / c as f64))
                .collect()
        })
        .collect();

    let sg = stats::sorted(&dataset.running);
    let sm = stats::sorted(&dataset.shifter);
    let overlay = contour
        .iter()
        .map(|&(m, g)| {
            (
                100.0 * stats::ecdf_sorted(&sm, m),
                100.0 * stats::ecdf_sorted(&sg, g),
            )
        })
        .collect();
    Ok(HeatmapGrid {
        fractions,
        counts,
        g_edges,
        m_edges,
        overlay,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "profit,tfp,distance,labor,flag\n\
                       1.5,0.2,3,10,1\n\
                       2.5,-0.1,4,12,0\n\
                       0.5,0.4,5,7,1\n";

    fn schema() -> CsvSchema {
        CsvSchema {
            covariates: vec!["labor".into()],
            export_flag: Some("flag".into()),
            ..CsvSchema::new("profit", "tfp", "distance")
        }
    }

    #[test]
    fn loads_named_columns() {
        let d = load_csv_reader(CSV.as_bytes(), &schema()).unwrap();
        assert_eq!(d.n(), 3);
        assert_eq!(d.outcome, vec![1.5, 2.5, 0.5]);
        assert_eq!(d.column("labor").unwrap(), &[10.0, 12.0, 7.0]);
        assert_eq!(d.export_flag, Some(vec![1, 0, 1]));
        assert_eq!(d.p(), 2);
    }

    #[test]
    fn missing_column_is_named() {
        let mut s = schema();
        s.covariates.push("capital".into());
        match load_csv_reader(CSV.as_bytes(), &s) {
            Err(KinkError::MissingColumn(c)) => assert_eq!(c, "capital"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_cell_reports_row_and_column() {
        let csv = "profit,tfp,distance\n1,2,3\nNaN,2,3\n";
        match load_csv_reader(csv.as_bytes(), &CsvSchema::new("profit", "tfp", "distance")) {
            Err(KinkError::Load { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "profit");
            }
            other => panic!("{other:?}"),
        }
        let csv = "profit,tfp,distance\n1,x,3\n";
        assert!(matches!(
            load_csv_reader(csv.as_bytes(), &CsvSchema::new("profit", "tfp", "distance")),
            Err(KinkError::Load { row: 1, .. })
        ));
    }

    #[test]
    fn trims_upper_tail() {
        let y: Vec<f64> = (1..=20).map(f64::from).collect();
        let d = Dataset::new(y.clone(), y.clone(), y);
        let (c, rep) = clean(&d, &CleaningSpec::default()).unwrap();
        assert_eq!(rep.dropped_trim, 3);
        assert_eq!(c.n(), 17);
        assert_eq!(rep.trim_cutoff, Some(18.0));
        assert!(c.outcome.iter().all(|v| *v < 18.0));
    }

    #[test]
    fn sign_rules_and_zeros() {
        let d = Dataset::new(vec![1.0, -1.0, 0.0, 2.0], vec![0.0, 1.0, 2.0, 3.0], vec![0.0; 4]);
        let spec = CleaningSpec {
            require_nonnegative: vec!["outcome".into()],
            trim_upper_fraction: 0.0,
            ..CleaningSpec::default()
        };
        let (c, rep) = clean(&d, &spec).unwrap();
        assert_eq!(c.outcome, vec![1.0, 0.0, 2.0]);
        assert_eq!(rep.dropped_sign, vec![("outcome".to_string(), 1)]);
        let spec = CleaningSpec {
            require_positive: vec!["outcome".into()],
            trim_upper_fraction: 0.0,
            ..CleaningSpec::default()
        };
        let (c, _) = clean(&d, &spec).unwrap();
        assert_eq!(c.outcome, vec![1.0, 2.0]);
    }

    #[test]
    fn cleaning_everything_is_an_error() {
        let d = Dataset::new(vec![-1.0, -2.0], vec![0.0, 1.0], vec![0.0, 1.0]);
        let spec = CleaningSpec {
            require_positive: vec!["outcome".into()],
            ..CleaningSpec::default()
        };
        assert!(matches!(clean(&d, &spec), Err(KinkError::EmptyDataset(_))));
    }

    #[test]
    fn standardize_and_rank() {
        let d = Dataset::new(vec![1.0, 2.0, 3.0, 4.0], vec![10.0, 20.0, 20.0, 40.0], vec![0.0; 4]);
        let spec = CleaningSpec {
            trim_upper_fraction: 0.0,
            standardize: vec!["outcome".into()],
            quantile_transform: vec!["running".into()],
            ..CleaningSpec::default()
        };
        let (c, _) = clean(&d, &spec).unwrap();
        assert!(stats::mean(&c.outcome).abs() < 1e-15);
        assert!((stats::std_dev(&c.outcome) - 1.0).abs() < 1e-14);
        assert_eq!(c.running, vec![0.25, 0.625, 0.625, 1.0]);
    }

    #[test]
    fn four_corner_heatmap() {
        let d = Dataset::new(vec![0.0; 4], vec![-1.0, 1.0, -1.0, 1.0], vec![-1.0, -1.0, 1.0, 1.0])
            .with_export_flag(vec![0, 1, 0, 1]);
        let h = heatmap_with_edges(&d, vec![0.0], vec![0.0], &[]).unwrap();
        assert_eq!(h.fractions, vec![vec![Some(0.0), Some(1.0)], vec![Some(0.0), Some(1.0)]]);
        let h = heatmap(&d, &[(0.0, 0.0)]).unwrap();
        assert_eq!(h.fractions.len(), 10);
        assert_eq!(h.counts.iter().flatten().sum::<usize>(), 4);
        assert_eq!(h.overlay, vec![(50.0, 50.0)]);
    }

    #[test]
    fn edge_values_go_to_lower_cell() {
        assert_eq!(cell_of(&[0.0, 1.0], 0.0), 0);
        assert_eq!(cell_of(&[0.0, 1.0], 0.5), 1);
        assert_eq!(cell_of(&[0.0, 1.0], 1.0), 1);
        assert_eq!(cell_of(&[0.0, 1.0], 1.5), 2);
    }
}
