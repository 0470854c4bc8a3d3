//! Pointwise profile least squares over a grid of candidate kink locations,
//! the threshold-contour sweep, leave-one-out thresholds and the second-step
//! coefficient regression.
//!
//! The grid search works on weighted sufficient statistics. Observations are
//! binned once by where their running variable falls in the grid; for a query
//! point the kernel-weighted per-bin sums are accumulated, and moving the kink
//! past a grid point transfers whole bins from the right-hand to the left-hand
//! side of the basis. Each candidate then costs one small `(p + 2)`-dimensional
//! factorization instead of a pass over the data.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KinkError, Result};
use crate::kernel::{self, truncated_kernel, WeightVector, TRUNCATION};
use crate::linalg::{self, NormalSolver, PivotedQr};
use crate::model::{ColumnRole, Dataset, LocalFit, ModelSpec};
use crate::stats;

/// `S_n(gamma)` over the candidate grid. Singular candidates carry `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileCurve {
    pub grid: Vec<f64>,
    pub ssr: Vec<Option<f64>>,
    pub argmin_index: usize,
}

impl ProfileCurve {
    pub fn gamma_hat(&self) -> f64 {
        self.grid[self.argmin_index]
    }
}

/// Weighted least-squares fit at one fixed kink location.
#[derive(Debug, Clone, PartialEq)]
pub struct WlsFit {
    /// `(beta_g, beta_x, covariates...)`
    pub coefficients: Vec<f64>,
    pub ssr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdContour {
    pub query_points: Vec<f64>,
    /// Empirical CDF level of each query point within the shifter sample.
    pub query_levels: Vec<f64>,
    pub gamma_hat: Vec<Option<f64>>,
    pub effective_mass: Vec<f64>,
    pub fits: Vec<Option<LocalFit>>,
    pub loo_gamma: Option<Vec<Option<f64>>>,
    pub bandwidth: f64,
    pub gamma_grid: Vec<f64>,
    pub interior_mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientEstimate {
    pub beta_g: f64,
    pub beta_x: f64,
    pub beta_c: Vec<f64>,
    pub beta_c_names: Vec<String>,
    pub beta_v: Option<Vec<f64>>,
    pub beta_v_names: Vec<String>,
    /// In [`coefficients`](Self::coefficients) order, filled by the bootstrap.
    pub standard_errors: Option<Vec<f64>>,
    pub n_used: usize,
    /// Used observations whose leave-one-out threshold sits on a grid end point.
    pub n_boundary: usize,
}

impl CoefficientEstimate {
    /// Coefficients in design order: slopes, then covariates in dataset order.
    pub fn coefficients(&self) -> Vec<f64> {
        let mut v = vec![self.beta_g, self.beta_x];
        v.extend_from_slice(&self.beta_c);
        if let Some(bv) = &self.beta_v {
            v.extend_from_slice(bv);
        }
        v
    }

    pub fn names(&self) -> Vec<String> {
        let mut v = vec!["beta_g".to_string(), "beta_x".to_string()];
        v.extend(self.beta_c_names.iter().cloned());
        v.extend(self.beta_v_names.iter().cloned());
        v
    }

    fn from_design(dataset: &Dataset, coef: &[f64], n_used: usize) -> Self {
        let mut beta_c = Vec::new();
        let mut beta_c_names = Vec::new();
        let mut beta_v = Vec::new();
        let mut beta_v_names = Vec::new();
        for (col, &b) in dataset.covariates.iter().zip(&coef[2..]) {
            if col.role == ColumnRole::Control {
                beta_v.push(b);
                beta_v_names.push(col.name.clone());
            } else {
                beta_c.push(b);
                beta_c_names.push(col.name.clone());
            }
        }
        CoefficientEstimate {
            beta_g: coef[0],
            beta_x: coef[1],
            beta_c,
            beta_c_names,
            beta_v: (!beta_v.is_empty()).then_some(beta_v),
            beta_v_names,
            standard_errors: None,
            n_used,
            n_boundary: 0,
        }
    }
}

/// Minimum unnormalized kernel mass for a local fit: regressors plus one.
pub fn min_mass(dataset: &Dataset) -> f64 {
    (dataset.p() + 3) as f64
}

/// Weighted least squares of the outcome on `z_i(gamma)` with the given weights.
pub fn profile_ssr(dataset: &Dataset, weights: &WeightVector, gamma: f64) -> Result<WlsFit> {
    if weights.weights.len() != dataset.n() {
        return Err(KinkError::validation("weight vector length differs from dataset"));
    }
    let support: Vec<usize> = weights.support().collect();
    let k = dataset.design_width();
    let mut cols = vec![Vec::with_capacity(support.len()); k];
    let mut y = Vec::with_capacity(support.len());
    for &i in &support {
        let s = weights.weights[i].sqrt();
        let d = dataset.running[i] - gamma;
        cols[0].push(s * d.min(0.0));
        cols[1].push(s * d.max(0.0));
        for (c, cov) in cols[2..].iter_mut().zip(&dataset.covariates) {
            c.push(s * cov.values[i]);
        }
        y.push(s * dataset.outcome[i]);
    }
    let qr = PivotedQr::new(&cols).ok_or_else(|| {
        KinkError::singular(
            Some(gamma),
            format!("weighted kink design at m = {}", weights.query_point),
        )
    })?;
    let coefficients = qr.solve(&y);
    let ssr = linalg::residuals(&cols, &y, &coefficients)
        .iter()
        .map(|r| r * r)
        .sum();
    Ok(WlsFit { coefficients, ssr })
}

/// Reference grid search that refits every candidate from scratch.
pub fn grid_search_naive(
    dataset: &Dataset,
    weights: &WeightVector,
    grid: &[f64],
) -> Result<ProfileCurve> {
    check_grid(grid)?;
    let ssr: Vec<Option<f64>> = grid
        .iter()
        .map(|&g| profile_ssr(dataset, weights, g).ok().map(|f| f.ssr))
        .collect();
    let argmin_index = argmin(&ssr).ok_or_else(|| KinkError::DegenerateWindow {
        query: weights.query_point,
        reason: "every grid point gives a singular design".into(),
    })?;
    Ok(ProfileCurve {
        grid: grid.to_vec(),
        ssr,
        argmin_index,
    })
}

/// Profile SSR over `grid` and the local fit at its minimizer.
pub fn grid_search(
    dataset: &Dataset,
    weights: &WeightVector,
    grid: &[f64],
) -> Result<(ProfileCurve, LocalFit)> {
    GridSearcher::new(dataset, grid)?.search(weights)
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(KinkError::validation("gamma grid is empty"));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) || grid.iter().any(|g| !g.is_finite()) {
        return Err(KinkError::validation("gamma grid must be finite and strictly increasing"));
    }
    Ok(())
}

/// First index of the smallest value; ties resolve to the smallest gamma.
fn argmin(ssr: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, s) in ssr.iter().enumerate() {
        if let Some(s) = *s {
            if best.map_or(true, |(_, b)| s < b) {
                best = Some((j, s));
            }
        }
    }
    best.map(|(j, _)| j)
}

/// Precomputed per-observation sufficient statistics for one dataset and
/// candidate grid.
pub struct GridSearcher<'a> {
    dataset: &'a Dataset,
    grid: Vec<f64>,
    center: f64,
    centered_grid: Vec<f64>,
    p: usize,
    side_width: usize,
    global_width: usize,
    /// Observation indices sorted by shifter value.
    order: Vec<usize>,
    sorted_shifter: Vec<f64>,
    /// Position of each observation in `order`.
    rank: Vec<usize>,
    /// Bin of each observation (sorted order): first grid index with `gamma >= g`.
    bin: Vec<usize>,
    side: Vec<f64>,
    global: Vec<f64>,
}

/// Reusable buffers for one worker.
struct Scratch {
    bins: Vec<f64>,
    suffix: Vec<f64>,
    left: Vec<f64>,
    global: Vec<f64>,
    solver: NormalSolver,
}

/// Outcome of one sweep.
struct Sweep {
    argmin: Option<usize>,
}

impl<'a> GridSearcher<'a> {
    pub fn new(dataset: &'a Dataset, grid: &[f64]) -> Result<Self> {
        check_grid(grid)?;
        let n = dataset.n();
        let p = dataset.p();
        let side_width = 5 + 2 * p;
        let global_width = p * (p + 1) / 2 + p + 1;
        let center = if n > 0 { stats::mean(&dataset.running) } else { 0.0 };

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| dataset.shifter[a].total_cmp(&dataset.shifter[b]).then(a.cmp(&b)));
        let mut rank = vec![0; n];
        for (pos, &i) in order.iter().enumerate() {
            rank[i] = pos;
        }
        let sorted_shifter = order.iter().map(|&i| dataset.shifter[i]).collect();

        let mut bin = Vec::with_capacity(n);
        let mut side = Vec::with_capacity(n * side_width);
        let mut global = Vec::with_capacity(n * global_width);
        let mut x = vec![0.0; p];
        for &i in &order {
            let g_raw = dataset.running[i];
            bin.push(grid.partition_point(|&gam| gam < g_raw));
            let g = g_raw - center;
            let y = dataset.outcome[i];
            for (xk, col) in x.iter_mut().zip(&dataset.covariates) {
                *xk = col.values[i];
            }
            side.extend_from_slice(&[1.0, g, g * g]);
            side.extend(x.iter().copied());
            side.extend(x.iter().map(|v| g * v));
            side.extend_from_slice(&[y, g * y]);
            for k in 0..p {
                for l in 0..=k {
                    global.push(x[k] * x[l]);
                }
            }
            global.extend(x.iter().map(|v| v * y));
            global.push(y * y);
        }

        Ok(GridSearcher {
            dataset,
            grid: grid.to_vec(),
            center,
            centered_grid: grid.iter().map(|g| g - center).collect(),
            p,
            side_width,
            global_width,
            order,
            sorted_shifter,
            rank,
            bin,
            side,
            global,
        })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    fn scratch(&self) -> Scratch {
        let g = self.grid.len();
        Scratch {
            bins: vec![0.0; (g + 1) * self.side_width],
            suffix: vec![0.0; g * self.side_width],
            left: vec![0.0; self.side_width],
            global: vec![0.0; self.global_width],
            solver: NormalSolver::new(self.p + 2),
        }
    }

    fn reset(&self, s: &mut Scratch) {
        s.bins.iter_mut().for_each(|v| *v = 0.0);
        s.global.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Adds `w` times the statistics of the observation at sorted position `pos`.
    #[inline]
    fn accumulate(&self, s: &mut Scratch, pos: usize, w: f64) {
        let fs = self.side_width;
        let b = self.bin[pos];
        let src = &self.side[pos * fs..(pos + 1) * fs];
        for (dst, v) in s.bins[b * fs..(b + 1) * fs].iter_mut().zip(src) {
            *dst += w * v;
        }
        let fg = self.global_width;
        let src = &self.global[pos * fg..(pos + 1) * fg];
        for (dst, v) in s.global.iter_mut().zip(src) {
            *dst += w * v;
        }
    }

    /// Sweeps the grid over the accumulated statistics. SSR values are
    /// normalized by `mass` and written to `out` when given.
    fn sweep(&self, s: &mut Scratch, mass: f64, mut out: Option<&mut Vec<Option<f64>>>) -> Sweep {
        let fs = self.side_width;
        let p = self.p;
        let d = p + 2;
        let ng = self.grid.len();
        // suffix[j] = sum of bins j+1..=ng
        for j in (0..ng).rev() {
            let (head, tail) = s.suffix.split_at_mut((j + 1) * fs);
            let dst = &mut head[j * fs..];
            let next_bin = &s.bins[(j + 1) * fs..(j + 2) * fs];
            if j + 1 < ng {
                for ((o, a), b) in dst.iter_mut().zip(&tail[..fs]).zip(next_bin) {
                    *o = a + b;
                }
            } else {
                dst.copy_from_slice(next_bin);
            }
        }
        s.left.iter_mut().for_each(|v| *v = 0.0);

        let xx = |k: usize, l: usize| k * (k + 1) / 2 + l;
        let xy0 = p * (p + 1) / 2;
        let yy = s.global[self.global_width - 1];
        let mut best: Option<(usize, f64)> = None;
        if let Some(o) = out.as_deref_mut() {
            o.clear();
        }

        for j in 0..ng {
            for (l, b) in s.left.iter_mut().zip(&s.bins[j * fs..(j + 1) * fs]) {
                *l += b;
            }
            let gam = self.centered_grid[j];
            let right = &s.suffix[j * fs..(j + 1) * fs];
            let left = &s.left;
            let (a, c) = s.solver.buffers();
            a.iter_mut().for_each(|v| *v = 0.0);
            for (side_idx, st) in [left.as_slice(), right].into_iter().enumerate() {
                let (s1, sg, sgg) = (st[0], st[1], st[2]);
                a[side_idx * d + side_idx] = sgg - 2.0 * gam * sg + gam * gam * s1;
                for k in 0..p {
                    a[(2 + k) * d + side_idx] = st[3 + p + k] - gam * st[3 + k];
                }
                c[side_idx] = st[4 + 2 * p] - gam * st[3 + 2 * p];
            }
            for k in 0..p {
                for l in 0..=k {
                    a[(2 + k) * d + 2 + l] = s.global[xx(k, l)];
                }
                c[2 + k] = s.global[xy0 + k];
            }
            let ssr = s
                .solver
                .explained()
                .map(|e| ((yy - e) / mass).max(0.0));
            if let Some(v) = ssr {
                if best.map_or(true, |(_, b)| v < b) {
                    best = Some((j, v));
                }
            }
            if let Some(o) = out.as_deref_mut() {
                o.push(ssr);
            }
        }
        Sweep {
            argmin: best.map(|(j, _)| j),
        }
    }

    /// Grid search under arbitrary weights (dense vector aligned with the dataset).
    pub fn search(&self, weights: &WeightVector) -> Result<(ProfileCurve, LocalFit)> {
        if weights.weights.len() != self.dataset.n() {
            return Err(KinkError::validation("weight vector length differs from dataset"));
        }
        let mut s = self.scratch();
        self.reset(&mut s);
        let mut mass = 0.0;
        for i in weights.support() {
            let w = weights.weights[i];
            self.accumulate(&mut s, self.rank[i], w);
            mass += w;
        }
        let mut ssr = Vec::with_capacity(self.grid.len());
        let sweep = self.sweep(&mut s, mass, Some(&mut ssr));
        let argmin_index = sweep.argmin.ok_or_else(|| KinkError::DegenerateWindow {
            query: weights.query_point,
            reason: "every grid point gives a singular design".into(),
        })?;
        let gamma = self.grid[argmin_index];
        let fit = profile_ssr(self.dataset, weights, gamma)?;
        let local = LocalFit {
            query_point: weights.query_point,
            gamma,
            beta_g: fit.coefficients[0],
            beta_x: fit.coefficients[1],
            beta_c: fit.coefficients[2..].to_vec(),
            ssr: fit.ssr,
            effective_mass: weights.total_mass,
        };
        Ok((
            ProfileCurve {
                grid: self.grid.clone(),
                ssr,
                argmin_index,
            },
            local,
        ))
    }

    /// Accumulates the kernel-weighted statistics around `m` from the sorted
    /// window of the shifter. Returns the unnormalized mass.
    fn accumulate_window(&self, s: &mut Scratch, m: f64, b: f64) -> f64 {
        self.reset(s);
        let reach = TRUNCATION * b * (1.0 + 1e-12);
        let lo = self.sorted_shifter.partition_point(|&v| v < m - reach);
        let hi = self.sorted_shifter.partition_point(|&v| v <= m + reach);
        let mut mass = 0.0;
        for pos in lo..hi {
            let w = truncated_kernel((self.sorted_shifter[pos] - m) / b);
            if w > 0.0 {
                self.accumulate(s, pos, w);
                mass += w;
            }
        }
        mass
    }

    /// Full-sample and leave-one-out thresholds at each observation's own
    /// shifter value. `None` marks an inadequate window or all-singular grid.
    pub fn leave_one_out(&self, b: f64) -> Vec<(Option<f64>, Option<f64>)> {
        let need = min_mass(self.dataset);
        let own = kernel::kernel_eval(0.0);
        (0..self.dataset.n())
            .into_par_iter()
            .map_init(
                || self.scratch(),
                |s, i| {
                    let m = self.dataset.shifter[i];
                    let mass = self.accumulate_window(s, m, b);
                    let full = if mass >= need {
                        self.sweep(s, mass, None).argmin.map(|j| self.grid[j])
                    } else {
                        None
                    };
                    self.accumulate(s, self.rank[i], -own);
                    let loo_mass = mass - own;
                    let loo = if loo_mass >= need {
                        self.sweep(s, loo_mass, None).argmin.map(|j| self.grid[j])
                    } else {
                        None
                    };
                    (full, loo)
                },
            )
            .collect()
    }

    /// Shifter-sorted order used internally (exposed for diagnostics).
    pub fn shifter_order(&self) -> &[usize] {
        &self.order
    }

    /// Centering constant subtracted from the running variable internally.
    pub fn center(&self) -> f64 {
        self.center
    }
}

/// `1[m_i in int(M)]` from the empirical quantiles of the shifter.
pub fn interior_mask(shifter: &[f64], bounds: (f64, f64)) -> Vec<bool> {
    if shifter.is_empty() {
        return Vec::new();
    }
    let sorted = stats::sorted(shifter);
    let lo = stats::quantile_sorted(&sorted, bounds.0);
    let hi = stats::quantile_sorted(&sorted, bounds.1);
    shifter.iter().map(|&m| m >= lo && m <= hi).collect()
}

/// Estimates `gamma(m)` over the query grid of `spec`.
pub fn estimate_contour(dataset: &Dataset, spec: &ModelSpec) -> Result<ThresholdContour> {
    spec.check()?;
    let n = dataset.n();
    let b = kernel::bandwidth(n, spec.bandwidth)?;
    let grid = spec.gamma_grid.resolve(&dataset.running);
    let queries = if n == 0 {
        Vec::new()
    } else {
        spec.query_grid.resolve(&dataset.shifter)
    };
    let searcher = GridSearcher::new(dataset, &grid)?;
    let need = min_mass(dataset);

    let fits: Vec<(f64, Option<LocalFit>)> = queries
        .par_iter()
        .map(|&m| match kernel::local_weights(&dataset.shifter, m, b) {
            Ok(w) if w.total_mass >= need => {
                let mass = w.total_mass;
                (mass, searcher.search(&w).ok().map(|(_, fit)| fit))
            }
            Ok(w) => (w.total_mass, None),
            Err(_) => (0.0, None),
        })
        .collect();

    let sorted_m = stats::sorted(&dataset.shifter);
    Ok(ThresholdContour {
        query_levels: queries
            .iter()
            .map(|&m| stats::ecdf_sorted(&sorted_m, m))
            .collect(),
        gamma_hat: fits.iter().map(|(_, f)| f.as_ref().map(|f| f.gamma)).collect(),
        effective_mass: fits.iter().map(|(m, _)| *m).collect(),
        fits: fits.into_iter().map(|(_, f)| f).collect(),
        query_points: queries,
        loo_gamma: None,
        bandwidth: b,
        gamma_grid: grid,
        interior_mask: interior_mask(&dataset.shifter, spec.interior),
    })
}

/// Full-sample and leave-one-out thresholds at every observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooThresholds {
    pub full: Vec<Option<f64>>,
    pub loo: Vec<Option<f64>>,
}

pub fn leave_one_out_both(dataset: &Dataset, spec: &ModelSpec) -> Result<LooThresholds> {
    spec.check()?;
    let b = kernel::bandwidth(dataset.n(), spec.bandwidth)?;
    let grid = spec.gamma_grid.resolve(&dataset.running);
    let searcher = GridSearcher::new(dataset, &grid)?;
    let (full, loo) = searcher.leave_one_out(b).into_iter().unzip();
    Ok(LooThresholds { full, loo })
}

/// `gamma_{-i}(m_i)` for every observation.
pub fn leave_one_out_thresholds(dataset: &Dataset, spec: &ModelSpec) -> Result<Vec<Option<f64>>> {
    Ok(leave_one_out_both(dataset, spec)?.loo)
}

/// OLS of the outcome on `z_i(gamma_{-i}(m_i))` over interior observations
/// with a usable leave-one-out threshold.
pub fn second_step_beta(
    dataset: &Dataset,
    loo_gamma: &[Option<f64>],
    interior_mask: &[bool],
) -> Result<CoefficientEstimate> {
    let n = dataset.n();
    if loo_gamma.len() != n || interior_mask.len() != n {
        return Err(KinkError::validation(
            "leave-one-out thresholds and interior mask must have one entry per observation",
        ));
    }
    let design = SecondStepDesign::new(dataset, loo_gamma, interior_mask);
    let k = dataset.design_width();
    if design.rows.len() < k {
        return Err(KinkError::singular(
            None,
            format!(
                "second step has {} usable observations for {k} coefficients",
                design.rows.len()
            ),
        ));
    }
    let (coef, _) = linalg::ols(&design.columns, &design.y)
        .ok_or_else(|| KinkError::singular(None, "second-step design is rank deficient"))?;
    Ok(CoefficientEstimate::from_design(dataset, &coef, design.rows.len()))
}

/// The fixed second-step regression design `z_i(gamma_{-i}(m_i))`.
#[derive(Debug, Clone)]
pub struct SecondStepDesign {
    /// Dataset rows entering the regression.
    pub rows: Vec<usize>,
    pub columns: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl SecondStepDesign {
    pub fn new(dataset: &Dataset, loo_gamma: &[Option<f64>], interior_mask: &[bool]) -> Self {
        let rows: Vec<usize> = (0..dataset.n())
            .filter(|&i| interior_mask[i] && loo_gamma[i].is_some())
            .collect();
        let k = dataset.design_width();
        let mut columns = vec![Vec::with_capacity(rows.len()); k];
        for &i in &rows {
            let z = dataset.design_row(i, loo_gamma[i].unwrap_or_default());
            for (c, v) in columns.iter_mut().zip(z) {
                c.push(v);
            }
        }
        let y = rows.iter().map(|&i| dataset.outcome[i]).collect();
        SecondStepDesign { rows, columns, y }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kink_data(n: usize, gamma: f64, bg: f64, bx: f64, noise: f64, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let m: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = g
            .iter()
            .map(|&gi| {
                bg * (gi - gamma).min(0.0) + bx * (gi - gamma).max(0.0)
                    + noise * rng.gen_range(-1.0..1.0)
            })
            .collect();
        Dataset::new(y, g, m)
    }

    fn uniform(n: usize) -> WeightVector {
        WeightVector {
            weights: vec![1.0 / n as f64; n],
            total_mass: n as f64,
            query_point: 0.0,
        }
    }

    /// Dense normal-equations weighted LS oracle.
    fn wls_oracle(d: &Dataset, w: &[f64], gamma: f64) -> (Vec<f64>, f64) {
        let k = d.design_width();
        let mut a = vec![vec![0.0; k + 1]; k];
        for i in 0..d.n() {
            let z = d.design_row(i, gamma);
            for r in 0..k {
                for c in 0..k {
                    a[r][c] += w[i] * z[r] * z[c];
                }
                a[r][k] += w[i] * z[r] * d.outcome[i];
            }
        }
        for i in 0..k {
            let piv = (i..k).max_by(|&x, &y| a[x][i].abs().total_cmp(&a[y][i].abs())).unwrap();
            a.swap(i, piv);
            for r in 0..k {
                if r != i {
                    let f = a[r][i] / a[i][i];
                    for c in i..=k {
                        a[r][c] -= f * a[i][c];
                    }
                }
            }
        }
        let beta: Vec<f64> = (0..k).map(|i| a[i][k] / a[i][i]).collect();
        let ssr = (0..d.n())
            .map(|i| {
                let z = d.design_row(i, gamma);
                let r = d.outcome[i] - z.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>();
                w[i] * r * r
            })
            .sum();
        (beta, ssr)
    }

    #[test]
    fn exact_interpolation_at_true_kink() {
        let d = kink_data(60, 0.0, 1.0, 2.0, 0.0, 1);
        let fit = profile_ssr(&d, &uniform(60), 0.0).unwrap();
        assert!((fit.coefficients[0] - 1.0).abs() < 1e-12);
        assert!((fit.coefficients[1] - 2.0).abs() < 1e-12);
        assert!(fit.coefficients[2].abs() < 1e-12);
        assert!(fit.ssr < 1e-25);
        let off = profile_ssr(&d, &uniform(60), 0.5).unwrap();
        assert!(off.ssr > 1e-6);
    }

    #[test]
    fn profile_matches_normal_equation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 50;
        let d = kink_data(n, 0.2, 1.5, -0.5, 0.3, 2)
            .with_covariate("x", (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let w = WeightVector {
            weights: raw.iter().map(|v| v / total).collect(),
            total_mass: total,
            query_point: 0.0,
        };
        let fit = profile_ssr(&d, &w, 0.3).unwrap();
        let (beta, ssr) = wls_oracle(&d, &w.weights, 0.3);
        for (a, b) in fit.coefficients.iter().zip(&beta) {
            assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0), "{a} vs {b}");
        }
        assert!((fit.ssr - ssr).abs() <= 1e-8 * ssr);
    }

    #[test]
    fn singular_design_reports_gamma() {
        let d = kink_data(30, 0.0, 1.0, 1.0, 0.1, 3);
        // every observation on one side: the negative-part column vanishes
        let err = profile_ssr(&d, &uniform(30), -10.0).unwrap_err();
        assert!(matches!(err, KinkError::SingularFit { gamma: Some(g), .. } if g == -10.0));
    }

    #[test]
    fn grid_search_recovers_kink_on_grid() {
        let d = kink_data(200, 0.25, 1.0, 3.0, 0.0, 4);
        let grid: Vec<f64> = (0..=40).map(|k| -1.0 + 0.05 * k as f64).collect();
        let (curve, fit) = grid_search(&d, &uniform(200), &grid).unwrap();
        assert_eq!(fit.gamma, 0.25);
        assert_eq!(curve.gamma_hat(), 0.25);
        assert!(fit.ssr < 1e-25);
    }

    #[test]
    fn grid_search_brackets_off_grid_kink() {
        let d = kink_data(200, 0.27, 1.0, 3.0, 0.0, 5);
        let grid: Vec<f64> = (0..=40).map(|k| -1.0 + 0.05 * k as f64).collect();
        let (_, fit) = grid_search(&d, &uniform(200), &grid).unwrap();
        assert!(fit.gamma == 0.25 || fit.gamma == 0.30, "{}", fit.gamma);
    }

    #[test]
    fn sweep_agrees_with_naive_refits() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let n = 120;
            let d = kink_data(n, 0.1, 2.0, 0.5, 0.5, seed)
                .with_covariate("x", (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let w = kernel::local_weights(&d.shifter, 0.1, 0.4).unwrap();
            let grid = Grid::default_gamma().resolve(&d.running);
            let (fast, fit) = grid_search(&d, &w, &grid).unwrap();
            let slow = grid_search_naive(&d, &w, &grid).unwrap();
            assert_eq!(fast.argmin_index, slow.argmin_index);
            for (a, b) in fast.ssr.iter().zip(&slow.ssr) {
                match (a, b) {
                    (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-8 * b.abs(), "{a} {b}"),
                    (None, None) => {}
                    _ => panic!("singularity disagreement"),
                }
            }
            // plug-in consistency, bit for bit
            let again = profile_ssr(&d, &w, fit.gamma).unwrap();
            assert_eq!(again.coefficients, fit.coefficients());
            assert_eq!(again.ssr, fit.ssr);
        }
    }

    #[test]
    fn profile_is_lipschitz_between_neighbours() {
        let d = kink_data(150, -0.2, 1.0, 2.0, 0.4, 9);
        let w = uniform(150);
        let grid: Vec<f64> = (0..=80).map(|k| -1.0 + 0.025 * k as f64).collect();
        let curve = grid_search_naive(&d, &w, &grid).unwrap();
        // |dS/dgamma| <= 2 * sum_i w_i |r_i| * (|bg| + |bx|) bounded crudely by data magnitudes
        let ymax = d.outcome.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let gmax = d.running.iter().fold(0.0f64, |a, v| a.max(v.abs())) + 1.0;
        let lip = 2.0 * (ymax + 10.0 * gmax) * 10.0;
        for j in 0..grid.len() - 1 {
            let (a, b) = (curve.ssr[j].unwrap(), curve.ssr[j + 1].unwrap());
            assert!((a - b).abs() <= lip * (grid[j + 1] - grid[j]));
        }
    }

    #[test]
    fn ties_break_to_smallest_gamma() {
        assert_eq!(argmin(&[None, Some(1.0), Some(0.5), Some(0.5)]), Some(2));
        assert_eq!(argmin(&[None, None]), None);
    }

    #[test]
    fn affine_running_variable_maps_estimates() {
        let d = kink_data(300, 0.3, 1.0, 2.5, 0.3, 11);
        let w = kernel::local_weights(&d.shifter, 0.0, 0.5).unwrap();
        let grid: Vec<f64> = (0..=100).map(|k| -1.5 + 0.03 * k as f64).collect();
        let (_, a) = grid_search(&d, &w, &grid).unwrap();
        let (scale, shift) = (2.0, 1.0);
        let mut e = d.clone();
        e.running.iter_mut().for_each(|g| *g = scale * *g + shift);
        let grid2: Vec<f64> = grid.iter().map(|g| scale * g + shift).collect();
        let (_, b) = grid_search(&e, &w, &grid2).unwrap();
        assert_eq!(b.gamma, scale * a.gamma + shift);
        assert!((b.beta_g - a.beta_g / scale).abs() < 1e-10);
        assert!((b.beta_x - a.beta_x / scale).abs() < 1e-10);
    }

    #[test]
    fn constant_threshold_contour_is_exact() {
        let n = 400;
        let d = kink_data(n, 0.25, 1.0, 2.0, 0.0, 12);
        let spec = ModelSpec {
            gamma_grid: Grid::Linear {
                lo: -1.5,
                hi: 1.5,
                count: 121,
            },
            ..ModelSpec::default()
        };
        let c = estimate_contour(&d, &spec).unwrap();
        assert_eq!(c.query_points.len(), 71);
        for g in &c.gamma_hat {
            assert_eq!(*g, Some(0.25));
        }
    }

    #[test]
    fn empty_query_grid_gives_empty_contour() {
        let d = kink_data(50, 0.0, 1.0, 2.0, 0.1, 13);
        let spec = ModelSpec {
            query_grid: Grid::Points(vec![]),
            ..ModelSpec::default()
        };
        let c = estimate_contour(&d, &spec).unwrap();
        assert!(c.query_points.is_empty() && c.gamma_hat.is_empty());
        assert_eq!(c.interior_mask.len(), 50);
    }

    #[test]
    fn sparse_support_is_marked_missing() {
        let d = kink_data(40, 0.0, 1.0, 2.0, 0.1, 14);
        let spec = ModelSpec {
            query_grid: Grid::Points(vec![0.0, 50.0]),
            ..ModelSpec::default()
        };
        let c = estimate_contour(&d, &spec).unwrap();
        assert!(c.gamma_hat[0].is_some());
        assert!(c.gamma_hat[1].is_none());
        assert_eq!(c.effective_mass[1], 0.0);
    }

    #[test]
    fn loo_agrees_with_direct_reweighting() {
        let n = 150;
        let d = kink_data(n, 0.1, 1.0, 2.0, 0.3, 15);
        let spec = ModelSpec {
            bandwidth: crate::model::BandwidthRule::Fixed(0.4),
            ..ModelSpec::default()
        };
        let both = leave_one_out_both(&d, &spec).unwrap();
        let grid = spec.gamma_grid.resolve(&d.running);
        for i in (0..n).step_by(15) {
            let w = kernel::local_weights(&d.shifter, d.shifter[i], 0.4).unwrap();
            let full = grid_search_naive(&d, &w, &grid).unwrap();
            assert_eq!(both.full[i], Some(full.gamma_hat()));
            let wl = w.without(i).unwrap();
            let loo = grid_search_naive(&d, &wl, &grid).unwrap();
            assert_eq!(both.loo[i], Some(loo.gamma_hat()));
        }
    }

    #[test]
    fn loo_with_identical_rows_is_missing() {
        let d = Dataset::new(vec![1.0; 3], vec![0.5; 3], vec![0.0; 3]);
        let spec = ModelSpec::default();
        let loo = leave_one_out_thresholds(&d, &ModelSpec {
            gamma_grid: Grid::Linear { lo: -1.0, hi: 1.0, count: 5 },
            ..spec
        })
        .unwrap();
        assert_eq!(loo, vec![None, None, None]);
    }

    #[test]
    fn isolated_observation_does_not_move_others() {
        let n = 120;
        let d = kink_data(n, 0.0, 1.0, 2.0, 0.3, 16);
        let spec = ModelSpec {
            bandwidth: crate::model::BandwidthRule::Fixed(0.3),
            gamma_grid: Grid::Linear { lo: -1.5, hi: 1.5, count: 61 },
            ..ModelSpec::default()
        };
        let base = leave_one_out_thresholds(&d, &spec).unwrap();
        let far = d.clone();
        let mut far = far;
        far.outcome.push(5.0);
        far.running.push(0.3);
        far.shifter.push(100.0);
        far.covariates[0].values.push(1.0);
        let with = leave_one_out_thresholds(&far, &spec).unwrap();
        assert_eq!(&with[..n], &base[..]);
        assert_eq!(with[n], None);
    }

    #[test]
    fn second_step_recovers_truth_without_noise() {
        let n = 200;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let m: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gam: Vec<f64> = m.iter().map(|v| 0.3 * v).collect();
        let y = (0..n)
            .map(|i| {
                let dd = g[i] - gam[i];
                1.5 * dd.min(0.0) + 0.5 * dd.max(0.0) + 0.2 - 0.7 * x[i]
            })
            .collect();
        let d = Dataset::new(y, g, m).with_covariate("x", x);
        let loo: Vec<Option<f64>> = gam.into_iter().map(Some).collect();
        let est = second_step_beta(&d, &loo, &vec![true; n]).unwrap();
        assert!((est.beta_g - 1.5).abs() < 1e-12);
        assert!((est.beta_x - 0.5).abs() < 1e-12);
        assert!((est.beta_c[0] - 0.2).abs() < 1e-12);
        assert!((est.beta_c[1] + 0.7).abs() < 1e-12);
        assert_eq!(est.n_used, n);
        assert!(est.beta_v.is_none());
    }

    #[test]
    fn second_step_needs_enough_rows() {
        let d = kink_data(10, 0.0, 1.0, 2.0, 0.1, 18);
        let loo = vec![None; 10];
        assert!(second_step_beta(&d, &loo, &vec![true; 10]).is_err());
    }

    #[test]
    fn interior_mask_uses_quantiles() {
        let m: Vec<f64> = (0..=100).map(f64::from).collect();
        let mask = interior_mask(&m, (0.01, 0.99));
        assert_eq!(mask.iter().filter(|b| **b).count(), 99);
        assert!(!mask[0] && !mask[100]);
    }
}
