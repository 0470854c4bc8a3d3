//! Small dense least-squares kernels.
//!
//! Two routes are kept deliberately separate: a column-pivoted Householder QR
//! that works on the (row-weighted) design itself, and a diagonally pivoted
//! LDL' factorization of a normal-equation matrix used by the sweep over
//! candidate kink locations.

/// Relative tolerance on the smallest pivot, measured on the squared scale
/// (a QR diagonal `r` is compared as `r^2`, an LDL' pivot as-is).
pub const PIVOT_TOL: f64 = 1e-10;

/// Householder QR with column-norm pivoting of a column-major `n x k` matrix.
#[derive(Debug, Clone)]
pub struct PivotedQr {
    n: usize,
    k: usize,
    /// Householder vectors; `vs[i]` acts on rows `i..n`.
    vs: Vec<Vec<f64>>,
    vnorm2: Vec<f64>,
    /// Upper triangle of R, row-major `k x k`.
    r: Vec<f64>,
    perm: Vec<usize>,
}

impl PivotedQr {
    /// Factorizes the design given as columns. Returns `None` when the design
    /// is rank deficient under [`PIVOT_TOL`].
    pub fn new(columns: &[Vec<f64>]) -> Option<Self> {
        let k = columns.len();
        let n = columns.first().map_or(0, |c| c.len());
        if k == 0 || n < k {
            return None;
        }
        let mut a: Vec<Vec<f64>> = columns.to_vec();
        let mut perm: Vec<usize> = (0..k).collect();
        let mut vs = Vec::with_capacity(k);
        let mut vnorm2 = Vec::with_capacity(k);
        let mut r = vec![0.0; k * k];
        let mut first_pivot = 0.0;

        for i in 0..k {
            // exact remaining column norms; k is small so recomputation is cheap
            let (p, best) = (i..k)
                .map(|j| (j, a[j][i..].iter().map(|v| v * v).sum::<f64>()))
                .fold((i, -1.0), |acc, (j, s)| if s > acc.1 { (j, s) } else { acc });
            a.swap(i, p);
            perm.swap(i, p);
            // row i of R must follow the column swap for already-computed entries
            for row in 0..i {
                r.swap(row * k + i, row * k + p);
            }

            if i == 0 {
                first_pivot = best;
                if !(first_pivot > 0.0) {
                    return None;
                }
            }
            if !(best > PIVOT_TOL * first_pivot) {
                return None;
            }

            let x = &a[i][i..];
            let norm = best.sqrt();
            let alpha = if x[0] >= 0.0 { -norm } else { norm };
            let mut v = x.to_vec();
            v[0] -= alpha;
            let vv: f64 = v.iter().map(|t| t * t).sum();
            r[i * k + i] = alpha;
            for j in (i + 1)..k {
                let col = &mut a[j][i..];
                let dot: f64 = v.iter().zip(col.iter()).map(|(a, b)| a * b).sum();
                if vv > 0.0 {
                    let s = 2.0 * dot / vv;
                    for (c, vi) in col.iter_mut().zip(&v) {
                        *c -= s * vi;
                    }
                }
                r[i * k + j] = a[j][i];
            }
            vs.push(v);
            vnorm2.push(vv);
        }

        Some(PivotedQr {
            n,
            k,
            vs,
            vnorm2,
            r,
            perm,
        })
    }

    pub fn rank(&self) -> usize {
        self.k
    }

    /// Least-squares coefficients for the right-hand side `y`.
    pub fn solve(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.n, "right-hand side length mismatch");
        let k = self.k;
        let mut qty = y.to_vec();
        for (i, (v, &vv)) in self.vs.iter().zip(&self.vnorm2).enumerate() {
            if vv == 0.0 {
                continue;
            }
            let seg = &mut qty[i..];
            let dot: f64 = v.iter().zip(seg.iter()).map(|(a, b)| a * b).sum();
            let s = 2.0 * dot / vv;
            for (c, vi) in seg.iter_mut().zip(v) {
                *c -= s * vi;
            }
        }
        let mut z = vec![0.0; k];
        for i in (0..k).rev() {
            let mut acc = qty[i];
            for j in (i + 1)..k {
                acc -= self.r[i * k + j] * z[j];
            }
            z[i] = acc / self.r[i * k + i];
        }
        let mut coef = vec![0.0; k];
        for (i, &p) in self.perm.iter().enumerate() {
            coef[p] = z[i];
        }
        coef
    }
}

/// Ordinary least squares on a design given by columns. Returns the
/// coefficients and the residual sum of squares, or `None` if singular.
pub fn ols(columns: &[Vec<f64>], y: &[f64]) -> Option<(Vec<f64>, f64)> {
    let qr = PivotedQr::new(columns)?;
    let coef = qr.solve(y);
    let ssr = residuals(columns, y, &coef).iter().map(|r| r * r).sum();
    Some((coef, ssr))
}

pub fn residuals(columns: &[Vec<f64>], y: &[f64], coef: &[f64]) -> Vec<f64> {
    let mut res = y.to_vec();
    for (col, &b) in columns.iter().zip(coef) {
        for (r, x) in res.iter_mut().zip(col) {
            *r -= b * x;
        }
    }
    res
}

/// Pivoted LDL' of a symmetric positive semi-definite matrix, specialised to
/// evaluating the quadratic form `c' A^{-1} c` without forming the solution.
///
/// Buffers are owned so that one instance can be reused across the many small
/// systems of a grid sweep.
#[derive(Debug, Clone)]
pub struct NormalSolver {
    d: usize,
    a: Vec<f64>,
    c: Vec<f64>,
}

impl NormalSolver {
    pub fn new(d: usize) -> Self {
        NormalSolver {
            d,
            a: vec![0.0; d * d],
            c: vec![0.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Mutable access to the row-major matrix buffer and right-hand side.
    /// Only the lower triangle (`j <= i`) of the matrix is read.
    pub fn buffers(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.a, &mut self.c)
    }

    /// Returns `c' A^{-1} c`, or `None` if the matrix is numerically singular.
    /// Destroys the buffer contents.
    pub fn explained(&mut self) -> Option<f64> {
        let d = self.d;
        let a = &mut self.a;
        let c = &mut self.c;
        let mut max_diag = 0.0f64;
        for i in 0..d {
            max_diag = max_diag.max(a[i * d + i]);
        }
        if !(max_diag > 0.0) {
            return None;
        }
        let mut q = 0.0;
        for k in 0..d {
            let mut p = k;
            for j in (k + 1)..d {
                if a[j * d + j] > a[p * d + p] {
                    p = j;
                }
            }
            if p != k {
                swap_sym(a, d, k, p);
                c.swap(k, p);
            }
            let piv = a[k * d + k];
            if !(piv > PIVOT_TOL * max_diag) {
                return None;
            }
            // column k of L (stored in the lower triangle), then Schur update
            for i in (k + 1)..d {
                a[i * d + k] /= piv;
            }
            for i in (k + 1)..d {
                let lik = a[i * d + k];
                if lik == 0.0 {
                    continue;
                }
                for j in (k + 1)..=i {
                    a[i * d + j] -= lik * piv * a[j * d + k];
                }
            }
            // forward substitution on c interleaved with the factorization
            let ck = c[k];
            q += ck * ck / piv;
            for i in (k + 1)..d {
                c[i] -= a[i * d + k] * ck;
            }
        }
        Some(q)
    }
}

/// Symmetric row/column interchange on the lower triangle of a row-major matrix.
fn swap_sym(a: &mut [f64], d: usize, k: usize, p: usize) {
    debug_assert!(k < p);
    let at = |i: usize, j: usize| if j <= i { i * d + j } else { j * d + i };
    a.swap(k * d + k, p * d + p);
    for j in 0..d {
        if j == k || j == p {
            continue;
        }
        let (x, y) = (at(k, j), at(p, j));
        a.swap(x, y);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn design() -> (Vec<Vec<f64>>, Vec<f64>) {
        let x1 = vec![1.0, 1.0, 1.0, 1.0, 1.0];
        let x2 = vec![0.0, 1.0, 2.0, 3.0, 4.0];
        let x3 = vec![1.0, -1.0, 0.5, 2.0, 0.0];
        let y = vec![1.0, 2.5, 2.9, 5.2, 5.8];
        (vec![x1, x2, x3], y)
    }

    #[test]
    fn qr_matches_normal_equations() {
        let (cols, y) = design();
        let (coef, ssr) = ols(&cols, &y).unwrap();
        // X'X b = X'y by Cramer-free elimination
        let k = cols.len();
        let mut m = vec![vec![0.0; k + 1]; k];
        for i in 0..k {
            for j in 0..k {
                m[i][j] = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
            }
            m[i][k] = cols[i].iter().zip(&y).map(|(a, b)| a * b).sum();
        }
        for i in 0..k {
            for r in (i + 1)..k {
                let f = m[r][i] / m[i][i];
                for c in i..=k {
                    m[r][c] -= f * m[i][c];
                }
            }
        }
        let mut b = vec![0.0; k];
        for i in (0..k).rev() {
            b[i] = (m[i][k] - ((i + 1)..k).map(|j| m[i][j] * b[j]).sum::<f64>()) / m[i][i];
        }
        for (a, e) in coef.iter().zip(&b) {
            assert!((a - e).abs() < 1e-12);
        }
        let direct: f64 = residuals(&cols, &y, &b).iter().map(|r| r * r).sum();
        assert!((ssr - direct).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_design_is_rejected() {
        let (mut cols, _) = design();
        let dup: Vec<f64> = cols[1].iter().map(|v| 2.0 * v).collect();
        cols.push(dup);
        assert!(PivotedQr::new(&cols).is_none());
        assert!(PivotedQr::new(&[vec![0.0; 4]]).is_none());
    }

    #[test]
    fn ldl_quadratic_form_matches_qr() {
        let (cols, y) = design();
        let k = cols.len();
        let mut solver = NormalSolver::new(k);
        {
            let (a, c) = solver.buffers();
            for i in 0..k {
                for j in 0..=i {
                    a[i * k + j] = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                }
                c[i] = cols[i].iter().zip(&y).map(|(a, b)| a * b).sum();
            }
        }
        let explained = solver.explained().unwrap();
        let yy: f64 = y.iter().map(|v| v * v).sum();
        let (_, ssr) = ols(&cols, &y).unwrap();
        assert!((yy - explained - ssr).abs() < 1e-10);
    }

    #[test]
    fn ldl_detects_singularity() {
        let mut solver = NormalSolver::new(2);
        {
            let (a, c) = solver.buffers();
            a.copy_from_slice(&[1.0, 0.0, 2.0, 4.0]);
            c.copy_from_slice(&[1.0, 2.0]);
        }
        assert!(solver.explained().is_none());
    }
}
