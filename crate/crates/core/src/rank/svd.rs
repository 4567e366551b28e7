//! One-sided (Hestenes) Jacobi SVD for the small dense matrices that feature
//! maps produce.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sweeps allowed before giving up.
pub const MAX_SWEEPS: usize = 60;
/// A column pair counts as orthogonal once `|<a_p, a_q>| <= 1e-12 · ‖a_p‖‖a_q‖`.
pub const ORTHOGONALITY_TOL: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn check_finite(&self) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite entry {} at ({}, {})",
                self.data[pos],
                pos / self.cols.max(1),
                pos % self.cols.max(1)
            )));
        }
        Ok(())
    }
}

/// `A = U · diag(σ) · Vᵀ` with `σ` sorted descending.
#[derive(Clone, Debug)]
pub struct Svd {
    pub singular_values: Vec<f64>,
    /// `rows × p` with orthonormal columns, `p = min(rows, cols)`.
    pub u: Matrix,
    /// `cols × p` with orthonormal columns.
    pub v: Matrix,
}

impl Svd {
    /// Sum of the leading `terms` rank-one components `σᵢ uᵢ vᵢᵀ`.
    pub fn truncated(&self, terms: usize) -> Matrix {
        let (m, n) = (self.u.rows(), self.v.rows());
        let terms = terms.min(self.singular_values.len());
        let mut out = Matrix::zeros(m, n);
        for i in 0..terms {
            let s = self.singular_values[i];
            for r in 0..m {
                let ur = self.u.get(r, i) * s;
                if ur == 0.0 {
                    continue;
                }
                for c in 0..n {
                    out.data[r * n + c] += ur * self.v.get(c, i);
                }
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Matrix {
        self.truncated(self.singular_values.len())
    }
}

/// Column-major working copy of a tall matrix (`rows >= cols`).
struct Columns {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Columns {
    /// Lays out `a` (or `aᵀ` when `a` is wide) so that the column count is `min(rows, cols)`.
    fn tall(a: &Matrix) -> (Self, bool) {
        if a.rows >= a.cols {
            let mut data = vec![0.0; a.rows * a.cols];
            for r in 0..a.rows {
                for c in 0..a.cols {
                    data[c * a.rows + r] = a.get(r, c);
                }
            }
            (Columns { rows: a.rows, cols: a.cols, data }, false)
        } else {
            // Columns of aᵀ are the rows of a, already contiguous.
            (
                Columns {
                    rows: a.cols,
                    cols: a.rows,
                    data: a.data.clone(),
                },
                true,
            )
        }
    }

    fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    fn pair_mut(&mut self, p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
        debug_assert!(p < q);
        let (head, tail) = self.data.split_at_mut(q * self.rows);
        (&mut head[p * self.rows..(p + 1) * self.rows], &mut tail[..self.rows])
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(a: &mut [f64], b: &mut [f64], c: f64, s: f64) {
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Orthogonalizes the columns of `w` in place, applying the same rotations to
/// `v` when given. Returns the number of sweeps used.
fn jacobi_sweeps(w: &mut Columns, mut v: Option<&mut Columns>) -> Result<usize> {
    let n = w.cols;
    if n < 2 {
        return Ok(0);
    }
    // Columns that have collapsed to roundoff level are left alone; their
    // directions are noise and would otherwise keep the sweep from settling.
    let floor = f64::EPSILON * f64::EPSILON * dot(&w.data, &w.data);
    for sweep in 1..=MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(w.col(p), w.col(p));
                let beta = dot(w.col(q), w.col(q));
                if alpha <= floor || beta <= floor {
                    continue;
                }
                let gamma = dot(w.col(p), w.col(q));
                if gamma.abs() <= ORTHOGONALITY_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (wp, wq) = w.pair_mut(p, q);
                rotate(wp, wq, c, s);
                if let Some(v) = v.as_deref_mut() {
                    let (vp, vq) = v.pair_mut(p, q);
                    rotate(vp, vq, c, s);
                }
            }
        }
        if !rotated {
            return Ok(sweep);
        }
    }
    Err(Error::Numeric(format!(
        "Jacobi SVD did not converge within {MAX_SWEEPS} sweeps"
    )))
}

/// Singular values only, sorted descending. Skips all singular-vector work.
pub fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    a.check_finite()?;
    let (mut w, _) = Columns::tall(a);
    jacobi_sweeps(&mut w, None)?;
    let mut sigma: Vec<f64> = (0..w.cols).map(|j| dot(w.col(j), w.col(j)).sqrt()).collect();
    sigma.sort_by(|x, y| y.total_cmp(x));
    Ok(sigma)
}

/// Full thin SVD.
pub fn svd(a: &Matrix) -> Result<Svd> {
    a.check_finite()?;
    let (mut w, transposed) = Columns::tall(a);
    let n = w.cols;
    let mut v = Columns {
        rows: n,
        cols: n,
        data: Matrix::identity(n).data,
    };
    jacobi_sweeps(&mut w, Some(&mut v))?;

    let norms: Vec<f64> = (0..n).map(|j| dot(w.col(j), w.col(j)).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));

    let sigma_max = order.first().map_or(0.0, |&j| norms[j]);
    let negligible = w.rows.max(n) as f64 * f64::EPSILON * sigma_max;

    let m = w.rows;
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut singular_values = Vec::with_capacity(n);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for &j in &order {
        let s = norms[j];
        singular_values.push(s);
        v_cols.push(v.col(j).to_vec());
        if s > negligible && s > 0.0 {
            u_cols.push(w.col(j).iter().map(|x| x / s).collect());
        } else {
            u_cols.push(Vec::new());
        }
    }
    complete_orthonormal(&mut u_cols, m);

    let left = Matrix::from_fn(m, n, |r, c| u_cols[c][r]);
    let right = Matrix::from_fn(n, n, |r, c| v_cols[c][r]);
    Ok(if transposed {
        Svd {
            singular_values,
            u: right,
            v: left,
        }
    } else {
        Svd {
            singular_values,
            u: left,
            v: right,
        }
    })
}

/// Fills empty slots with unit vectors orthogonal to every other column
/// (Gram-Schmidt against the standard basis).
fn complete_orthonormal(cols: &mut [Vec<f64>], dim: usize) {
    let mut next_basis = 0;
    for slot in 0..cols.len() {
        if !cols[slot].is_empty() {
            continue;
        }
        while next_basis < dim {
            let mut cand = vec![0.0; dim];
            cand[next_basis] = 1.0;
            next_basis += 1;
            for _ in 0..2 {
                for other in cols.iter().filter(|c| !c.is_empty()) {
                    let proj = dot(&cand, other);
                    cand.iter_mut().zip(other).for_each(|(x, o)| *x -= proj * o);
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if norm > 1e-6 {
                cand.iter_mut().for_each(|x| *x /= norm);
                cols[slot] = cand;
                break;
            }
        }
    }
}

/// Rule deciding which singular values count towards the rank.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum TolerancePolicy {
    /// `τ = max(h, w) · ε · σ_max`.
    #[default]
    MaxDimEpsSigmaMax,
    /// Fixed threshold.
    Absolute { tau: f64 },
}

impl TolerancePolicy {
    pub fn threshold(&self, rows: usize, cols: usize, sigma_max: f64) -> f64 {
        match *self {
            TolerancePolicy::MaxDimEpsSigmaMax => rows.max(cols) as f64 * f64::EPSILON * sigma_max,
            TolerancePolicy::Absolute { tau } => tau,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            TolerancePolicy::MaxDimEpsSigmaMax => "tau = max(h,w) * eps * sigma_max".to_string(),
            TolerancePolicy::Absolute { tau } => format!("tau = {tau:e}"),
        }
    }
}

/// Number of singular values strictly above the policy threshold.
pub fn numerical_rank(map: &Matrix, policy: TolerancePolicy) -> Result<usize> {
    map.check_finite()?;
    let stripped = strip_zero_lines(map);
    if stripped.rows == 0 || stripped.cols == 0 {
        return Ok(0);
    }
    let sigma = singular_values(&stripped)?;
    let tau = policy.threshold(map.rows, map.cols, sigma[0]);
    Ok(sigma.iter().filter(|&&s| s > tau).count())
}

/// Drops all-zero rows and columns, which leaves the singular values unchanged
/// apart from zeros. Post-ReLU maps often contain many of them.
fn strip_zero_lines(a: &Matrix) -> Matrix {
    let rows: Vec<usize> = (0..a.rows)
        .filter(|&r| a.data[r * a.cols..(r + 1) * a.cols].iter().any(|&v| v != 0.0))
        .collect();
    let cols: Vec<usize> = (0..a.cols)
        .filter(|&c| rows.iter().any(|&r| a.get(r, c) != 0.0))
        .collect();
    if rows.len() == a.rows && cols.len() == a.cols {
        return a.clone();
    }
    Matrix::from_fn(rows.len(), cols.len(), |r, c| a.get(rows[r], cols[c]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    fn orthonormality_residual(m: &Matrix) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..m.cols() {
            for j in 0..m.cols() {
                let d: f64 = (0..m.rows()).map(|r| m.get(r, i) * m.get(r, j)).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((d - want).abs());
            }
        }
        worst
    }

    #[test]
    fn diagonal_singular_values() {
        let a = Matrix::from_fn(3, 3, |r, c| if r == c { [3.0, 2.0, 1.0][r] } else { 0.0 });
        let s = svd(&a).unwrap();
        for (got, want) in s.singular_values.iter().zip([3.0, 2.0, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn random_wide_matrix_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(&mut rng, 5, 8);
        let s = svd(&a).unwrap();
        assert_eq!(s.u.rows(), 5);
        assert_eq!(s.v.rows(), 8);
        assert!(s.reconstruct().max_abs_diff(&a) < 1e-9);
        assert!(orthonormality_residual(&s.u) < 1e-9);
        assert!(orthonormality_residual(&s.v) < 1e-9);
        assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn planted_rank_two_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Orthonormal pairs from the SVD of random matrices.
        let left = svd(&random_matrix(&mut rng, 7, 2)).unwrap().u;
        let right = svd(&random_matrix(&mut rng, 6, 2)).unwrap().u;
        let (s1, s2) = (4.5, 1.25);
        let a = Matrix::from_fn(7, 6, |r, c| {
            s1 * left.get(r, 0) * right.get(c, 0) + s2 * left.get(r, 1) * right.get(c, 1)
        });
        let s = svd(&a).unwrap();
        assert!((s.singular_values[0] - s1).abs() < 1e-9);
        assert!((s.singular_values[1] - s2).abs() < 1e-9);
        let tau = TolerancePolicy::default().threshold(7, 6, s.singular_values[0]);
        assert!(s.singular_values[2..].iter().all(|&x| x < tau));
        assert_eq!(numerical_rank(&a, TolerancePolicy::default()).unwrap(), 2);
        assert!(orthonormality_residual(&s.u) < 1e-9);
        assert!(s.reconstruct().max_abs_diff(&a) < 1e-9);
    }

    #[test]
    fn zero_and_identity_ranks() {
        let p = TolerancePolicy::default();
        assert_eq!(numerical_rank(&Matrix::zeros(8, 8), p).unwrap(), 0);
        assert_eq!(numerical_rank(&Matrix::identity(7), p).unwrap(), 7);
    }

    #[test]
    fn rejects_non_finite_entries() {
        let mut a = Matrix::identity(3);
        a.set(1, 2, f64::NAN);
        assert!(matches!(svd(&a), Err(Error::Numeric(_))));
        assert!(matches!(numerical_rank(&a, TolerancePolicy::default()), Err(Error::Numeric(_))));
    }

    #[test]
    fn truncation_lowers_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_matrix(&mut rng, 9, 6);
        let s = svd(&a).unwrap();
        for r in 0..6 {
            let t = s.truncated(r);
            assert_eq!(numerical_rank(&t, TolerancePolicy::default()).unwrap(), r);
        }
    }

    #[test]
    fn zero_columns_get_orthonormal_completion() {
        let a = Matrix::from_fn(4, 3, |r, c| if c == 0 { r as f64 + 1.0 } else { 0.0 });
        let s = svd(&a).unwrap();
        assert!(orthonormality_residual(&s.u) < 1e-9);
        assert!(s.reconstruct().max_abs_diff(&a) < 1e-9);
    }
}
