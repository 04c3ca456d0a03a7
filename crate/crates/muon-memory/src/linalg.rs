//! Dense row-major matrices, one-sided Jacobi SVD and the matrix sign.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("newton-schulz is undefined for the zero matrix")]
    ZeroInput,
    #[error("jacobi svd did not converge after {0} sweeps")]
    NoConvergence(usize),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(LinalgError::Dimension(format!(
                "{} entries for a {}x{} matrix",
                data.len(),
                rows,
                cols
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite("matrix"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        if rows.iter().any(|x| x.len() != c) {
            return Err(LinalgError::Dimension("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols).map(|r| r.to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(LinalgError::Dimension(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let n = other.cols;
        let mut out = Self::zeros(self.rows, n);
        for i in 0..self.rows {
            let orow = &mut out.data[i * n..(i + 1) * n];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * n..(k + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without forming the transpose.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(LinalgError::Dimension(format!(
                "({}x{})^T times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let n = other.cols;
        let mut out = Self::zeros(self.cols, n);
        for k in 0..self.rows {
            let arow = &self.data[k * self.cols..(k + 1) * self.cols];
            let brow = &other.data[k * n..(k + 1) * n];
            for (i, a) in arow.iter().enumerate() {
                if *a == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * n..(i + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LinalgError::Dimension(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Self) -> Result<()> {
        self.check_same(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| x * s).collect() }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| f(*x)).collect() }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same(other)?;
        Ok(self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn spectral_norm(&self) -> Result<f64> {
        Ok(svd(self)?.sigma.first().copied().unwrap_or(0.0))
    }
}

#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: DenseMatrix,
    pub sigma: Vec<f64>,
    pub v: DenseMatrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> DenseMatrix {
        let (m, n) = (self.u.rows(), self.v.rows());
        DenseMatrix::from_fn(m, n, |i, j| {
            (0..self.sigma.len()).map(|k| self.u.get(i, k) * self.sigma[k] * self.v.get(j, k)).sum()
        })
    }
}

const JACOBI_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 80;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Hestenes rotations on the columns of a tall matrix.
/// Returns orthogonalized columns and the accumulated right rotation (both column-major).
fn hestenes(a: &DenseMatrix) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let (m, n) = (a.rows(), a.cols());
    let mut g: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.get(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let mut norms: Vec<f64> = g.iter().map(|c| dot(c, c)).collect();
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = norms[p];
                let beta = norms[q];
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(&g[p], &g[q]);
                if gamma.abs() <= JACOBI_TOL * (alpha.sqrt() * beta.sqrt()) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = g.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
                let (lo, hi) = v.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
                norms[p] = dot(&g[p], &g[p]);
                norms[q] = dot(&g[q], &g[q]);
            }
        }
        if !rotated {
            return Ok((g, v));
        }
    }
    Err(LinalgError::NoConvergence(MAX_SWEEPS))
}

/// Extends orthonormal columns `basis` (each of length `dim`) to `want` columns.
fn complete_basis(basis: &mut Vec<Vec<f64>>, dim: usize, want: usize) {
    let mut e = 0;
    while basis.len() < want && e < dim {
        let mut x = vec![0.0; dim];
        x[e] = 1.0;
        e += 1;
        for _ in 0..2 {
            for b in basis.iter() {
                let d = dot(&x, b);
                for (xi, bi) in x.iter_mut().zip(b) {
                    *xi -= d * bi;
                }
            }
        }
        let n = dot(&x, &x).sqrt();
        if n > 1e-6 {
            basis.push(x.into_iter().map(|xi| xi / n).collect());
        }
    }
}

fn svd_tall(a: &DenseMatrix) -> Result<SvdResult> {
    let (m, n) = (a.rows(), a.cols());
    let (g, v) = hestenes(a)?;
    let mut order: Vec<(f64, usize)> = g.iter().enumerate().map(|(j, c)| (dot(c, c).sqrt(), j)).collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0));
    let smax = order.first().map_or(0.0, |x| x.0);
    let tiny = smax * f64::EPSILON * (m.max(n) as f64);
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut vcols = Vec::with_capacity(n);
    // nonzero directions first, null directions completed afterwards
    for &(s, j) in &order {
        if s > tiny && s > 0.0 {
            ucols.push(g[j].iter().map(|x| x / s).collect());
        }
        sigma.push(s);
        vcols.push(v[j].clone());
    }
    complete_basis(&mut ucols, m, n);
    let u = DenseMatrix::from_fn(m, n, |i, k| ucols[k][i]);
    let v = DenseMatrix::from_fn(n, n, |i, k| vcols[k][i]);
    Ok(SvdResult { u, sigma, v })
}

/// Thin SVD `A = U diag(sigma) Vᵀ` with sigma sorted descending.
pub fn svd(a: &DenseMatrix) -> Result<SvdResult> {
    if !a.is_finite() {
        return Err(LinalgError::NonFinite("svd input"));
    }
    if a.rows() >= a.cols() {
        svd_tall(a)
    } else {
        let r = svd_tall(&a.transpose())?;
        Ok(SvdResult { u: r.v, sigma: r.sigma, v: r.u })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignMethod {
    Exact,
    NewtonSchulz(usize),
}

impl Default for SignMethod {
    fn default() -> Self {
        SignMethod::Exact
    }
}

/// Relative singular-value cutoff below which a direction counts as null.
pub fn rank_tolerance(rows: usize, cols: usize, smax: f64) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * smax
}

fn sign_exact(a: &DenseMatrix) -> Result<DenseMatrix> {
    let (m, n) = (a.rows(), a.cols());
    if a.max_abs() == 0.0 {
        return Ok(DenseMatrix::zeros(m, n));
    }
    let tall = m >= n;
    let t = if tall { a.clone() } else { a.transpose() };
    let (g, v) = hestenes(&t)?;
    let norms: Vec<f64> = g.iter().map(|c| dot(c, c).sqrt()).collect();
    let smax = norms.iter().cloned().fold(0.0, f64::max);
    let tol = rank_tolerance(m, n, smax);
    let (tm, tn) = (t.rows(), t.cols());
    let mut out = DenseMatrix::zeros(tm, tn);
    for (k, s) in norms.iter().enumerate() {
        if *s <= tol {
            continue;
        }
        for i in 0..tm {
            let ui = g[k][i] / s;
            if ui == 0.0 {
                continue;
            }
            let row = &mut out.data[i * tn..(i + 1) * tn];
            for (o, vj) in row.iter_mut().zip(&v[k]) {
                *o += ui * vj;
            }
        }
    }
    Ok(if tall { out } else { out.transpose() })
}

/// Quintic `x -> (15x - 10x^3 + 3x^5)/8` applied to the singular values.
fn sign_newton_schulz(a: &DenseMatrix, iterations: usize) -> Result<DenseMatrix> {
    let f = a.frobenius_norm();
    if f == 0.0 {
        return Err(LinalgError::ZeroInput);
    }
    let mut x = a.scale(1.0 / f);
    for _ in 0..iterations {
        let xxt = x.matmul(&x.transpose())?;
        let xxt2 = xxt.matmul(&xxt)?;
        let mut poly = xxt.scale(-10.0 / 8.0);
        poly.axpy(3.0 / 8.0, &xxt2)?;
        let mut next = poly.matmul(&x)?;
        next.axpy(15.0 / 8.0, &x)?;
        x = next;
    }
    if !x.is_finite() {
        return Err(LinalgError::NonFinite("newton-schulz iterate"));
    }
    Ok(x)
}

/// `U sgn(Σ) Vᵀ`, with singular values at or below [`rank_tolerance`] mapped to zero.
pub fn matrix_sign(a: &DenseMatrix, method: SignMethod) -> Result<DenseMatrix> {
    if !a.is_finite() {
        return Err(LinalgError::NonFinite("matrix sign input"));
    }
    match method {
        SignMethod::Exact => sign_exact(a),
        SignMethod::NewtonSchulz(n) => sign_newton_schulz(a, n),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_svd() {
        let r = svd(&DenseMatrix::identity(3)).unwrap();
        assert_eq!(r.sigma, vec![1.0, 1.0, 1.0]);
        assert!(r.reconstruct().max_abs_diff(&DenseMatrix::identity(3)).unwrap() < 1e-15);
    }

    #[test]
    fn rank_deficient_diagonal() {
        let a = DenseMatrix::diag(&[3.0, 0.0]);
        let r = svd(&a).unwrap();
        assert_eq!(r.sigma, vec![3.0, 0.0]);
        let utu = r.u.t_matmul(&r.u).unwrap();
        assert!(utu.max_abs_diff(&DenseMatrix::identity(2)).unwrap() < 1e-12);
    }

    #[test]
    fn wide_matrix_reconstructs() {
        let a = random(3, 7, 4);
        let r = svd(&a).unwrap();
        assert_eq!(r.u.rows(), 3);
        assert!(r.reconstruct().sub(&a).unwrap().frobenius_norm() < 1e-12);
    }

    #[test]
    fn sign_of_diagonal() {
        let s = matrix_sign(&DenseMatrix::diag(&[2.0, -3.0, 0.0]), SignMethod::Exact).unwrap();
        assert!(s.max_abs_diff(&DenseMatrix::diag(&[1.0, -1.0, 0.0])).unwrap() < 1e-14);
        let i4 = DenseMatrix::identity(4);
        assert!(matrix_sign(&i4, SignMethod::Exact).unwrap().max_abs_diff(&i4).unwrap() < 1e-15);
    }

    #[test]
    fn zero_input() {
        let z = DenseMatrix::zeros(3, 3);
        assert_eq!(matrix_sign(&z, SignMethod::Exact).unwrap(), z);
        assert_eq!(matrix_sign(&z, SignMethod::NewtonSchulz(5)), Err(LinalgError::ZeroInput));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(DenseMatrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        let mut a = DenseMatrix::zeros(2, 2);
        a.set(0, 1, f64::INFINITY);
        assert!(matches!(svd(&a), Err(LinalgError::NonFinite(_))));
    }

    #[test]
    fn t_matmul_matches_transpose() {
        let a = random(5, 3, 1);
        let b = random(5, 4, 2);
        let x = a.t_matmul(&b).unwrap();
        let y = a.transpose().matmul(&b).unwrap();
        assert!(x.max_abs_diff(&y).unwrap() < 1e-15);
    }

    #[test]
    fn newton_schulz_converges_on_well_conditioned() {
        let a = random(6, 6, 9);
        let exact = matrix_sign(&a, SignMethod::Exact).unwrap();
        let ns = matrix_sign(&a, SignMethod::NewtonSchulz(40)).unwrap();
        assert!(ns.sub(&exact).unwrap().spectral_norm().unwrap() < 1e-8);
    }
}
