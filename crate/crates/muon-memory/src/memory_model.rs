//! Knowledge spectrum, embeddings, softmax predictions, loss and gradients.

use crate::linalg::{DenseMatrix, LinalgError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("task index {index} out of range for K={k}")]
    IndexOutOfRange { index: usize, k: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Spectrum {
    Explicit { freqs: Vec<f64> },
    PowerLaw { beta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeSpec {
    pub m: usize,
    pub c: usize,
    pub group_freqs: Vec<f64>,
    pub alpha: f64,
    pub spectrum: Spectrum,
}

pub fn build_spec(m: usize, c: usize, spectrum: Spectrum, alpha: f64) -> Result<KnowledgeSpec> {
    if m == 0 || c == 0 {
        return Err(ModelError::InvalidSpec("M and C must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(ModelError::InvalidSpec(format!("alpha={alpha} outside [0,1)")));
    }
    let group_freqs = match &spectrum {
        Spectrum::Explicit { freqs } => {
            if freqs.len() != m {
                return Err(ModelError::InvalidSpec(format!(
                    "{} frequencies for M={m}",
                    freqs.len()
                )));
            }
            if freqs.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
                return Err(ModelError::InvalidSpec("frequencies must be positive".into()));
            }
            if freqs.windows(2).any(|w| w[1] > w[0]) {
                return Err(ModelError::InvalidSpec("frequencies must be non-increasing".into()));
            }
            let total: f64 = freqs.iter().sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(ModelError::InvalidSpec(format!("frequencies sum to {total}")));
            }
            freqs.clone()
        }
        Spectrum::PowerLaw { beta } => {
            if !(beta.is_finite() && *beta > 1.0) {
                return Err(ModelError::InvalidSpec(format!("beta={beta} must exceed 1")));
            }
            let raw: Vec<f64> = (1..=m).map(|i| (i as f64).powf(-beta)).collect();
            let z: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / z).collect()
        }
    };
    Ok(KnowledgeSpec { m, c, group_freqs, alpha, spectrum })
}

impl KnowledgeSpec {
    /// Frequencies used in the reference experiments: 0.15, eight times 0.1, 0.05.
    pub fn reference_freqs() -> Vec<f64> {
        let mut f = vec![0.15];
        f.extend(std::iter::repeat_n(0.1, 8));
        f.push(0.05);
        f
    }

    pub fn k(&self) -> usize {
        self.m * self.c
    }

    pub fn group_of(&self, j: usize) -> usize {
        j / self.c
    }

    /// Per-item frequency p_j.
    pub fn item_freq(&self, j: usize) -> f64 {
        self.group_freqs[self.group_of(j)] / self.c as f64
    }

    pub fn item_freqs(&self) -> Vec<f64> {
        (0..self.k()).map(|j| self.item_freq(j)).collect()
    }

    /// Probability of the true answer under label noise.
    pub fn q(&self) -> f64 {
        1.0 - self.alpha + self.alpha / self.k() as f64
    }

    /// Probability of any particular wrong answer.
    pub fn off(&self) -> f64 {
        self.alpha / self.k() as f64
    }

    /// Target conditional p_{i|j}.
    pub fn p_cond(&self, i: usize, j: usize) -> f64 {
        if i == j {
            self.q()
        } else {
            self.off()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBasis {
    pub e: DenseMatrix,
    pub e_tilde: DenseMatrix,
    /// None for the identity basis.
    pub seed: Option<u64>,
}

fn orthonormalize(a: &DenseMatrix) -> DenseMatrix {
    let n = a.cols();
    let m = a.rows();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut x: Vec<f64> = (0..m).map(|i| a.get(i, j)).collect();
        for _ in 0..2 {
            for b in &cols {
                let d: f64 = x.iter().zip(b).map(|(u, v)| u * v).sum();
                for (xi, bi) in x.iter_mut().zip(b) {
                    *xi -= d * bi;
                }
            }
        }
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        cols.push(x.into_iter().map(|v| v / norm).collect());
    }
    DenseMatrix::from_fn(m, n, |i, j| cols[j][i])
}

impl EmbeddingBasis {
    pub fn identity(k: usize) -> Self {
        Self { e: DenseMatrix::identity(k), e_tilde: DenseMatrix::identity(k), seed: None }
    }

    /// Two independent orthonormal bases from Gram-Schmidt on seeded Gaussian matrices.
    pub fn random(k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || DenseMatrix::from_fn(k, k, |_, _| StandardNormal.sample(&mut rng));
        let e = orthonormalize(&draw());
        let e_tilde = orthonormalize(&draw());
        Self { e, e_tilde, seed: Some(seed) }
    }

    pub fn k(&self) -> usize {
        self.e.rows()
    }

    pub fn is_identity(&self) -> bool {
        self.seed.is_none()
    }

    /// Ŵ = Ẽᵀ W E
    pub fn rotate(&self, w: &DenseMatrix) -> Result<DenseMatrix> {
        if self.is_identity() {
            return Ok(w.clone());
        }
        Ok(self.e_tilde.t_matmul(w)?.matmul(&self.e)?)
    }

    /// W = Ẽ Ŵ Eᵀ
    pub fn unrotate(&self, w_hat: &DenseMatrix) -> Result<DenseMatrix> {
        if self.is_identity() {
            return Ok(w_hat.clone());
        }
        Ok(self.e_tilde.matmul(w_hat)?.matmul(&self.e.transpose())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryState {
    pub w: DenseMatrix,
    pub step: u64,
}

impl MemoryState {
    pub fn zeros(k: usize) -> Self {
        Self { w: DenseMatrix::zeros(k, k), step: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityTable {
    pub cond: DenseMatrix,
    pub joint: DenseMatrix,
}

/// Column log-sum-exp, accurate when one logit dominates.
fn column_lse(col: &[f64]) -> f64 {
    let (arg, m) = col
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(a, m), (i, &x)| if x > m { (i, x) } else { (a, m) });
    let rest: f64 = col.iter().enumerate().filter(|(i, _)| *i != arg).map(|(_, x)| (x - m).exp()).sum();
    m + rest.ln_1p()
}

fn column(w_hat: &DenseMatrix, j: usize) -> Vec<f64> {
    (0..w_hat.rows()).map(|i| w_hat.get(i, j)).collect()
}

fn check_dims(w: &DenseMatrix, spec: &KnowledgeSpec) -> Result<()> {
    let k = spec.k();
    if w.rows() != k || w.cols() != k {
        return Err(ModelError::InvalidSpec(format!(
            "weights are {}x{} but K={k}",
            w.rows(),
            w.cols()
        )));
    }
    Ok(())
}

/// Softmax table from rotated weights.
pub fn predict_rotated(w_hat: &DenseMatrix, spec: &KnowledgeSpec) -> Result<ProbabilityTable> {
    check_dims(w_hat, spec)?;
    let k = spec.k();
    let mut cond = DenseMatrix::zeros(k, k);
    let mut joint = DenseMatrix::zeros(k, k);
    for j in 0..k {
        let col = column(w_hat, j);
        let lse = column_lse(&col);
        let pj = spec.item_freq(j);
        for (i, x) in col.iter().enumerate() {
            let p = (x - lse).exp();
            cond.set(i, j, p);
            joint.set(i, j, pj * p);
        }
    }
    Ok(ProbabilityTable { cond, joint })
}

pub fn predict(state: &MemoryState, basis: &EmbeddingBasis, spec: &KnowledgeSpec) -> Result<ProbabilityTable> {
    check_dims(&state.w, spec)?;
    predict_rotated(&basis.rotate(&state.w)?, spec)
}

#[derive(Debug, Clone)]
pub struct LossGrad {
    pub total_loss: f64,
    pub subtask_losses: Vec<f64>,
    pub grad_raw: DenseMatrix,
    pub grad_rotated: DenseMatrix,
    pub table: ProbabilityTable,
}

/// Loss, per-task losses and the rotated gradient `P̂' - P'` from rotated weights.
pub fn loss_and_gradient_rotated(
    w_hat: &DenseMatrix,
    spec: &KnowledgeSpec,
) -> Result<(f64, Vec<f64>, DenseMatrix, ProbabilityTable)> {
    check_dims(w_hat, spec)?;
    let k = spec.k();
    let (q, off) = (spec.q(), spec.off());
    let mut losses = vec![0.0; k];
    let mut grad = DenseMatrix::zeros(k, k);
    let mut cond = DenseMatrix::zeros(k, k);
    let mut joint = DenseMatrix::zeros(k, k);
    let mut total = 0.0;
    for j in 0..k {
        let col = column(w_hat, j);
        let lse = column_lse(&col);
        let pj = spec.item_freq(j);
        let mut lj = q * (lse - col[j]);
        if off > 0.0 {
            lj += off * col.iter().enumerate().filter(|(i, _)| *i != j).map(|(_, x)| lse - x).sum::<f64>();
        }
        losses[j] = lj;
        total += pj * lj;
        for (i, x) in col.iter().enumerate() {
            let p = (x - lse).exp();
            cond.set(i, j, p);
            joint.set(i, j, pj * p);
            grad.set(i, j, pj * (p - spec.p_cond(i, j)));
        }
        // columns of P̂' - P' sum to zero exactly; remove the rounding residue so the
        // null direction stays below the rank tolerance of the sign
        let mean = (0..k).map(|i| grad.get(i, j)).sum::<f64>() / k as f64;
        for i in 0..k {
            grad.set(i, j, grad.get(i, j) - mean);
        }
    }
    Ok((total, losses, grad, ProbabilityTable { cond, joint }))
}

pub fn loss_and_gradient(state: &MemoryState, basis: &EmbeddingBasis, spec: &KnowledgeSpec) -> Result<LossGrad> {
    check_dims(&state.w, spec)?;
    let w_hat = basis.rotate(&state.w)?;
    let (total_loss, subtask_losses, grad_rotated, table) = loss_and_gradient_rotated(&w_hat, spec)?;
    let grad_raw = basis.unrotate(&grad_rotated)?;
    Ok(LossGrad { total_loss, subtask_losses, grad_raw, grad_rotated, table })
}

/// Minimal attainable loss; 0 without noise.
pub fn optimal_loss(spec: &KnowledgeSpec) -> f64 {
    optimal_loss_for(spec.alpha, spec.k())
}

pub fn optimal_loss_for(alpha: f64, k: usize) -> f64 {
    if alpha == 0.0 {
        return 0.0;
    }
    let kf = k as f64;
    let q = 1.0 - alpha + alpha / kf;
    -q * q.ln() - alpha * (kf - 1.0) / kf * (alpha / kf).ln()
}

/// Curvature of the rotated loss in column j: p_j (diag(p̂) - p̂ p̂ᵀ).
pub fn hessian_block(
    state: &MemoryState,
    basis: &EmbeddingBasis,
    spec: &KnowledgeSpec,
    j: usize,
) -> Result<DenseMatrix> {
    let k = spec.k();
    if j >= k {
        return Err(ModelError::IndexOutOfRange { index: j, k });
    }
    let table = predict(state, basis, spec)?;
    let p: Vec<f64> = (0..k).map(|i| table.cond.get(i, j)).collect();
    let pj = spec.item_freq(j);
    Ok(DenseMatrix::from_fn(k, k, |a, b| {
        let d = if a == b { p[a] } else { 0.0 };
        pj * (d - p[a] * p[b])
    }))
}

/// Mean sub-task loss of each group.
pub fn group_means(spec: &KnowledgeSpec, subtask: &[f64]) -> Vec<f64> {
    subtask.chunks(spec.c).map(|g| g.iter().sum::<f64>() / spec.c as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference(alpha: f64) -> KnowledgeSpec {
        build_spec(10, 10, Spectrum::Explicit { freqs: KnowledgeSpec::reference_freqs() }, alpha).unwrap()
    }

    #[test]
    fn reference_frequencies() {
        let s = reference(0.1);
        assert_eq!(s.k(), 100);
        assert!((s.item_freq(0) - 0.015).abs() < 1e-15);
        assert!((s.item_freq(50) - 0.01).abs() < 1e-15);
        assert!((s.item_freq(99) - 0.005).abs() < 1e-15);
        assert!((s.p_cond(3, 3) - 0.901).abs() < 1e-12);
        assert!((s.p_cond(2, 3) - 0.001).abs() < 1e-15);
        let total: f64 = s.item_freqs().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noiseless_targets_are_one_hot() {
        let s = reference(0.0);
        assert_eq!(s.p_cond(4, 4), 1.0);
        assert_eq!(s.p_cond(4, 5), 0.0);
        assert_eq!(optimal_loss(&s), 0.0);
    }

    #[test]
    fn spec_validation() {
        let bad = Spectrum::Explicit { freqs: vec![0.4, 0.6] };
        assert!(build_spec(2, 3, bad, 0.1).is_err());
        assert!(build_spec(2, 3, Spectrum::PowerLaw { beta: 1.0 }, 0.1).is_err());
        assert!(build_spec(2, 3, Spectrum::PowerLaw { beta: 2.0 }, 1.0).is_err());
        assert!(build_spec(2, 3, Spectrum::PowerLaw { beta: 2.0 }, -0.1).is_err());
        let s = build_spec(3, 2, Spectrum::PowerLaw { beta: 2.0 }, 0.0).unwrap();
        let z = 1.0 + 0.25 + 1.0 / 9.0;
        assert!((s.group_freqs[1] - 0.25 / z).abs() < 1e-15);
    }

    #[test]
    fn uniform_prediction_at_zero() {
        let s = build_spec(2, 2, Spectrum::Explicit { freqs: vec![0.5, 0.5] }, 0.0).unwrap();
        let t = predict(&MemoryState::zeros(4), &EmbeddingBasis::identity(4), &s).unwrap();
        assert!(t.cond.data().iter().all(|p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn dominant_diagonal_prediction() {
        let s = build_spec(2, 2, Spectrum::Explicit { freqs: vec![0.5, 0.5] }, 0.0).unwrap();
        let w = DenseMatrix::identity(4).scale(10.0);
        let t = predict_rotated(&w, &s).unwrap();
        let e10 = 10f64.exp();
        assert!((t.cond.get(2, 2) - e10 / (e10 + 3.0)).abs() < 1e-14);
    }

    #[test]
    fn zero_state_loss_is_log_k() {
        let s = reference(0.0);
        let (l, _, g, _) = loss_and_gradient_rotated(&DenseMatrix::zeros(100, 100), &s).unwrap();
        assert!((l - 100f64.ln()).abs() < 1e-12);
        for j in 0..100 {
            let colsum: f64 = (0..100).map(|i| g.get(i, j)).sum();
            assert!(colsum.abs() < 1e-12);
        }
    }

    #[test]
    fn hessian_two_by_two() {
        let s = build_spec(1, 2, Spectrum::Explicit { freqs: vec![1.0] }, 0.0).unwrap();
        let h = hessian_block(&MemoryState::zeros(2), &EmbeddingBasis::identity(2), &s, 0).unwrap();
        let expect = DenseMatrix::from_rows(&[vec![0.125, -0.125], vec![-0.125, 0.125]]).unwrap();
        assert!(h.max_abs_diff(&expect).unwrap() < 1e-15);
        assert!(matches!(
            hessian_block(&MemoryState::zeros(2), &EmbeddingBasis::identity(2), &s, 2),
            Err(ModelError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn random_basis_is_orthonormal() {
        let b = EmbeddingBasis::random(12, 3);
        let i = DenseMatrix::identity(12);
        assert!(b.e.t_matmul(&b.e).unwrap().max_abs_diff(&i).unwrap() < 1e-12);
        assert!(b.e_tilde.t_matmul(&b.e_tilde).unwrap().max_abs_diff(&i).unwrap() < 1e-12);
        assert_ne!(b.e, b.e_tilde);
    }
}
