//! Group-block engine for rotated weights of the form `diag(d) ⊗ I_C + B ⊗ J_C`.
//!
//! From zero init, GD, exact Muon and TRA-SignGD keep Ŵ inside this family, so a
//! run costs O(M²) per step (plus an M×M SVD for Muon) instead of O(K³).
//! Entry (i, j) with i in group h and j in group g is `δ_ij d_g + B[h][g]`.

use crate::linalg::{self, DenseMatrix, SignMethod};
use crate::memory_model::KnowledgeSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockState {
    pub m: usize,
    pub c: usize,
    pub d: Vec<f64>,
    /// Row-major M×M, `b[h * m + g]`.
    pub b: Vec<f64>,
    pub step: u64,
}

#[derive(Debug, Clone)]
pub struct BlockEval {
    pub total_loss: f64,
    pub group_losses: Vec<f64>,
    /// p̂_{j|j} per group.
    pub p_true: Vec<f64>,
    /// p̂ of one answer in group h for a query in group g, excluding the true answer; `[h * m + g]`.
    pub p_block: Vec<f64>,
    /// Gradient in the same parametrization.
    pub grad_d: Vec<f64>,
    pub grad_b: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockRule {
    Gd,
    Muon,
    TraSignGd,
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl BlockState {
    pub fn zeros(m: usize, c: usize) -> Self {
        Self { m, c, d: vec![0.0; m], b: vec![0.0; m * m], step: 0 }
    }

    #[inline]
    pub fn bij(&self, h: usize, g: usize) -> f64 {
        self.b[h * self.m + g]
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let c = self.c;
        DenseMatrix::from_fn(self.m * c, self.m * c, |i, j| {
            let (h, g) = (i / c, j / c);
            let diag = if i == j { self.d[g] } else { 0.0 };
            diag + self.bij(h, g)
        })
    }

    /// Log partition function of a query in group g.
    fn column_lse(&self, g: usize) -> f64 {
        let (m, c) = (self.m, self.c as f64);
        let t = self.d[g] + self.bij(g, g);
        let mut mx = t;
        for h in 0..m {
            mx = mx.max(self.bij(h, g));
        }
        let same = self.bij(g, g);
        if t >= mx {
            let mut rest = (c - 1.0) * (same - t).exp();
            for h in (0..m).filter(|&h| h != g) {
                rest += c * (self.bij(h, g) - t).exp();
            }
            t + rest.ln_1p()
        } else {
            let mut z = (t - mx).exp() + (c - 1.0) * (same - mx).exp();
            for h in (0..m).filter(|&h| h != g) {
                z += c * (self.bij(h, g) - mx).exp();
            }
            mx + z.ln()
        }
    }

    pub fn evaluate(&self, spec: &KnowledgeSpec) -> BlockEval {
        let (m, c) = (self.m, self.c as f64);
        let (q, off) = (spec.q(), spec.off());
        let mut group_losses = vec![0.0; m];
        let mut p_true = vec![0.0; m];
        let mut p_block = vec![0.0; m * m];
        let mut grad_d = vec![0.0; m];
        let mut grad_b = vec![0.0; m * m];
        let mut total = 0.0;
        for g in 0..m {
            let lse = self.column_lse(g);
            let t = self.d[g] + self.bij(g, g);
            let same = self.bij(g, g);
            let mut lg = q * (lse - t);
            if off > 0.0 {
                let mut wrong = (c - 1.0) * (lse - same);
                for h in (0..m).filter(|&h| h != g) {
                    wrong += c * (lse - self.bij(h, g));
                }
                lg += off * wrong;
            }
            group_losses[g] = lg;
            total += spec.group_freqs[g] * lg;
            p_true[g] = (t - lse).exp();
            let pj = spec.group_freqs[g] / c;
            for h in 0..m {
                let p = (self.bij(h, g) - lse).exp();
                p_block[h * m + g] = p;
                grad_b[h * m + g] = pj * (p - off);
            }
            grad_d[g] = pj * ((p_true[g] - q) - (p_block[g * m + g] - off));
            // same zero-column-sum cleanup as the dense gradient
            let sum = grad_d[g] + c * (0..m).map(|h| grad_b[h * m + g]).sum::<f64>();
            let mean = sum / (m as f64 * c);
            for h in 0..m {
                grad_b[h * m + g] -= mean;
            }
        }
        BlockEval { total_loss: total, group_losses, p_true, p_block, grad_d, grad_b }
    }

    /// Exact matrix sign of `diag(gd) ⊗ I + GB ⊗ J`, returned in the same parametrization.
    pub fn block_sign(&self, grad_d: &[f64], grad_b: &[f64]) -> linalg::Result<(Vec<f64>, Vec<f64>)> {
        let (m, c) = (self.m, self.c as f64);
        let reduced = DenseMatrix::from_fn(m, m, |h, g| {
            let diag = if h == g { grad_d[g] } else { 0.0 };
            diag + c * grad_b[h * m + g]
        });
        let r = linalg::svd(&reduced)?;
        let smax_reduced = r.sigma[0];
        let dmax = if self.c > 1 { grad_d.iter().fold(0.0f64, |a, x| a.max(x.abs())) } else { 0.0 };
        let k = m * self.c;
        let tol = linalg::rank_tolerance(k, k, smax_reduced.max(dmax));
        let sd: Vec<f64> = grad_d.iter().map(|&x| if x.abs() > tol { sgn(x) } else { 0.0 }).collect();
        let ms = DenseMatrix::from_fn(m, m, |i, j| {
            (0..m).filter(|&k| r.sigma[k] > tol).map(|k| r.u.get(i, k) * r.v.get(j, k)).sum()
        });
        let mut yb = vec![0.0; m * m];
        for h in 0..m {
            for g in 0..m {
                let diag = if h == g { sd[g] } else { 0.0 };
                yb[h * m + g] = (ms.get(h, g) - diag) / c;
            }
        }
        Ok((sd, yb))
    }

    pub fn step(&mut self, rule: BlockRule, eta: f64, eval: &BlockEval) -> linalg::Result<()> {
        let m = self.m;
        match rule {
            BlockRule::Gd => {
                for g in 0..m {
                    self.d[g] -= eta * eval.grad_d[g];
                }
                for (b, gb) in self.b.iter_mut().zip(&eval.grad_b) {
                    *b -= eta * gb;
                }
            }
            BlockRule::Muon => {
                let (sd, yb) = self.block_sign(&eval.grad_d, &eval.grad_b)?;
                for g in 0..m {
                    self.d[g] -= eta * sd[g];
                }
                for (b, y) in self.b.iter_mut().zip(&yb) {
                    *b -= eta * y;
                }
            }
            BlockRule::TraSignGd => {
                for g in 0..m {
                    let gbb = eval.grad_b[g * m + g];
                    self.d[g] -= eta * (sgn(eval.grad_d[g] + gbb) - sgn(gbb));
                }
                for (b, gb) in self.b.iter_mut().zip(&eval.grad_b) {
                    *b -= eta * sgn(*gb);
                }
            }
        }
        self.step += 1;
        if self.d.iter().chain(&self.b).any(|x| !x.is_finite()) {
            return Err(linalg::LinalgError::NonFinite("block weights"));
        }
        Ok(())
    }

    /// Largest entry of |msgn(P - P̂) - I|, computed from the block form.
    pub fn msgn_deviation(&self, eval: &BlockEval) -> linalg::Result<f64> {
        let m = self.m;
        let (sd, yb) = self.block_sign(&eval.grad_d, &eval.grad_b)?;
        // msgn(P - P̂) = -msgn(G)
        let mut dev = 0.0f64;
        for g in 0..m {
            dev = dev.max((-sd[g] - yb[g * m + g] - 1.0).abs());
            for h in 0..m {
                if h != g || self.c > 1 {
                    dev = dev.max(yb[h * m + g].abs());
                }
            }
        }
        Ok(dev)
    }

    /// max_j p̂_{j|j} - min_j p̂_{j|j}
    pub fn delta_gap(eval: &BlockEval) -> f64 {
        let mx = eval.p_true.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mn = eval.p_true.iter().cloned().fold(f64::INFINITY, f64::min);
        mx - mn
    }
}

/// Muon with the exact sign agrees with the block rule; Newton-Schulz does not stay in the family.
pub fn supports(method: SignMethod) -> bool {
    matches!(method, SignMethod::Exact)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory_model::{build_spec, loss_and_gradient_rotated, Spectrum};

    fn spec(alpha: f64) -> KnowledgeSpec {
        build_spec(3, 4, Spectrum::Explicit { freqs: vec![0.5, 0.3, 0.2] }, alpha).unwrap()
    }

    fn some_state() -> BlockState {
        let mut s = BlockState::zeros(3, 4);
        s.d = vec![1.3, -0.2, 0.7];
        s.b = vec![0.1, -0.4, 0.25, 0.3, 0.05, -0.1, -0.2, 0.15, 0.4];
        s
    }

    #[test]
    fn matches_dense_loss_and_gradient() {
        let sp = spec(0.1);
        let s = some_state();
        let eval = s.evaluate(&sp);
        let (loss, losses, grad, table) = loss_and_gradient_rotated(&s.to_dense(), &sp).unwrap();
        assert!((loss - eval.total_loss).abs() < 1e-14);
        for g in 0..3 {
            assert!((losses[g * 4] - eval.group_losses[g]).abs() < 1e-13);
            assert!((table.cond.get(g * 4, g * 4) - eval.p_true[g]).abs() < 1e-15);
        }
        let dense_g = BlockState { d: eval.grad_d.clone(), b: eval.grad_b.clone(), ..s.clone() }.to_dense();
        assert!(dense_g.max_abs_diff(&grad).unwrap() < 1e-15);
    }

    #[test]
    fn block_sign_matches_dense_sign() {
        let sp = spec(0.1);
        let s = some_state();
        let eval = s.evaluate(&sp);
        let (sd, yb) = s.block_sign(&eval.grad_d, &eval.grad_b).unwrap();
        let blocks = BlockState { d: sd, b: yb, ..s.clone() }.to_dense();
        let g = BlockState { d: eval.grad_d.clone(), b: eval.grad_b.clone(), ..s.clone() }.to_dense();
        let dense = linalg::matrix_sign(&g, SignMethod::Exact).unwrap();
        assert!(blocks.max_abs_diff(&dense).unwrap() < 1e-10);
    }
}
