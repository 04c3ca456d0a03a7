//! Closed-form predictions and bounds, each tagged with the caveats under which it applies.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("phase window undefined: assumption M << C violated (C={c}, 2M+1={bound})")]
    PhaseWindowUndefined { c: usize, bound: usize },
}

pub type Result<T> = std::result::Result<T, TheoryError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionKind {
    MarginFixedPoint,
    StabilityThreshold,
    NoiselessGdSubtask,
    NoiselessGdTotal,
    NoiselessMuon,
    PhaseWindow,
    BudgetLearningRate,
    ScalingExponents,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Caveat {
    /// Holds only for t much larger than one.
    LargeTime,
    /// Order of magnitude; constants are not pinned.
    UpToConstants,
    /// Value is infinite in this limit.
    Divergent,
    /// Explicit finite-K constants stand in for an o(1) correction.
    FiniteKBand,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Value {
    Scalar(f64),
    Interval { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryPrediction {
    pub kind: PredictionKind,
    pub inputs: Vec<(String, f64)>,
    pub value: Value,
    /// Optional range around a scalar value.
    pub band: Option<(f64, f64)>,
    pub caveats: Vec<Caveat>,
}

impl TheoryPrediction {
    fn new(kind: PredictionKind, inputs: &[(&str, f64)], value: Value, caveats: Vec<Caveat>) -> Self {
        let inputs = inputs.iter().map(|(n, v)| (n.to_string(), *v)).collect();
        Self { kind, inputs, value, band: None, caveats }
    }

    /// Scalar value, or the interval midpoint.
    pub fn scalar(&self) -> f64 {
        match self.value {
            Value::Scalar(x) => x,
            Value::Interval { lo, hi } => 0.5 * (lo + hi),
        }
    }

    pub fn interval(&self) -> Option<(f64, f64)> {
        match self.value {
            Value::Interval { lo, hi } => Some((lo, hi)),
            Value::Scalar(_) => None,
        }
    }

    pub fn is_divergent(&self) -> bool {
        self.caveats.contains(&Caveat::Divergent)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(TheoryError::Invalid(format!("alpha={alpha} outside [0,1)")));
    }
    Ok(())
}

fn q(k: usize, alpha: f64) -> f64 {
    1.0 - alpha + alpha / k as f64
}

/// ln(K q / α); infinite (flagged) without noise.
pub fn margin_fixed_point(k: usize, alpha: f64) -> Result<TheoryPrediction> {
    check_alpha(alpha)?;
    let inputs = [("K", k as f64), ("alpha", alpha)];
    if alpha == 0.0 {
        return Ok(TheoryPrediction::new(
            PredictionKind::MarginFixedPoint,
            &inputs,
            Value::Scalar(f64::INFINITY),
            vec![Caveat::Divergent],
        ));
    }
    let v = (k as f64 * q(k, alpha) / alpha).ln();
    Ok(TheoryPrediction::new(PredictionKind::MarginFixedPoint, &inputs, Value::Scalar(v), vec![]))
}

/// One GD step of the wrong-vs-true margin of a sub-task.
pub fn gd_margin_step(delta: f64, eta: f64, p: f64, k: usize, alpha: f64) -> f64 {
    let kf = k as f64;
    delta + eta * p * kf / (delta.exp() + (kf - 1.0)) - alpha * eta * p
}

/// Supremum of η·p₁ for which the margin fixed point is linearly stable.
pub fn gd_stability_threshold(k: usize, alpha: f64) -> Result<TheoryPrediction> {
    check_alpha(alpha)?;
    if alpha == 0.0 {
        return Err(TheoryError::Invalid("stability threshold undefined without noise (divergent)".into()));
    }
    let v = 2.0 / (alpha * q(k, alpha));
    Ok(TheoryPrediction::new(
        PredictionKind::StabilityThreshold,
        &[("K", k as f64), ("alpha", alpha)],
        Value::Scalar(v),
        vec![],
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiselessQuery {
    /// Sub-task loss of an item with frequency p at step t.
    GdSubtask { p: f64, t: f64 },
    GdTotal { k: usize, t: f64 },
    /// Total loss of Muon; the band carries the finite-K exponent range.
    Muon { k: usize, m: usize, eta: f64, t: f64 },
}

pub fn noiseless_prediction(query: NoiselessQuery) -> Result<TheoryPrediction> {
    match query {
        NoiselessQuery::GdSubtask { p, t } => {
            if !(p > 0.0 && t > 0.0) {
                return Err(TheoryError::Invalid("p and t must be positive".into()));
            }
            Ok(TheoryPrediction::new(
                PredictionKind::NoiselessGdSubtask,
                &[("p", p), ("t", t)],
                Value::Scalar(1.0 / (p * t)),
                vec![Caveat::LargeTime, Caveat::UpToConstants],
            ))
        }
        NoiselessQuery::GdTotal { k, t } => {
            if t <= 0.0 {
                return Err(TheoryError::Invalid("t must be positive".into()));
            }
            Ok(TheoryPrediction::new(
                PredictionKind::NoiselessGdTotal,
                &[("K", k as f64), ("t", t)],
                Value::Scalar(k as f64 / t),
                vec![Caveat::LargeTime, Caveat::UpToConstants],
            ))
        }
        NoiselessQuery::Muon { k, m, eta, t } => {
            if !(t > 0.0 && eta > 0.0) {
                return Err(TheoryError::Invalid("eta and t must be positive".into()));
            }
            let kf = k as f64;
            let m2 = (m * m) as f64;
            let mut p = TheoryPrediction::new(
                PredictionKind::NoiselessMuon,
                &[("K", kf), ("M", m as f64), ("eta", eta), ("t", t)],
                Value::Scalar(kf * (-eta * t).exp()),
                vec![Caveat::LargeTime, Caveat::FiniteKBand],
            );
            // exponent range of K·exp(·)
            p.band = Some((-eta * t * (1.0 + 2.0 * m2 / kf), -eta * t * (1.0 - 3.0 * m2 / kf)));
            Ok(p)
        }
    }
}

fn check_window_inputs(k: usize, m: usize, c: usize, alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(TheoryError::Invalid(format!("alpha={alpha} outside (0,1)")));
    }
    if k != m * c {
        return Err(TheoryError::Invalid(format!("K={k} differs from M*C={}", m * c)));
    }
    if c <= 2 * m + 1 {
        return Err(TheoryError::PhaseWindowUndefined { c, bound: 2 * m + 1 });
    }
    Ok(())
}

/// Bracket [T_lo, T_hi] for the steps at which Muon sub-tasks start oscillating.
pub fn muon_phase_window(eta: f64, k: usize, m: usize, c: usize, alpha: f64) -> Result<TheoryPrediction> {
    check_window_inputs(k, m, c, alpha)?;
    if eta <= 0.0 {
        return Err(TheoryError::Invalid("eta must be positive".into()));
    }
    let (kf, mf, cf) = (k as f64, m as f64, c as f64);
    let l = ((1.0 - alpha) * (kf - 1.0) / alpha).ln();
    let lo = l / (eta * (1.0 + (2.0 * mf - 1.0) / cf));
    let hi = l / (eta * (1.0 - (2.0 * mf + 1.0) / cf));
    Ok(TheoryPrediction::new(
        PredictionKind::PhaseWindow,
        &[("eta", eta), ("K", kf), ("M", mf), ("C", cf), ("alpha", alpha)],
        Value::Interval { lo, hi },
        vec![],
    ))
}

/// Constant learning rate matched to a budget of T steps.
pub fn muon_budget_lr(t: usize, k: usize, m: usize, c: usize, alpha: f64) -> Result<f64> {
    check_window_inputs(k, m, c, alpha)?;
    if t == 0 {
        return Err(TheoryError::Invalid("T must be at least 1".into()));
    }
    let (kf, mf, cf) = (k as f64, m as f64, c as f64);
    Ok(((1.0 - alpha) * kf / alpha).ln() / ((1.0 - (2.0 * mf + 1.0) / cf) * t as f64))
}

/// (GD exponent 1 - 1/β, Muon exponent 2).
pub fn scaling_exponents(beta: f64) -> Result<(f64, f64)> {
    if !(beta > 1.0) {
        return Err(TheoryError::Invalid(format!("beta={beta} must exceed 1")));
    }
    Ok((1.0 - 1.0 / beta, 2.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_point_values() {
        assert!((margin_fixed_point(100, 0.1).unwrap().scalar() - 901f64.ln()).abs() < 1e-12);
        assert!((margin_fixed_point(2, 0.5).unwrap().scalar() - 3f64.ln()).abs() < 1e-12);
        let d = margin_fixed_point(100, 0.0).unwrap();
        assert!(d.is_divergent() && d.scalar().is_infinite());
    }

    #[test]
    fn margin_step_values() {
        assert!((gd_margin_step(0.0, 1.0, 1.0, 100, 0.0) - 1.0).abs() < 1e-15);
        assert!((gd_margin_step(0.0, 1.0, 1.0, 100, 0.1) - 0.9).abs() < 1e-15);
        let fp = margin_fixed_point(100, 0.1).unwrap().scalar();
        assert!((gd_margin_step(fp, 0.3, 0.02, 100, 0.1) - fp).abs() < 1e-12);
    }

    #[test]
    fn threshold_values() {
        let t = gd_stability_threshold(100, 0.1).unwrap().scalar();
        assert!((t - 2.0 / (0.1 * 0.901)).abs() < 1e-12);
        assert!((gd_stability_threshold(2, 0.5).unwrap().scalar() - 16.0 / 3.0).abs() < 1e-12);
        assert!(gd_stability_threshold(2, 0.0).is_err());
    }

    #[test]
    fn window_and_budget() {
        let (lo, hi) = muon_phase_window(0.75, 1000, 10, 100, 0.1).unwrap().interval().unwrap();
        assert!(lo <= hi);
        let (lo2, hi2) = muon_phase_window(1.5, 1000, 10, 100, 0.1).unwrap().interval().unwrap();
        assert!((lo / lo2 - 2.0).abs() < 1e-12 && (hi / hi2 - 2.0).abs() < 1e-12);
        assert!(matches!(
            muon_phase_window(0.75, 100, 10, 10, 0.1),
            Err(TheoryError::PhaseWindowUndefined { .. })
        ));
        let a = muon_budget_lr(500, 1000, 10, 100, 0.1).unwrap();
        let b = muon_budget_lr(1000, 1000, 10, 100, 0.1).unwrap();
        assert!((a / b - 2.0).abs() < 1e-12);
    }

    #[test]
    fn exponents() {
        let (g, m) = scaling_exponents(2.0).unwrap();
        assert_eq!((g, m), (0.5, 2.0));
        assert!(scaling_exponents(1.0).is_err());
        assert!((scaling_exponents(1e9).unwrap().0 - 1.0).abs() < 1e-8);
    }
}
