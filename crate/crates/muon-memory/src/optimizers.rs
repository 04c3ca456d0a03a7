//! Update rules and the trajectory runner.

use crate::harness::{Record, Trajectory};
use crate::linalg::{self, DenseMatrix, LinalgError, SignMethod};
use crate::memory_model::{
    group_means, loss_and_gradient, optimal_loss, EmbeddingBasis, KnowledgeSpec, LossGrad, MemoryState,
    ModelError,
};
use crate::structured::{BlockEval, BlockRule, BlockState};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizerError {
    #[error("non-finite gradient at step {0}")]
    NonFiniteGradient(u64),
    #[error("step {step}: {source}")]
    Step { step: u64, source: ModelError },
    #[error("invalid run config: {0}")]
    Config(String),
}

impl OptimizerError {
    fn at(step: u64, e: impl Into<ModelError>) -> Self {
        OptimizerError::Step { step, source: e.into() }
    }
}

pub type Result<T> = std::result::Result<T, OptimizerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Gd,
    Muon(SignMethod),
    SignGd,
    TraSignGd,
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Gd => "gd",
            OptimizerKind::Muon(_) => "muon",
            OptimizerKind::SignGd => "signgd",
            OptimizerKind::TraSignGd => "tra-signgd",
        }
    }

    fn block_rule(&self) -> Option<BlockRule> {
        match self {
            OptimizerKind::Gd => Some(BlockRule::Gd),
            OptimizerKind::Muon(SignMethod::Exact) => Some(BlockRule::Muon),
            OptimizerKind::TraSignGd => Some(BlockRule::TraSignGd),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub eta: f64,
}

/// Which simulator executes a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    /// Block engine when the rule supports it and K exceeds [`AUTO_DENSE_MAX_K`].
    #[default]
    Auto,
    Dense,
    Block,
}

pub const AUTO_DENSE_MAX_K: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub spec: KnowledgeSpec,
    /// None selects the identity basis.
    pub basis_seed: Option<u64>,
    pub optimizer: Optimizer,
    pub steps: u64,
    pub record_every: u64,
    #[serde(default)]
    pub engine: Engine,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(OptimizerError::Config("steps must be at least 1".into()));
        }
        if self.record_every == 0 {
            return Err(OptimizerError::Config("record_every must be at least 1".into()));
        }
        if !(self.optimizer.eta.is_finite() && self.optimizer.eta > 0.0) {
            return Err(OptimizerError::Config(format!("learning rate {} must be positive", self.optimizer.eta)));
        }
        if let OptimizerKind::Muon(SignMethod::NewtonSchulz(0)) = self.optimizer.kind {
            return Err(OptimizerError::Config("newton-schulz needs at least one iteration".into()));
        }
        if self.engine == Engine::Block && self.optimizer.kind.block_rule().is_none() {
            return Err(OptimizerError::Config(format!(
                "block engine does not support {}",
                self.optimizer.kind.name()
            )));
        }
        Ok(())
    }

    pub fn uses_block_engine(&self) -> bool {
        match self.engine {
            Engine::Dense => false,
            Engine::Block => true,
            Engine::Auto => self.optimizer.kind.block_rule().is_some() && self.spec.k() > AUTO_DENSE_MAX_K,
        }
    }

    pub fn basis(&self) -> EmbeddingBasis {
        let k = self.spec.k();
        match self.basis_seed {
            Some(seed) => EmbeddingBasis::random(k, seed),
            None => EmbeddingBasis::identity(k),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Probes {
    pub msgn_deviation: bool,
    pub weight_structure: bool,
}

impl Probes {
    pub fn all() -> Self {
        Self { msgn_deviation: true, weight_structure: true }
    }
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

/// Apply one update given the already evaluated gradient.
pub fn apply_update(
    state: &MemoryState,
    opt: &Optimizer,
    basis: &EmbeddingBasis,
    lg: &LossGrad,
) -> Result<MemoryState> {
    let step = state.step;
    if !lg.grad_raw.is_finite() || !lg.grad_rotated.is_finite() {
        return Err(OptimizerError::NonFiniteGradient(step));
    }
    let direction = match opt.kind {
        OptimizerKind::Gd => lg.grad_raw.clone(),
        OptimizerKind::Muon(method) => match linalg::matrix_sign(&lg.grad_raw, method) {
            Ok(s) => s,
            Err(LinalgError::ZeroInput) => DenseMatrix::zeros(lg.grad_raw.rows(), lg.grad_raw.cols()),
            Err(e) => return Err(OptimizerError::at(step, e)),
        },
        OptimizerKind::SignGd => lg.grad_raw.map(sgn),
        OptimizerKind::TraSignGd => basis.unrotate(&lg.grad_rotated.map(sgn)).map_err(|e| OptimizerError::at(step, e))?,
    };
    let mut w = state.w.clone();
    w.axpy(-opt.eta, &direction).map_err(|e| OptimizerError::at(step, e))?;
    if !w.is_finite() {
        return Err(OptimizerError::NonFiniteGradient(step));
    }
    Ok(MemoryState { w, step: step + 1 })
}

pub fn step(
    state: &MemoryState,
    opt: &Optimizer,
    basis: &EmbeddingBasis,
    spec: &KnowledgeSpec,
) -> Result<MemoryState> {
    let lg = loss_and_gradient(state, basis, spec).map_err(|e| OptimizerError::at(state.step, e))?;
    apply_update(state, opt, basis, &lg)
}

/// max over j of (max_{i≠j} Ŵ[i][j] - min_{i≠j} Ŵ[i][j]).
pub fn column_symmetry_deviation(w_hat: &DenseMatrix) -> f64 {
    let k = w_hat.rows();
    let mut dev = 0.0f64;
    for j in 0..k {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in (0..k).filter(|&i| i != j) {
            lo = lo.min(w_hat.get(i, j));
            hi = hi.max(w_hat.get(i, j));
        }
        if hi >= lo {
            dev = dev.max(hi - lo);
        }
    }
    dev
}

/// Spread within each C×C block: diagonal blocks are ωI + μ(J - I), off-diagonal blocks constant.
pub fn block_structure_deviation(w_hat: &DenseMatrix, c: usize) -> f64 {
    let m = w_hat.rows() / c;
    let mut dev = 0.0f64;
    let spread = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if v.is_empty() {
            0.0
        } else {
            hi - lo
        }
    };
    for h in 0..m {
        for g in 0..m {
            let mut diag = Vec::new();
            let mut off = Vec::new();
            for a in 0..c {
                for b in 0..c {
                    let x = w_hat.get(h * c + a, g * c + b);
                    if h == g && a == b {
                        diag.push(x);
                    } else {
                        off.push(x);
                    }
                }
            }
            dev = dev.max(spread(&diag)).max(spread(&off));
        }
    }
    dev
}

/// Largest entry of |msgn(P - P̂) - I| for a rotated gradient G = P̂' - P'.
pub fn msgn_deviation(grad_rotated: &DenseMatrix) -> linalg::Result<f64> {
    let s = linalg::matrix_sign(&grad_rotated.scale(-1.0), SignMethod::Exact)?;
    s.max_abs_diff(&DenseMatrix::identity(s.rows()))
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn fingerprint(config: &RunConfig) -> String {
    let json = serde_json::to_string(config).unwrap_or_default();
    format!(
        "{}-K{}-eta{}-T{}-{:016x}",
        config.optimizer.kind.name(),
        config.spec.k(),
        config.optimizer.eta,
        config.steps,
        fnv1a(&json)
    )
}

/// Metrics of the current iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub step: u64,
    pub total_loss: f64,
    pub group_losses: Vec<f64>,
    pub delta_gap: f64,
    /// Per group, the largest p̂_{j|j} - p̂_{j'|j} over items j and in-group j' ≠ j.
    pub in_group_gap: Vec<f64>,
    pub msgn_inf_dev: Option<f64>,
    pub structure_dev: Option<f64>,
}

enum Backend {
    Dense { basis: EmbeddingBasis, state: MemoryState, cache: Option<LossGrad> },
    Block { rule: BlockRule, state: BlockState, cache: Option<BlockEval> },
}

/// A run in progress, on either engine.
pub struct Simulation {
    config: RunConfig,
    backend: Backend,
}

impl Simulation {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let spec = &config.spec;
        let backend = if config.uses_block_engine() {
            let rule = config.optimizer.kind.block_rule().expect("validated");
            Backend::Block { rule, state: BlockState::zeros(spec.m, spec.c), cache: None }
        } else {
            Backend::Dense { basis: config.basis(), state: MemoryState::zeros(spec.k()), cache: None }
        };
        Ok(Self { config: config.clone(), backend })
    }

    pub fn step_index(&self) -> u64 {
        match &self.backend {
            Backend::Dense { state, .. } => state.step,
            Backend::Block { state, .. } => state.step,
        }
    }

    /// Rotated weights as a dense K×K matrix.
    pub fn rotated_weights(&self) -> Result<DenseMatrix> {
        let t = self.step_index();
        match &self.backend {
            Backend::Dense { basis, state, .. } => basis.rotate(&state.w).map_err(|e| OptimizerError::at(t, e)),
            Backend::Block { state, .. } => Ok(state.to_dense()),
        }
    }

    pub fn block_state(&self) -> Option<&BlockState> {
        match &self.backend {
            Backend::Block { state, .. } => Some(state),
            Backend::Dense { .. } => None,
        }
    }

    fn ensure_eval(&mut self) -> Result<()> {
        let spec = &self.config.spec;
        match &mut self.backend {
            Backend::Dense { basis, state, cache } => {
                if cache.is_none() {
                    let lg = loss_and_gradient(state, basis, spec).map_err(|e| OptimizerError::at(state.step, e))?;
                    if !lg.total_loss.is_finite() {
                        return Err(OptimizerError::NonFiniteGradient(state.step));
                    }
                    *cache = Some(lg);
                }
            }
            Backend::Block { state, cache, .. } => {
                if cache.is_none() {
                    let ev = state.evaluate(spec);
                    if !ev.total_loss.is_finite() {
                        return Err(OptimizerError::NonFiniteGradient(state.step));
                    }
                    *cache = Some(ev);
                }
            }
        }
        Ok(())
    }

    pub fn total_loss(&mut self) -> Result<f64> {
        self.ensure_eval()?;
        Ok(match &self.backend {
            Backend::Dense { cache, .. } => cache.as_ref().expect("evaluated").total_loss,
            Backend::Block { cache, .. } => cache.as_ref().expect("evaluated").total_loss,
        })
    }

    pub fn observe(&mut self, probes: Probes) -> Result<Observation> {
        self.ensure_eval()?;
        let t = self.step_index();
        let spec = &self.config.spec;
        let (m, c) = (spec.m, spec.c);
        match &self.backend {
            Backend::Dense { basis, state, cache } => {
                let lg = cache.as_ref().expect("evaluated");
                let k = spec.k();
                let diag: Vec<f64> = (0..k).map(|j| lg.table.cond.get(j, j)).collect();
                let delta_gap = diag.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    - diag.iter().cloned().fold(f64::INFINITY, f64::min);
                let mut in_group_gap = vec![f64::NEG_INFINITY; m];
                for j in 0..k {
                    let g = j / c;
                    for jp in (g * c..(g + 1) * c).filter(|&x| x != j) {
                        let gap = diag[j] - lg.table.cond.get(jp, j);
                        in_group_gap[g] = in_group_gap[g].max(gap);
                    }
                }
                let msgn_inf_dev = if probes.msgn_deviation {
                    Some(msgn_deviation(&lg.grad_rotated).map_err(|e| OptimizerError::at(t, e))?)
                } else {
                    None
                };
                let structure_dev = if probes.weight_structure {
                    let w_hat = basis.rotate(&state.w).map_err(|e| OptimizerError::at(t, e))?;
                    Some(match self.config.optimizer.kind {
                        OptimizerKind::Gd => column_symmetry_deviation(&w_hat),
                        _ => block_structure_deviation(&w_hat, c),
                    })
                } else {
                    None
                };
                Ok(Observation {
                    step: t,
                    total_loss: lg.total_loss,
                    group_losses: group_means(spec, &lg.subtask_losses),
                    delta_gap,
                    in_group_gap,
                    msgn_inf_dev,
                    structure_dev,
                })
            }
            Backend::Block { state, cache, .. } => {
                let ev = cache.as_ref().expect("evaluated");
                let in_group_gap = (0..m)
                    .map(|g| if c > 1 { ev.p_true[g] - ev.p_block[g * m + g] } else { f64::NEG_INFINITY })
                    .collect();
                let msgn_inf_dev = if probes.msgn_deviation {
                    Some(state.msgn_deviation(ev).map_err(|e| OptimizerError::at(t, e))?)
                } else {
                    None
                };
                Ok(Observation {
                    step: t,
                    total_loss: ev.total_loss,
                    group_losses: ev.group_losses.clone(),
                    delta_gap: BlockState::delta_gap(ev),
                    in_group_gap,
                    msgn_inf_dev,
                    // the block parametrization satisfies the structure exactly
                    structure_dev: probes.weight_structure.then_some(0.0),
                })
            }
        }
    }

    pub fn advance(&mut self) -> Result<()> {
        self.ensure_eval()?;
        let eta = self.config.optimizer.eta;
        match &mut self.backend {
            Backend::Dense { basis, state, cache } => {
                let lg = cache.take().expect("evaluated");
                *state = apply_update(state, &self.config.optimizer, basis, &lg)?;
            }
            Backend::Block { rule, state, cache } => {
                let ev = cache.take().expect("evaluated");
                let t = state.step;
                state.step(*rule, eta, &ev).map_err(|e| OptimizerError::at(t, e))?;
            }
        }
        Ok(())
    }
}

fn record_of(o: Observation, l_star: f64) -> Record {
    Record {
        step: o.step,
        total_loss: o.total_loss,
        excess_risk: o.total_loss - l_star,
        group_losses: o.group_losses,
        delta_gap: o.delta_gap,
        msgn_inf_dev: o.msgn_inf_dev,
        structure_dev: o.structure_dev,
    }
}

/// Run from zero init and record every `record_every` steps plus the final step.
pub fn run(config: &RunConfig, probes: Probes) -> Result<Trajectory> {
    let mut sim = Simulation::new(config)?;
    let l_star = optimal_loss(&config.spec);
    let mut records = Vec::new();
    for t in 0..=config.steps {
        if t % config.record_every == 0 || t == config.steps {
            records.push(record_of(sim.observe(probes)?, l_star));
        }
        if t < config.steps {
            sim.advance()?;
        }
    }
    Ok(Trajectory { fingerprint: fingerprint(config), m: config.spec.m, records, overlay: None })
}

/// Final total loss after exactly `config.steps` updates.
pub fn final_loss(config: &RunConfig) -> Result<f64> {
    let mut sim = Simulation::new(config)?;
    for _ in 0..config.steps {
        sim.advance()?;
    }
    sim.total_loss()
}

/// Rotated weights at every step 0..=steps.
pub fn rotated_trajectory(config: &RunConfig) -> Result<Vec<DenseMatrix>> {
    let mut sim = Simulation::new(config)?;
    let mut out = Vec::with_capacity(config.steps as usize + 1);
    for t in 0..=config.steps {
        out.push(sim.rotated_weights()?);
        if t < config.steps {
            sim.advance()?;
        }
    }
    Ok(out)
}
