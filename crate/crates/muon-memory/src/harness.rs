//! Metrics, learning-rate sweeps, power-law fits and persistence.

use crate::memory_model::{optimal_loss, KnowledgeSpec, ProbabilityTable};
use crate::optimizers::{self, OptimizerError, OptimizerKind, Probes, RunConfig, Simulation};
use crate::theory::{self, NoiselessQuery, TheoryError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: String },
    #[error("fit: {0}")]
    Fit(String),
    #[error("sweep: {0}")]
    Sweep(String),
    #[error(transparent)]
    Run(#[from] OptimizerError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub step: u64,
    pub total_loss: f64,
    pub excess_risk: f64,
    pub group_losses: Vec<f64>,
    pub delta_gap: f64,
    pub msgn_inf_dev: Option<f64>,
    pub structure_dev: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub fingerprint: String,
    pub m: usize,
    pub records: Vec<Record>,
    /// Predicted total loss at each recorded step, when requested and available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlay: Option<Vec<Option<f64>>>,
}

impl Trajectory {
    pub fn final_record(&self) -> Option<&Record> {
        self.records.last()
    }

    pub fn at(&self, step: u64) -> Option<&Record> {
        self.records.iter().find(|r| r.step == step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub amplitude: f64,
    pub gamma: f64,
    pub residual: f64,
    pub window: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub budget: u64,
    pub best_eta: f64,
    pub min_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaGrid {
    Fixed(Vec<f64>),
    /// One grid per budget, in budget order.
    PerBudget(Vec<Vec<f64>>),
}

impl EtaGrid {
    fn for_budget(&self, i: usize) -> &[f64] {
        match self {
            EtaGrid::Fixed(g) => g,
            EtaGrid::PerBudget(gs) => &gs[i],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub optimizer: String,
    pub points: Vec<SweepPoint>,
    pub grid: EtaGrid,
    /// Final loss of every cell, `cells[budget][eta]`.
    pub cells: Vec<Vec<f64>>,
}

/// max_j p̂_{j|j} - min_j p̂_{j|j}
pub fn delta_gap(table: &ProbabilityTable) -> f64 {
    let k = table.cond.rows();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for j in 0..k {
        let p = table.cond.get(j, j);
        lo = lo.min(p);
        hi = hi.max(p);
    }
    hi - lo
}

fn overlay_for(config: &RunConfig, steps: &[u64]) -> Option<Vec<Option<f64>>> {
    if config.spec.alpha != 0.0 {
        return None;
    }
    let k = config.spec.k();
    let eta = config.optimizer.eta;
    let pred = |t: u64| -> Option<f64> {
        if t == 0 {
            return None;
        }
        let query = match config.optimizer.kind {
            OptimizerKind::Gd => NoiselessQuery::GdTotal { k, t: t as f64 },
            OptimizerKind::Muon(_) => NoiselessQuery::Muon { k, m: config.spec.m, eta, t: t as f64 },
            _ => return None,
        };
        theory::noiseless_prediction(query).ok().map(|p| p.scalar())
    };
    Some(steps.iter().map(|&t| pred(t)).collect())
}

/// Run, attach an optional theory overlay, and write the trajectory if a path is given.
pub fn run_experiment(
    config: &RunConfig,
    probes: Probes,
    overlay: bool,
    output: Option<(&Path, ExportFormat)>,
) -> Result<Trajectory> {
    let mut tr = optimizers::run(config, probes)?;
    if overlay {
        let steps: Vec<u64> = tr.records.iter().map(|r| r.step).collect();
        tr.overlay = overlay_for(config, &steps);
    }
    if let Some((path, format)) = output {
        export(Artifact::Trajectory(&tr), path, format)?;
    }
    Ok(tr)
}

/// Per group, the first step at which p̂_{j|j} - p̂_{j'|j} ≥ 1 - α for an in-group j' ≠ j.
pub fn oscillation_onsets(config: &RunConfig) -> Result<Vec<Option<u64>>> {
    let mut sim = Simulation::new(config)?;
    let threshold = 1.0 - config.spec.alpha;
    let mut onset = vec![None; config.spec.m];
    for t in 0..=config.steps {
        let obs = sim.observe(Probes::default())?;
        for (g, gap) in obs.in_group_gap.iter().enumerate() {
            if onset[g].is_none() && *gap >= threshold {
                onset[g] = Some(t);
            }
        }
        if onset.iter().all(|o| o.is_some()) {
            break;
        }
        if t < config.steps {
            sim.advance()?;
        }
    }
    Ok(onset)
}

/// `n` points geometrically spaced from `lo` to `hi` inclusive.
pub fn geomspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let r = (hi / lo).ln() / (n - 1) as f64;
    (0..n).map(|i| lo * (r * i as f64).exp()).collect()
}

pub const GRID_PER_DECADE: f64 = 9.0;

/// Nine values per decade centred on the budget learning rate, spanning a factor 10^(±4/9).
pub fn muon_eta_grid(budget: u64, spec: &KnowledgeSpec) -> Result<Vec<f64>> {
    let center = theory::muon_budget_lr(budget as usize, spec.k(), spec.m, spec.c, spec.alpha)?;
    Ok((-4..=4).map(|i| center * 10f64.powf(i as f64 / GRID_PER_DECADE)).collect())
}

/// GD grid: `reference / p₁` scaled by 0.05 to 0.8, nine values per decade.
///
/// `reference` is a bound on η·p₁, e.g. [`SMALL_STEP_GD_REFERENCE`] or the stability threshold.
pub fn gd_eta_grid(spec: &KnowledgeSpec, reference: f64) -> Vec<f64> {
    let p1 = spec.item_freq(0);
    let n = (GRID_PER_DECADE * (0.8f64 / 0.05).log10()).round() as usize + 1;
    geomspace(0.05, 0.8, n).into_iter().map(|s| s * reference / p1).collect()
}

/// Keeps every grid point at η·p₁ < 1.
pub const SMALL_STEP_GD_REFERENCE: f64 = 1.0;

pub fn stability_gd_reference(spec: &KnowledgeSpec) -> Result<f64> {
    Ok(theory::gd_stability_threshold(spec.k(), spec.alpha)?.scalar())
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| HarnessError::Sweep(e.to_string()))?;
    Ok(pool.install(f))
}

/// Final loss after exactly T steps for every (budget, η); min over η per budget.
pub fn sweep_lr(
    spec: &KnowledgeSpec,
    kind: OptimizerKind,
    budgets: &[u64],
    grid: &EtaGrid,
    basis_seed: Option<u64>,
    jobs: usize,
) -> Result<SweepResult> {
    if budgets.is_empty() {
        return Err(HarnessError::Sweep("no budgets".into()));
    }
    if let EtaGrid::PerBudget(gs) = grid {
        if gs.len() != budgets.len() {
            return Err(HarnessError::Sweep("one grid per budget required".into()));
        }
    }
    for i in 0..budgets.len() {
        if grid.for_budget(i).is_empty() {
            return Err(HarnessError::Sweep("empty learning-rate grid".into()));
        }
    }
    let cells: Vec<(usize, usize)> = (0..budgets.len())
        .flat_map(|b| (0..grid.for_budget(b).len()).map(move |e| (b, e)))
        .collect();
    let run_cell = |&(b, e): &(usize, usize)| -> std::result::Result<f64, OptimizerError> {
        let config = RunConfig {
            spec: spec.clone(),
            basis_seed,
            optimizer: optimizers::Optimizer { kind, eta: grid.for_budget(b)[e] },
            steps: budgets[b],
            record_every: budgets[b].max(1),
            engine: Default::default(),
        };
        optimizers::final_loss(&config)
    };
    let losses: Vec<std::result::Result<f64, OptimizerError>> =
        with_pool(jobs, || cells.par_iter().map(run_cell).collect())?;
    let mut table: Vec<Vec<f64>> = (0..budgets.len()).map(|b| vec![f64::NAN; grid.for_budget(b).len()]).collect();
    for (&(b, e), l) in cells.iter().zip(losses) {
        table[b][e] = l?;
    }
    let points = budgets
        .iter()
        .enumerate()
        .map(|(b, &budget)| {
            let (best, min_loss) = table[b]
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |(bi, bl), (i, &l)| if l < bl { (i, l) } else { (bi, bl) });
            SweepPoint { budget, best_eta: grid.for_budget(b)[best], min_loss }
        })
        .collect();
    Ok(SweepResult { optimizer: kind.name().to_string(), points, grid: grid.clone(), cells: table })
}

/// Least squares of log(loss - L*) on log T.
pub fn fit_power_law(points: &[(f64, f64)], l_star: f64) -> Result<FitResult> {
    if points.len() < 3 {
        return Err(HarnessError::Fit(format!("need at least 3 points, got {}", points.len())));
    }
    if points.iter().any(|&(_, l)| !(l > l_star)) {
        return Err(HarnessError::Fit("excess risk non-positive".into()));
    }
    if points.iter().any(|&(t, _)| !(t > 0.0)) {
        return Err(HarnessError::Fit("budgets must be positive".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| (p.1 - l_star).ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(HarnessError::Fit("budgets must not all be equal".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let tmin = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let tmax = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    Ok(FitResult { amplitude: intercept.exp(), gamma: -slope, residual: (rss / n).sqrt(), window: (tmin, tmax) })
}

/// Drops points whose excess risk is within 10 machine epsilons of zero, then fits.
pub fn fit_window(points: &[(f64, f64)], l_star: f64) -> Result<FitResult> {
    let kept: Vec<(f64, f64)> = points.iter().cloned().filter(|&(_, l)| l - l_star > 10.0 * f64::EPSILON).collect();
    fit_power_law(&kept, l_star)
}

pub fn fit_sweep(sweep: &SweepResult, l_star: f64) -> Result<FitResult> {
    let pts: Vec<(f64, f64)> = sweep.points.iter().map(|p| (p.budget as f64, p.min_loss)).collect();
    fit_window(&pts, l_star)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub l_star: f64,
    pub muon: SweepResult,
    pub muon_fit: FitResult,
    pub gd: SweepResult,
    pub gd_fit: FitResult,
    /// (GD, Muon) exponents from theory.
    pub predicted: (f64, f64),
}

/// Budgets {0.25, 0.5, 0.75, 1}·M^β rounded to whole steps.
pub fn scaling_budgets(m: usize, beta: f64) -> Vec<u64> {
    let top = (m as f64).powf(beta);
    [0.25, 0.5, 0.75, 1.0].iter().map(|f| (f * top).round().max(1.0) as u64).collect()
}

/// Muon and GD sweeps over the same budgets with their default grids.
pub fn scaling_experiment(
    spec: &KnowledgeSpec,
    budgets: &[u64],
    gd_reference: f64,
    jobs: usize,
) -> Result<ScalingReport> {
    let beta = match spec.spectrum {
        crate::memory_model::Spectrum::PowerLaw { beta } => beta,
        _ => return Err(HarnessError::Sweep("scaling needs a power-law spectrum".into())),
    };
    let l_star = optimal_loss(spec);
    let muon_grid =
        EtaGrid::PerBudget(budgets.iter().map(|&t| muon_eta_grid(t, spec)).collect::<Result<Vec<_>>>()?);
    let muon = sweep_lr(spec, OptimizerKind::Muon(Default::default()), budgets, &muon_grid, None, jobs)?;
    let gd_grid = EtaGrid::Fixed(gd_eta_grid(spec, gd_reference));
    let gd = sweep_lr(spec, OptimizerKind::Gd, budgets, &gd_grid, None, jobs)?;
    let muon_fit = fit_sweep(&muon, l_star)?;
    let gd_fit = fit_sweep(&gd, l_star)?;
    Ok(ScalingReport { l_star, muon, muon_fit, gd, gd_fit, predicted: theory::scaling_exponents(beta)? })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Csv,
    Json,
}

pub enum Artifact<'a> {
    Trajectory(&'a Trajectory),
    Sweep(&'a SweepResult),
    Fit(&'a FitResult),
    Scaling(&'a ScalingReport),
}

/// 17 significant digits.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt_float(x: Option<f64>) -> String {
    x.map(fmt_float).unwrap_or_default()
}

pub fn trajectory_csv(tr: &Trajectory) -> String {
    let mut s = String::from("step,total_loss,excess_risk,delta_gap,msgn_inf_dev,structure_dev");
    for g in 1..=tr.m {
        let _ = write!(s, ",group_loss_{g}");
    }
    s.push('\n');
    for r in &tr.records {
        let _ = write!(
            s,
            "{},{},{},{},{},{}",
            r.step,
            fmt_float(r.total_loss),
            fmt_float(r.excess_risk),
            fmt_float(r.delta_gap),
            opt_float(r.msgn_inf_dev),
            opt_float(r.structure_dev)
        );
        for l in &r.group_losses {
            let _ = write!(s, ",{}", fmt_float(*l));
        }
        s.push('\n');
    }
    s
}

pub fn sweep_csv(sw: &SweepResult) -> String {
    let mut s = String::from("optimizer,budget,best_eta,min_loss\n");
    for p in &sw.points {
        let _ = writeln!(s, "{},{},{},{}", sw.optimizer, p.budget, fmt_float(p.best_eta), fmt_float(p.min_loss));
    }
    s
}

fn fit_row(name: &str, f: &FitResult) -> String {
    format!(
        "{},{},{},{},{},{}\n",
        name,
        fmt_float(f.amplitude),
        fmt_float(f.gamma),
        fmt_float(f.residual),
        fmt_float(f.window.0),
        fmt_float(f.window.1)
    )
}

const FIT_HEADER: &str = "name,amplitude,gamma,residual,t_min,t_max\n";

pub fn fit_csv(f: &FitResult) -> String {
    format!("{FIT_HEADER}{}", fit_row("fit", f))
}

pub fn scaling_csv(r: &ScalingReport) -> String {
    let mut s = sweep_csv(&r.muon);
    s.push_str(&sweep_csv(&r.gd).lines().skip(1).map(|l| format!("{l}\n")).collect::<String>());
    s.push('\n');
    s.push_str(FIT_HEADER);
    s.push_str(&fit_row("muon", &r.muon_fit));
    s.push_str(&fit_row("gd", &r.gd_fit));
    s
}

fn to_json<T: Serialize>(x: &T) -> String {
    let mut s = serde_json::to_string_pretty(x).expect("serializable");
    s.push('\n');
    s
}

pub fn render(artifact: &Artifact, format: ExportFormat) -> String {
    match (artifact, format) {
        (Artifact::Trajectory(t), ExportFormat::Csv) => trajectory_csv(t),
        (Artifact::Trajectory(t), ExportFormat::Json) => to_json(t),
        (Artifact::Sweep(s), ExportFormat::Csv) => sweep_csv(s),
        (Artifact::Sweep(s), ExportFormat::Json) => to_json(s),
        (Artifact::Fit(f), ExportFormat::Csv) => fit_csv(f),
        (Artifact::Fit(f), ExportFormat::Json) => to_json(f),
        (Artifact::Scaling(r), ExportFormat::Csv) => scaling_csv(r),
        (Artifact::Scaling(r), ExportFormat::Json) => to_json(r),
    }
}

pub fn export(artifact: Artifact, path: &Path, format: ExportFormat) -> Result<()> {
    std::fs::write(path, render(&artifact, format))
        .map_err(|e| HarnessError::Io { path: path.to_path_buf(), cause: e.to_string() })
}

pub fn import_trajectory_json(path: &Path) -> Result<Trajectory> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Io { path: path.to_path_buf(), cause: e.to_string() })?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Io { path: path.to_path_buf(), cause: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DenseMatrix;

    #[test]
    fn gap_of_simple_tables() {
        let k = 4;
        let uniform = ProbabilityTable { cond: DenseMatrix::from_fn(k, k, |_, _| 0.25), joint: DenseMatrix::zeros(k, k) };
        assert_eq!(delta_gap(&uniform), 0.0);
        let cond = DenseMatrix::from_fn(k, k, |i, j| if i == j { if i == 1 { 0.9 } else { 0.1 } } else { 0.3 });
        let t = ProbabilityTable { cond, joint: DenseMatrix::zeros(k, k) };
        assert!((delta_gap(&t) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn fit_recovers_exact_power_law() {
        let pts: Vec<(f64, f64)> = [10.0, 100.0, 1000.0].iter().map(|&t: &f64| (t, 0.5 + 3.0 * t.powi(-2))).collect();
        let f = fit_power_law(&pts, 0.5).unwrap();
        assert!((f.amplitude - 3.0).abs() < 1e-9 && (f.gamma - 2.0).abs() < 1e-9);
        assert!(f.residual >= 0.0 && f.residual < 1e-9);
    }

    #[test]
    fn fit_errors() {
        assert!(fit_power_law(&[(1.0, 2.0), (2.0, 1.5)], 0.0).is_err());
        let e = fit_power_law(&[(1.0, 2.0), (2.0, 1.5), (3.0, 0.5)], 1.0).unwrap_err();
        assert!(e.to_string().contains("excess risk non-positive"));
    }

    #[test]
    fn window_drops_converged_points() {
        let pts = vec![(1.0, 2.0), (2.0, 1.25), (4.0, 1.0625), (8.0, 1.0)];
        let f = fit_window(&pts, 1.0).unwrap();
        assert!((f.gamma - 2.0).abs() < 1e-12);
        assert_eq!(f.window, (1.0, 4.0));
    }

    #[test]
    fn grids() {
        let g = geomspace(0.05, 0.8, 12);
        assert!((g[0] - 0.05).abs() < 1e-15 && (g[11] - 0.8).abs() < 1e-14);
        let spec = crate::memory_model::build_spec(
            10,
            100,
            crate::memory_model::Spectrum::Explicit { freqs: crate::memory_model::KnowledgeSpec::reference_freqs() },
            0.1,
        )
        .unwrap();
        let m = muon_eta_grid(1000, &spec).unwrap();
        assert_eq!(m.len(), 9);
        assert!((m[4] - theory::muon_budget_lr(1000, 1000, 10, 100, 0.1).unwrap()).abs() < 1e-15);
        assert_eq!(gd_eta_grid(&spec, 1.0).len(), 12);
        assert_eq!(scaling_budgets(64, 1.5), vec![128, 256, 384, 512]);
    }
}
