//! Command-line front end.

use crate::harness::{self, Artifact, EtaGrid, ExportFormat, HarnessError};
use crate::linalg::{self, DenseMatrix, SignMethod};
use crate::memory_model::{build_spec, KnowledgeSpec, ModelError, Spectrum};
use crate::optimizers::{self, Engine, Optimizer, OptimizerError, OptimizerKind, Probes, RunConfig};
use crate::theory::{self, TheoryError};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("numerical: {0}")]
    Numerical(String),
    #[error("io: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Io { .. } => CliError::Io(e.to_string()),
            HarnessError::Run(r) => r.into(),
            HarnessError::Theory(t) => CliError::Config(t.to_string()),
            HarnessError::Sweep(s) => CliError::Config(s),
            HarnessError::Fit(s) => CliError::Numerical(s),
        }
    }
}

impl From<OptimizerError> for CliError {
    fn from(e: OptimizerError) -> Self {
        match e {
            OptimizerError::Config(s) => CliError::Config(s),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TheoryError> for CliError {
    fn from(e: TheoryError) -> Self {
        CliError::Config(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "muon-memory", version, about = "Muon vs GD dynamics on a softmax associative memory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run one trajectory and export it.
    Simulate(RunArgs),
    /// Learning-rate sweep over budgets {0.25, 0.5, 0.75, 1}·steps with a power-law fit.
    Sweep(RunArgs),
    /// Muon and GD sweeps over {0.25, 0.5, 0.75, 1}·M^beta with fitted exponents.
    Scaling(RunArgs),
    /// Theory-versus-simulation checks.
    Verify(VerifyArgs),
    /// Exact versus Newton-Schulz matrix sign accuracy and time.
    MsgnBench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetName {
    Fig1,
    Fig3,
    #[value(name = "scaling-beta15")]
    ScalingBeta15,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerName {
    Gd,
    Muon,
    Signgd,
    #[value(name = "tra-signgd")]
    #[serde(rename = "tra-signgd")]
    TraSigngd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatName {
    Csv,
    Json,
}

#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<PresetName>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerName>,
    /// exact or ns:N
    #[arg(long = "sign-method")]
    pub sign_method: Option<String>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long = "K")]
    pub k: Option<usize>,
    #[arg(long = "M")]
    pub m: Option<usize>,
    #[arg(long = "C")]
    pub c: Option<usize>,
    /// Switches to a power-law spectrum with this exponent.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated: losses, delta_gap, msgn_deviation, weight_structure.
    #[arg(long, value_delimiter = ',')]
    pub probes: Option<Vec<String>>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<FormatName>,
    /// Bound on eta·p1 that scales the GD sweep grid: a number or "stability" (default 1).
    #[arg(long = "gd-reference")]
    pub gd_reference: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    All,
    Margin,
    Msgn,
    Structure,
    Window,
    Stability,
}

#[derive(Args, Debug, Clone)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub suite: Suite,
    #[arg(long = "K", default_value_t = 1000)]
    pub k: usize,
    #[arg(long = "M", default_value_t = 10)]
    pub m: usize,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.75)]
    pub eta: f64,
}

#[derive(Args, Debug, Clone)]
pub struct BenchArgs {
    /// Matrix sizes.
    #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
    pub sizes: Vec<usize>,
    /// Newton-Schulz iteration counts.
    #[arg(long, value_delimiter = ',', default_value = "5,10,15,20")]
    pub iterations: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// JSON config file; every key is optional so files can be layered over presets.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(rename = "M", default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(rename = "C", default, skip_serializing_if = "Option::is_none")]
    pub c: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<Spectrum>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probes: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputSection>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<OptimizerName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sign_method: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<ExportFormat>,
}

pub fn preset_json(p: PresetName) -> &'static str {
    match p {
        PresetName::Fig1 => include_str!("../presets/fig1.json"),
        PresetName::Fig3 => include_str!("../presets/fig3.json"),
        PresetName::ScalingBeta15 => include_str!("../presets/scaling-beta15.json"),
    }
}

pub fn parse_config(text: &str) -> Result<ConfigFile> {
    serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
}

fn load_config(path: &Path) -> Result<ConfigFile> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

impl ConfigFile {
    /// Keys present in `top` replace those in `self`.
    fn overlay(mut self, top: ConfigFile) -> ConfigFile {
        macro_rules! take {
            ($($f:ident),*) => { $( if top.$f.is_some() { self.$f = top.$f; } )* };
        }
        take!(k, m, c, spectrum, alpha, steps, seed, probes);
        if let Some(o) = top.optimizer {
            let mut base = self.optimizer.unwrap_or_default();
            if o.kind.is_some() {
                base.kind = o.kind;
            }
            if o.eta.is_some() {
                base.eta = o.eta;
            }
            if o.sign_method.is_some() {
                base.sign_method = o.sign_method;
            }
            self.optimizer = Some(base);
        }
        if let Some(o) = top.output {
            let mut base = self.output.unwrap_or_default();
            if o.path.is_some() {
                base.path = o.path;
            }
            if o.format.is_some() {
                base.format = o.format;
            }
            self.output = Some(base);
        }
        self
    }

    fn from_flags(a: &RunArgs) -> ConfigFile {
        let optimizer = if a.optimizer.is_some() || a.eta.is_some() || a.sign_method.is_some() {
            Some(OptimizerSection { kind: a.optimizer, eta: a.eta, sign_method: a.sign_method.clone() })
        } else {
            None
        };
        let output = if a.out.is_some() || a.format.is_some() {
            Some(OutputSection {
                path: a.out.clone(),
                format: a.format.map(|f| match f {
                    FormatName::Csv => ExportFormat::Csv,
                    FormatName::Json => ExportFormat::Json,
                }),
            })
        } else {
            None
        };
        ConfigFile {
            k: a.k,
            m: a.m,
            c: a.c,
            spectrum: a.beta.map(|beta| Spectrum::PowerLaw { beta }),
            alpha: a.alpha,
            optimizer,
            steps: a.steps,
            seed: a.seed,
            probes: a.probes.clone(),
            output,
        }
    }
}

/// Fully resolved run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub run: RunConfig,
    pub probes: Probes,
    pub out: Option<PathBuf>,
    pub format: ExportFormat,
}

pub fn parse_sign_method(s: &str) -> Result<SignMethod> {
    let s = s.trim();
    if s == "exact" {
        return Ok(SignMethod::Exact);
    }
    let n = s
        .strip_prefix("ns:")
        .or_else(|| s.strip_prefix("newton_schulz:"))
        .ok_or_else(|| CliError::Config(format!("unknown sign method '{s}' (exact | ns:N)")))?;
    let n: usize = n.parse().map_err(|_| CliError::Config(format!("bad iteration count in '{s}'")))?;
    if n == 0 {
        return Err(CliError::Config("newton-schulz needs at least one iteration".into()));
    }
    Ok(SignMethod::NewtonSchulz(n))
}

pub fn parse_probes(list: &[String]) -> Result<Probes> {
    let mut p = Probes::default();
    for item in list {
        match item.trim() {
            "losses" | "delta_gap" | "" => {}
            "msgn_deviation" => p.msgn_deviation = true,
            "weight_structure" => p.weight_structure = true,
            other => return Err(CliError::Config(format!("unknown probe '{other}'"))),
        }
    }
    Ok(p)
}

fn resolve_dims(cf: &ConfigFile) -> Result<(usize, usize)> {
    match (cf.k, cf.m, cf.c) {
        (Some(k), Some(m), Some(c)) if k == m * c => Ok((m, c)),
        (Some(k), Some(m), Some(c)) => Err(CliError::Config(format!("K={k} but M*C={}", m * c))),
        (Some(k), Some(m), None) if m > 0 && k % m == 0 => Ok((m, k / m)),
        (Some(k), None, Some(c)) if c > 0 && k % c == 0 => Ok((k / c, c)),
        (None, Some(m), Some(c)) => Ok((m, c)),
        _ => Err(CliError::Config("need two of K, M, C with K = M*C".into())),
    }
}

/// Layer preset (default fig1), config file and flags, then validate.
pub fn resolve(args: &RunArgs) -> Result<Settings> {
    let base = parse_config(preset_json(args.preset.unwrap_or(PresetName::Fig1)))?;
    let mut cf = base;
    if let Some(path) = &args.config {
        let file = load_config(path)?;
        // dimensions from a config file replace the preset's as a set
        if file.k.is_some() || file.m.is_some() || file.c.is_some() {
            cf.k = None;
            cf.m = None;
            cf.c = None;
        }
        cf = cf.overlay(file);
    }
    let flags = ConfigFile::from_flags(args);
    // dimensions given on the command line replace the ones they would contradict
    match (flags.k.is_some(), flags.m.is_some(), flags.c.is_some()) {
        (true, true, false) => cf.c = None,
        (true, false, false) => {
            // keep the group count, resize the groups
            cf.m = resolve_dims(&cf).ok().map(|(m, _)| m);
            cf.c = None;
        }
        (true, false, true) => cf.m = None,
        (false, true, false) | (false, false, true) | (false, true, true) => cf.k = None,
        _ => {}
    }
    let cf = cf.overlay(flags);
    let (m, c) = resolve_dims(&cf)?;
    let spectrum = cf.spectrum.clone().ok_or_else(|| CliError::Config("missing spectrum".into()))?;
    if let Spectrum::Explicit { freqs } = &spectrum {
        if freqs.len() != m {
            return Err(CliError::Config(format!(
                "explicit spectrum has {} groups but M={m}; pass --beta for a power law",
                freqs.len()
            )));
        }
    }
    let alpha = cf.alpha.ok_or_else(|| CliError::Config("missing alpha".into()))?;
    let spec = build_spec(m, c, spectrum, alpha)?;
    let opt = cf.optimizer.clone().unwrap_or_default();
    let method = parse_sign_method(opt.sign_method.as_deref().unwrap_or("exact"))?;
    let kind = match opt.kind.unwrap_or(OptimizerName::Muon) {
        OptimizerName::Gd => OptimizerKind::Gd,
        OptimizerName::Muon => OptimizerKind::Muon(method),
        OptimizerName::Signgd => OptimizerKind::SignGd,
        OptimizerName::TraSigngd => OptimizerKind::TraSignGd,
    };
    let eta = opt.eta.ok_or_else(|| CliError::Config("missing learning rate".into()))?;
    let steps = cf.steps.ok_or_else(|| CliError::Config("missing steps".into()))?;
    if steps == 0 {
        return Err(CliError::Config("steps must be at least 1".into()));
    }
    let run = RunConfig {
        spec,
        basis_seed: Some(cf.seed.unwrap_or(0)),
        optimizer: Optimizer { kind, eta },
        steps,
        record_every: 1,
        engine: Engine::Auto,
    };
    run.validate()?;
    let probes = parse_probes(cf.probes.as_deref().unwrap_or(&[]))?;
    let output = cf.output.clone().unwrap_or_default();
    let format = output.format.unwrap_or_else(|| match output.path.as_ref().and_then(|p| p.extension()) {
        Some(e) if e == "json" => ExportFormat::Json,
        _ => ExportFormat::Csv,
    });
    Ok(Settings { run, probes, out: output.path, format })
}

fn default_out(name: &str, format: ExportFormat) -> PathBuf {
    PathBuf::from(format!(
        "{name}.{}",
        match format {
            ExportFormat::Csv => "csv",
            ExportFormat::Json => "json",
        }
    ))
}

fn cmd_simulate(args: &RunArgs) -> Result<i32> {
    let s = resolve(args)?;
    let out = s.out.clone().unwrap_or_else(|| default_out("trajectory", s.format));
    let tr = harness::run_experiment(&s.run, s.probes, false, Some((&out, s.format)))?;
    let last = tr.final_record().expect("at least one record");
    println!(
        "{} K={} steps={} final loss {:.6} excess {:.3e} delta_gap {:.4} -> {}",
        s.run.optimizer.kind.name(),
        s.run.spec.k(),
        s.run.steps,
        last.total_loss,
        last.excess_risk,
        last.delta_gap,
        out.display()
    );
    Ok(EXIT_OK)
}

/// `dir/name.ext` -> `dir/name_suffix.ext`
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(e) => format!("{stem}_{suffix}.{}", e.to_string_lossy()),
        None => format!("{stem}_{suffix}"),
    };
    path.with_file_name(name)
}

fn gd_reference(args: &RunArgs, spec: &KnowledgeSpec) -> Result<f64> {
    match args.gd_reference.as_deref() {
        None => Ok(harness::SMALL_STEP_GD_REFERENCE),
        Some("stability") => Ok(harness::stability_gd_reference(spec)?),
        Some(x) => match x.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
            _ => Err(CliError::Config(format!("bad --gd-reference '{x}'"))),
        },
    }
}

fn jobs(args: &RunArgs) -> usize {
    args.jobs.unwrap_or(1).max(1)
}

fn cmd_sweep(args: &RunArgs) -> Result<i32> {
    let s = resolve(args)?;
    let spec = &s.run.spec;
    let top = s.run.steps as f64;
    let budgets: Vec<u64> =
        [0.25, 0.5, 0.75, 1.0].iter().map(|f: &f64| (f * top).round().max(1.0) as u64).collect();
    let grid = match s.run.optimizer.kind {
        OptimizerKind::Muon(_) => {
            EtaGrid::PerBudget(budgets.iter().map(|&t| harness::muon_eta_grid(t, spec)).collect::<std::result::Result<Vec<_>, _>>()?)
        }
        OptimizerKind::Gd => {
            let reference = gd_reference(args, spec)?;
            EtaGrid::Fixed(harness::gd_eta_grid(spec, reference))
        }
        _ => EtaGrid::Fixed(
            (-4..=4).map(|i| s.run.optimizer.eta * 10f64.powf(i as f64 / harness::GRID_PER_DECADE)).collect(),
        ),
    };
    let sweep = harness::sweep_lr(spec, s.run.optimizer.kind, &budgets, &grid, s.run.basis_seed, jobs(args))?;
    let l_star = crate::memory_model::optimal_loss(spec);
    let fit = harness::fit_sweep(&sweep, l_star)?;
    let out = s.out.clone().unwrap_or_else(|| default_out("sweep", s.format));
    harness::export(Artifact::Sweep(&sweep), &out, s.format)?;
    let fit_out = sibling(&out, "fit");
    harness::export(Artifact::Fit(&fit), &fit_out, s.format)?;
    for p in &sweep.points {
        println!("T={:>6} best eta {:.6e} min excess {:.6e}", p.budget, p.best_eta, p.min_loss - l_star);
    }
    println!(
        "fitted gamma {:.4} (a={:.4e}, rms {:.3e}) -> {}, {}",
        fit.gamma,
        fit.amplitude,
        fit.residual,
        out.display(),
        fit_out.display()
    );
    Ok(EXIT_OK)
}

fn cmd_scaling(args: &RunArgs) -> Result<i32> {
    let mut a = args.clone();
    if a.preset.is_none() && a.config.is_none() {
        a.preset = Some(PresetName::ScalingBeta15);
    }
    let s = resolve(&a)?;
    let spec = &s.run.spec;
    let beta = match spec.spectrum {
        Spectrum::PowerLaw { beta } => beta,
        _ => return Err(CliError::Config("scaling needs a power-law spectrum (--beta)".into())),
    };
    let budgets = harness::scaling_budgets(spec.m, beta);
    let reference = gd_reference(args, spec)?;
    let report = harness::scaling_experiment(spec, &budgets, reference, jobs(args))?;
    let out = s.out.clone().unwrap_or_else(|| default_out("scaling", s.format));
    harness::export(Artifact::Scaling(&report), &out, s.format)?;
    println!("budgets {:?}", budgets);
    println!("muon gamma {:.4} (theory {:.4})", report.muon_fit.gamma, report.predicted.1);
    println!("gd   gamma {:.4} (theory {:.4})", report.gd_fit.gamma, report.predicted.0);
    println!("-> {}", out.display());
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check { name: name.to_string(), passed, detail }
}

fn reference_like_freqs(m: usize) -> Vec<f64> {
    if m == 10 {
        return KnowledgeSpec::reference_freqs();
    }
    let raw: Vec<f64> = (1..=m).map(|i| (i as f64).powf(-1.5)).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / z).collect()
}

fn verify_spec(k: usize, m: usize, alpha: f64) -> Result<KnowledgeSpec> {
    if m == 0 || k % m != 0 {
        return Err(CliError::Config(format!("K={k} is not a multiple of M={m}")));
    }
    Ok(build_spec(m, k / m, Spectrum::Explicit { freqs: reference_like_freqs(m) }, alpha)?)
}

/// Largest per-step gap between the margin recursion and a dense GD run on the identity basis.
pub fn margin_oracle_error(spec: &KnowledgeSpec, eta_p1: f64, steps: u64) -> Result<f64> {
    let p1 = spec.item_freq(0);
    let cfg = RunConfig {
        spec: spec.clone(),
        basis_seed: None,
        optimizer: Optimizer { kind: OptimizerKind::Gd, eta: eta_p1 / p1 },
        steps,
        record_every: 1,
        engine: Engine::Dense,
    };
    let mut sim = optimizers::Simulation::new(&cfg)?;
    let k = spec.k();
    let groups: Vec<usize> = (0..spec.m).map(|g| g * spec.c).collect();
    let mut deltas = vec![0.0; groups.len()];
    let mut worst = 0.0f64;
    for t in 0..=steps {
        let w = sim.rotated_weights()?;
        for (slot, &j) in groups.iter().enumerate() {
            let i = if j == 0 { 1 } else { 0 };
            let sim_margin = w.get(j, j) - w.get(i, j);
            worst = worst.max((sim_margin - deltas[slot]).abs());
            deltas[slot] =
                theory::gd_margin_step(deltas[slot], cfg.optimizer.eta, spec.item_freq(j), k, spec.alpha);
        }
        if t < steps {
            sim.advance()?;
        }
    }
    Ok(worst)
}

fn check_margin_oracle(spec: &KnowledgeSpec, eta_p1: f64, steps: u64) -> Result<Check> {
    let worst = margin_oracle_error(spec, eta_p1, steps)?;
    Ok(check(
        "margin recursion vs simulated GD",
        worst <= 1e-8,
        format!("K={} eta*p1={eta_p1} steps={steps} max |diff| {worst:.3e} (tol 1e-8)", spec.k()),
    ))
}

/// Largest msgn deviation across a block-engine Muon run, optionally stopping at the first onset.
pub fn msgn_deviation_series(spec: &KnowledgeSpec, eta: f64, steps: u64) -> Result<Vec<(f64, bool)>> {
    let cfg = RunConfig {
        spec: spec.clone(),
        basis_seed: None,
        optimizer: Optimizer { kind: OptimizerKind::Muon(SignMethod::Exact), eta },
        steps,
        record_every: 1,
        engine: Engine::Block,
    };
    let mut sim = optimizers::Simulation::new(&cfg)?;
    let probes = Probes { msgn_deviation: true, weight_structure: false };
    let threshold = 1.0 - spec.alpha;
    let mut out = Vec::new();
    let mut oscillating = false;
    for t in 0..=steps {
        let o = sim.observe(probes)?;
        oscillating |= spec.alpha > 0.0 && o.in_group_gap.iter().any(|g| *g >= threshold);
        out.push((o.msgn_inf_dev.expect("requested"), oscillating));
        if t < steps {
            sim.advance()?;
        }
    }
    Ok(out)
}

fn check_msgn(spec: &KnowledgeSpec, eta: f64) -> Result<Vec<Check>> {
    let bound = (spec.m as f64 + 1.0) / spec.c as f64;
    let mut noiseless = spec.clone();
    noiseless.alpha = 0.0;
    let clean = msgn_deviation_series(&noiseless, 1.0, 30)?;
    let worst_clean = clean.iter().map(|x| x.0).fold(0.0, f64::max);
    let noisy = msgn_deviation_series(spec, eta, 30)?;
    let pre: Vec<f64> = noisy.iter().filter(|x| !x.1).map(|x| x.0).collect();
    let worst_pre = pre.iter().cloned().fold(0.0, f64::max);
    Ok(vec![
        check(
            "msgn deviation bound, noiseless Muon",
            worst_clean <= bound,
            format!("30 steps, max {worst_clean:.4e} <= (M+1)/C = {bound:.4e}"),
        ),
        check(
            "msgn deviation bound, noisy Muon before oscillation",
            !pre.is_empty() && worst_pre <= bound,
            format!("{} steps, max {worst_pre:.4e} <= {bound:.4e}", pre.len()),
        ),
    ])
}

/// Dense structural checks at a size the dense SVD handles quickly (C capped at 20).
fn check_structure(spec: &KnowledgeSpec, eta: f64) -> Result<Vec<Check>> {
    let c_small = spec.c.min(20);
    let small = build_spec(spec.m, c_small, spec.spectrum.clone(), spec.alpha)?;
    let small = KnowledgeSpec { group_freqs: spec.group_freqs.clone(), ..small };
    let steps = 20;
    let mk = |kind, engine, seed| RunConfig {
        spec: small.clone(),
        basis_seed: seed,
        optimizer: Optimizer { kind, eta },
        steps,
        record_every: 1,
        engine,
    };
    let gd = optimizers::rotated_trajectory(&mk(OptimizerKind::Gd, Engine::Dense, Some(1)))?;
    let gd_dev = gd.iter().map(optimizers::column_symmetry_deviation).fold(0.0, f64::max);
    let muon_kind = OptimizerKind::Muon(SignMethod::Exact);
    let mu = optimizers::rotated_trajectory(&mk(muon_kind, Engine::Dense, Some(1)))?;
    let mu_dev = mu.iter().map(|w| optimizers::block_structure_deviation(w, c_small)).fold(0.0, f64::max);
    let blk = optimizers::rotated_trajectory(&mk(muon_kind, Engine::Block, None))?;
    let agree = mu.iter().zip(&blk).map(|(a, b)| a.max_abs_diff(b).unwrap_or(f64::INFINITY)).fold(0.0, f64::max);
    let k_small = small.k();
    Ok(vec![
        check(
            "GD column symmetry",
            gd_dev <= 1e-8,
            format!("K={k_small}, {steps} steps, max spread {gd_dev:.3e}"),
        ),
        check(
            "Muon block structure",
            mu_dev <= 1e-8,
            format!("K={k_small}, {steps} steps, max spread {mu_dev:.3e}"),
        ),
        check(
            "block engine matches dense Muon",
            agree <= 1e-8,
            format!("K={k_small}, {steps} steps, max |diff| {agree:.3e}"),
        ),
    ])
}

fn check_window(spec: &KnowledgeSpec, eta: f64) -> Result<Check> {
    let win = theory::muon_phase_window(eta, spec.k(), spec.m, spec.c, spec.alpha)?;
    let (lo, hi) = win.interval().expect("interval");
    let cfg = RunConfig {
        spec: spec.clone(),
        basis_seed: None,
        optimizer: Optimizer { kind: OptimizerKind::Muon(SignMethod::Exact), eta },
        steps: (hi.ceil() as u64) + 10,
        record_every: 1,
        engine: Engine::Block,
    };
    let onsets = harness::oscillation_onsets(&cfg)?;
    let ok = onsets.iter().all(|o| matches!(o, Some(t) if (*t as f64) >= lo - 1.0 && (*t as f64) <= hi + 1.0));
    Ok(check(
        "oscillation onset inside phase window",
        ok,
        format!("window [{lo:.2}, {hi:.2}] (+-1 step), onsets {:?}", onsets),
    ))
}

/// Iterates the margin recursion at `factor` times the stability threshold.
pub fn stability_run(k: usize, alpha: f64, factor: f64, steps: usize) -> Result<(f64, f64)> {
    let thr = theory::gd_stability_threshold(k, alpha)?.scalar();
    let target = theory::margin_fixed_point(k, alpha)?.scalar();
    let eta_p = factor * thr;
    let mut d = 0.0;
    let mut tail_max = 0.0f64;
    for t in 0..steps {
        d = theory::gd_margin_step(d, eta_p, 1.0, k, alpha);
        if !d.is_finite() {
            return Ok((f64::INFINITY, f64::INFINITY));
        }
        if t >= steps - 100 {
            tail_max = tail_max.max((d - target).abs());
        }
    }
    Ok(((d - target).abs(), tail_max))
}

fn check_stability(k: usize, alpha: f64) -> Result<Vec<Check>> {
    let (stable, _) = stability_run(k, alpha, 0.5, 100_000)?;
    let (_, unstable_tail) = stability_run(k, alpha, 1.5, 100_000)?;
    Ok(vec![
        check("margin converges at 0.5x threshold", stable < 1e-6, format!("|delta - delta*| = {stable:.3e}")),
        check(
            "margin does not converge at 1.5x threshold",
            unstable_tail >= 1e-3,
            format!("late max |delta - delta*| = {unstable_tail:.3e}"),
        ),
    ])
}

pub fn verify_suite(args: &VerifyArgs) -> Result<Vec<Check>> {
    let spec = verify_spec(args.k, args.m, args.alpha)?;
    let mut out = Vec::new();
    let want = |s: Suite| args.suite == Suite::All || args.suite == s;
    if want(Suite::Margin) {
        out.push(check_margin_oracle(&spec, 0.1, 200)?);
    }
    if want(Suite::Msgn) {
        out.extend(check_msgn(&spec, args.eta)?);
    }
    if want(Suite::Structure) {
        out.extend(check_structure(&spec, args.eta)?);
    }
    if want(Suite::Window) {
        out.push(check_window(&spec, args.eta)?);
    }
    if want(Suite::Stability) {
        out.extend(check_stability(args.k, args.alpha)?);
    }
    Ok(out)
}

fn cmd_verify(args: &VerifyArgs) -> Result<i32> {
    let checks = verify_suite(args)?;
    let mut all = true;
    for c in &checks {
        all &= c.passed;
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(if all { EXIT_OK } else { EXIT_CHECK_FAILED })
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub size: usize,
    pub iterations: usize,
    pub mean_error: f64,
    pub max_error: f64,
    pub exact_ms: f64,
    pub ns_ms: f64,
}

/// Random matrices with singular values spread over [0.1, 1].
pub fn conditioned_matrix(n: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let g1 = DenseMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let g2 = DenseMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let u = linalg::svd(&g1).expect("finite").u;
    let v = linalg::svd(&g2).expect("finite").u;
    let sig: Vec<f64> = (0..n).map(|i| 1.0 - 0.9 * i as f64 / (n.max(2) - 1) as f64).collect();
    let us = DenseMatrix::from_fn(n, n, |i, j| u.get(i, j) * sig[j]);
    us.matmul(&v.transpose()).expect("square")
}

pub fn msgn_bench(args: &BenchArgs) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &n in &args.sizes {
        if n == 0 {
            return Err(CliError::Config("sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let mats: Vec<DenseMatrix> = (0..args.count).map(|_| conditioned_matrix(n, &mut rng)).collect();
        let t0 = Instant::now();
        let exact: Vec<DenseMatrix> = mats
            .iter()
            .map(|a| linalg::matrix_sign(a, SignMethod::Exact))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| CliError::Numerical(e.to_string()))?;
        let exact_ms = t0.elapsed().as_secs_f64() * 1e3 / args.count.max(1) as f64;
        for &it in &args.iterations {
            let t0 = Instant::now();
            let mut errs = Vec::new();
            for (a, e) in mats.iter().zip(&exact) {
                let ns = linalg::matrix_sign(a, SignMethod::NewtonSchulz(it))
                    .map_err(|e| CliError::Numerical(e.to_string()))?;
                errs.push(ns.sub(e).and_then(|d| d.spectral_norm()).map_err(|e| CliError::Numerical(e.to_string()))?);
            }
            let ns_ms = t0.elapsed().as_secs_f64() * 1e3 / args.count.max(1) as f64;
            rows.push(BenchRow {
                size: n,
                iterations: it,
                mean_error: errs.iter().sum::<f64>() / errs.len().max(1) as f64,
                max_error: errs.iter().cloned().fold(0.0, f64::max),
                exact_ms,
                ns_ms,
            });
        }
    }
    Ok(rows)
}

fn cmd_bench(args: &BenchArgs) -> Result<i32> {
    let rows = msgn_bench(args)?;
    println!("{:>5} {:>5} {:>12} {:>12} {:>10} {:>10}", "n", "iters", "mean_err", "max_err", "exact_ms", "ns_ms");
    let mut csv = String::from("size,iterations,mean_error,max_error,exact_ms,ns_ms\n");
    for r in &rows {
        println!(
            "{:>5} {:>5} {:>12.3e} {:>12.3e} {:>10.3} {:>10.3}",
            r.size, r.iterations, r.mean_error, r.max_error, r.exact_ms, r.ns_ms
        );
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.size,
            r.iterations,
            harness::fmt_float(r.mean_error),
            harness::fmt_float(r.max_error),
            harness::fmt_float(r.exact_ms),
            harness::fmt_float(r.ns_ms)
        ));
    }
    if let Some(p) = &args.out {
        std::fs::write(p, csv).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
    }
    Ok(EXIT_OK)
}

pub fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Scaling(a) => cmd_scaling(a),
        Command::Verify(a) => cmd_verify(a),
        Command::MsgnBench(a) => cmd_bench(a),
    }
}

pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
