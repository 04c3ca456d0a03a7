//! Python bindings.

use muon_memory::harness;
use muon_memory::linalg::{self, DenseMatrix, SignMethod};
use muon_memory::memory_model::{self, build_spec, KnowledgeSpec, Spectrum};
use muon_memory::optimizers::{Engine, Optimizer, OptimizerKind, Probes, RunConfig, Simulation as CoreSim};
use muon_memory::theory;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn sign_method(s: &str) -> PyResult<SignMethod> {
    muon_memory::cli::parse_sign_method(s).map_err(value_err)
}

fn optimizer_kind(name: &str, method: &str) -> PyResult<OptimizerKind> {
    Ok(match name {
        "gd" => OptimizerKind::Gd,
        "muon" => OptimizerKind::Muon(sign_method(method)?),
        "signgd" => OptimizerKind::SignGd,
        "tra-signgd" | "tra_signgd" => OptimizerKind::TraSignGd,
        other => return Err(PyValueError::new_err(format!("unknown optimizer '{other}'"))),
    })
}

fn engine(name: &str) -> PyResult<Engine> {
    Ok(match name {
        "auto" => Engine::Auto,
        "dense" => Engine::Dense,
        "block" => Engine::Block,
        other => return Err(PyValueError::new_err(format!("unknown engine '{other}'"))),
    })
}

fn to_dense(rows: Vec<Vec<f64>>) -> PyResult<DenseMatrix> {
    DenseMatrix::from_rows(&rows).map_err(value_err)
}

/// Knowledge distribution: M groups of C items with label noise alpha.
#[pyclass(name = "KnowledgeSpec", frozen, skip_from_py_object)]
struct PySpec {
    inner: KnowledgeSpec,
}

#[pymethods]
impl PySpec {
    /// Pass either `freqs` (one per group) or `beta` for a power law.
    #[new]
    #[pyo3(signature = (m, c, alpha, freqs=None, beta=None))]
    fn new(m: usize, c: usize, alpha: f64, freqs: Option<Vec<f64>>, beta: Option<f64>) -> PyResult<Self> {
        let spectrum = match (freqs, beta) {
            (Some(freqs), None) => Spectrum::Explicit { freqs },
            (None, Some(beta)) => Spectrum::PowerLaw { beta },
            (None, None) => Spectrum::Explicit { freqs: KnowledgeSpec::reference_freqs() },
            _ => return Err(PyValueError::new_err("give freqs or beta, not both")),
        };
        Ok(Self { inner: build_spec(m, c, spectrum, alpha).map_err(value_err)? })
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m
    }

    #[getter]
    fn c(&self) -> usize {
        self.inner.c
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    #[getter]
    fn group_freqs(&self) -> Vec<f64> {
        self.inner.group_freqs.clone()
    }

    fn item_freqs(&self) -> Vec<f64> {
        self.inner.item_freqs()
    }

    fn optimal_loss(&self) -> f64 {
        memory_model::optimal_loss(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!("KnowledgeSpec(m={}, c={}, alpha={})", self.inner.m, self.inner.c, self.inner.alpha)
    }
}

fn run_config(
    spec: &PySpec,
    optimizer: &str,
    eta: f64,
    steps: u64,
    seed: Option<u64>,
    sign_method: &str,
    engine_name: &str,
) -> PyResult<RunConfig> {
    let cfg = RunConfig {
        spec: spec.inner.clone(),
        basis_seed: seed,
        optimizer: Optimizer { kind: optimizer_kind(optimizer, sign_method)?, eta },
        steps,
        record_every: 1,
        engine: engine(engine_name)?,
    };
    cfg.validate().map_err(value_err)?;
    Ok(cfg)
}

/// A run that can be stepped from Python.
#[pyclass(name = "Simulation", unsendable)]
struct PySimulation {
    sim: CoreSim,
    probes: Probes,
}

#[pymethods]
impl PySimulation {
    #[new]
    #[pyo3(signature = (spec, optimizer, eta, seed=Some(0), sign_method="exact", engine="auto", probes=false))]
    fn new(
        spec: &PySpec,
        optimizer: &str,
        eta: f64,
        seed: Option<u64>,
        sign_method: &str,
        engine: &str,
        probes: bool,
    ) -> PyResult<Self> {
        let cfg = run_config(spec, optimizer, eta, 1, seed, sign_method, engine)?;
        let sim = CoreSim::new(&cfg).map_err(value_err)?;
        Ok(Self { sim, probes: if probes { Probes::all() } else { Probes::default() } })
    }

    #[getter]
    fn step(&self) -> u64 {
        self.sim.step_index()
    }

    #[pyo3(signature = (n=1))]
    fn advance(&mut self, n: u64) -> PyResult<()> {
        for _ in 0..n {
            self.sim.advance().map_err(runtime_err)?;
        }
        Ok(())
    }

    fn loss(&mut self) -> PyResult<f64> {
        self.sim.total_loss().map_err(runtime_err)
    }

    /// Metrics of the current iterate as a dict.
    fn observe<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let o = self.sim.observe(self.probes).map_err(runtime_err)?;
        let d = PyDict::new(py);
        d.set_item("step", o.step)?;
        d.set_item("total_loss", o.total_loss)?;
        d.set_item("group_losses", o.group_losses)?;
        d.set_item("delta_gap", o.delta_gap)?;
        d.set_item("msgn_inf_dev", o.msgn_inf_dev)?;
        d.set_item("structure_dev", o.structure_dev)?;
        Ok(d)
    }

    fn rotated_weights(&self) -> PyResult<Vec<Vec<f64>>> {
        Ok(self.sim.rotated_weights().map_err(runtime_err)?.to_rows())
    }
}

/// Full trajectory as a dict of per-step lists.
#[pyfunction]
#[pyo3(signature = (spec, optimizer, eta, steps, seed=Some(0), sign_method="exact", engine="auto", probes=false))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    spec: &PySpec,
    optimizer: &str,
    eta: f64,
    steps: u64,
    seed: Option<u64>,
    sign_method: &str,
    engine: &str,
    probes: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = run_config(spec, optimizer, eta, steps, seed, sign_method, engine)?;
    let p = if probes { Probes::all() } else { Probes::default() };
    let tr = muon_memory::optimizers::run(&cfg, p).map_err(runtime_err)?;
    let d = PyDict::new(py);
    d.set_item("fingerprint", &tr.fingerprint)?;
    d.set_item("step", tr.records.iter().map(|r| r.step).collect::<Vec<_>>())?;
    d.set_item("total_loss", tr.records.iter().map(|r| r.total_loss).collect::<Vec<_>>())?;
    d.set_item("excess_risk", tr.records.iter().map(|r| r.excess_risk).collect::<Vec<_>>())?;
    d.set_item("delta_gap", tr.records.iter().map(|r| r.delta_gap).collect::<Vec<_>>())?;
    d.set_item("group_losses", tr.records.iter().map(|r| r.group_losses.clone()).collect::<Vec<_>>())?;
    d.set_item("msgn_inf_dev", tr.records.iter().map(|r| r.msgn_inf_dev).collect::<Vec<_>>())?;
    d.set_item("structure_dev", tr.records.iter().map(|r| r.structure_dev).collect::<Vec<_>>())?;
    Ok(d)
}

/// U Vᵀ of the thin SVD; `method` is "exact" or "ns:N".
#[pyfunction]
#[pyo3(signature = (a, method="exact"))]
fn matrix_sign(a: Vec<Vec<f64>>, method: &str) -> PyResult<Vec<Vec<f64>>> {
    let m = to_dense(a)?;
    Ok(linalg::matrix_sign(&m, sign_method(method)?).map_err(value_err)?.to_rows())
}

#[pyfunction]
fn singular_values(a: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    Ok(linalg::svd(&to_dense(a)?).map_err(value_err)?.sigma)
}

#[pyfunction]
fn optimal_loss(alpha: f64, k: usize) -> f64 {
    memory_model::optimal_loss_for(alpha, k)
}

#[pyfunction]
fn margin_fixed_point(k: usize, alpha: f64) -> PyResult<f64> {
    Ok(theory::margin_fixed_point(k, alpha).map_err(value_err)?.scalar())
}

#[pyfunction]
fn gd_margin_step(delta: f64, eta: f64, p: f64, k: usize, alpha: f64) -> f64 {
    theory::gd_margin_step(delta, eta, p, k, alpha)
}

#[pyfunction]
fn gd_stability_threshold(k: usize, alpha: f64) -> PyResult<f64> {
    Ok(theory::gd_stability_threshold(k, alpha).map_err(value_err)?.scalar())
}

#[pyfunction]
fn muon_phase_window(eta: f64, k: usize, m: usize, c: usize, alpha: f64) -> PyResult<(f64, f64)> {
    let p = theory::muon_phase_window(eta, k, m, c, alpha).map_err(value_err)?;
    Ok(p.interval().expect("interval"))
}

#[pyfunction]
fn muon_budget_lr(t: usize, k: usize, m: usize, c: usize, alpha: f64) -> PyResult<f64> {
    theory::muon_budget_lr(t, k, m, c, alpha).map_err(value_err)
}

#[pyfunction]
fn scaling_exponents(beta: f64) -> PyResult<(f64, f64)> {
    theory::scaling_exponents(beta).map_err(value_err)
}

/// Fit L(T) - l_star = a·T^(-gamma); returns (a, gamma, residual).
#[pyfunction]
fn fit_power_law(points: Vec<(f64, f64)>, l_star: f64) -> PyResult<(f64, f64, f64)> {
    let f = harness::fit_power_law(&points, l_star).map_err(value_err)?;
    Ok((f.amplitude, f.gamma, f.residual))
}

#[pymodule]
#[pyo3(name = "muon_memory")]
fn py_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySpec>()?;
    m.add_class::<PySimulation>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(matrix_sign, m)?)?;
    m.add_function(wrap_pyfunction!(singular_values, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_loss, m)?)?;
    m.add_function(wrap_pyfunction!(margin_fixed_point, m)?)?;
    m.add_function(wrap_pyfunction!(gd_margin_step, m)?)?;
    m.add_function(wrap_pyfunction!(gd_stability_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(muon_phase_window, m)?)?;
    m.add_function(wrap_pyfunction!(muon_budget_lr, m)?)?;
    m.add_function(wrap_pyfunction!(scaling_exponents, m)?)?;
    m.add_function(wrap_pyfunction!(fit_power_law, m)?)?;
    Ok(())
}
