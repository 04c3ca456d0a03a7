use muon_memory::harness::{self, Artifact, ExportFormat};
use muon_memory::linalg::SignMethod;
use muon_memory::memory_model::{build_spec, KnowledgeSpec, Spectrum};
use muon_memory::optimizers::{Engine, Optimizer, OptimizerKind, Probes, RunConfig};

fn fig1(steps: u64, every: u64) -> RunConfig {
    RunConfig {
        spec: build_spec(10, 10, Spectrum::Explicit { freqs: KnowledgeSpec::reference_freqs() }, 0.1).unwrap(),
        basis_seed: Some(0),
        optimizer: Optimizer { kind: OptimizerKind::Muon(SignMethod::Exact), eta: 0.75 },
        steps,
        record_every: every,
        engine: Engine::Auto,
    }
}

#[test]
fn csv_shape_and_empty_probe_columns() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    harness::run_experiment(&fig1(50, 1), Probes::default(), false, Some((&path, ExportFormat::Csv))).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 52);
    assert!(lines[0].starts_with("step,total_loss,excess_risk,delta_gap,msgn_inf_dev,structure_dev,group_loss_1"));
    for l in &lines {
        assert_eq!(l.split(',').count(), 16);
    }
    let row: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(row[0], "0");
    assert_eq!(row[4], "");
    assert_eq!(row[5], "");
    let t0: f64 = row[1].parse().unwrap();
    assert!((t0 - 100f64.ln()).abs() < 1e-12);
}

#[test]
fn probes_fill_their_columns() {
    let tr = harness::run_experiment(&fig1(5, 1), Probes::all(), false, None).unwrap();
    for r in &tr.records {
        assert!(r.msgn_inf_dev.is_some());
        assert!(r.structure_dev.unwrap() < 1e-8);
    }
}

#[test]
fn json_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.json");
    let tr = harness::run_experiment(&fig1(20, 3), Probes::all(), true, Some((&path, ExportFormat::Json))).unwrap();
    let back = harness::import_trajectory_json(&path).unwrap();
    assert_eq!(back, tr);
    let steps: Vec<u64> = tr.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 3, 6, 9, 12, 15, 18, 20]);
}

#[test]
fn csv_floats_parse_back() {
    let tr = harness::run_experiment(&fig1(4, 1), Probes::default(), false, None).unwrap();
    let text = harness::render(&Artifact::Trajectory(&tr), ExportFormat::Csv);
    for (line, r) in text.lines().skip(1).zip(&tr.records) {
        let loss: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(loss, r.total_loss);
    }
}

#[test]
fn identical_configs_give_identical_bytes() {
    let a = harness::render(
        &Artifact::Trajectory(&harness::run_experiment(&fig1(10, 1), Probes::all(), false, None).unwrap()),
        ExportFormat::Csv,
    );
    let b = harness::render(
        &Artifact::Trajectory(&harness::run_experiment(&fig1(10, 1), Probes::all(), false, None).unwrap()),
        ExportFormat::Csv,
    );
    assert_eq!(a, b);
}

#[test]
fn unwritable_path_is_an_io_error() {
    let tr = harness::run_experiment(&fig1(1, 1), Probes::default(), false, None).unwrap();
    let err = harness::export(Artifact::Trajectory(&tr), std::path::Path::new("/nonexistent/x.csv"), ExportFormat::Csv);
    assert!(matches!(err, Err(harness::HarnessError::Io { .. })));
}
