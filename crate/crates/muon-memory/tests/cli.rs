use muon_memory::cli::{self, main_with_args};
use std::path::Path;
use std::process::Command;

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("muon-memory").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn zero_steps_is_a_config_error() {
    assert_eq!(run(&["simulate", "--steps", "0", "--out", "/tmp/never.csv"]), cli::EXIT_CONFIG);
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"M": 10, "colour": 3}"#).unwrap();
    assert_eq!(run(&["simulate", "--config", p(&bad)]), cli::EXIT_CONFIG);
    assert_eq!(run(&["simulate", "--config", "/nonexistent.json"]), cli::EXIT_IO);
    assert_eq!(run(&["simulate", "--preset", "nope"]), cli::EXIT_CONFIG);
    assert_eq!(run(&["simulate", "--alpha", "1.5"]), cli::EXIT_CONFIG);
    assert_eq!(run(&["simulate", "--M", "5"]), cli::EXIT_CONFIG);
    assert_eq!(run(&["simulate", "--K", "101"]), cli::EXIT_CONFIG);
    assert_eq!(run(&["simulate", "--sign-method", "ns:0"]), cli::EXIT_CONFIG);
    assert_eq!(run(&["simulate", "--steps", "2", "--out", "/nonexistent/t.csv"]), cli::EXIT_IO);
}

#[test]
fn flags_and_config_file_agree_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    std::fs::write(
        &cfg,
        format!(
            r#"{{"K": 40, "M": 4, "spectrum": {{"type": "power_law", "beta": 2.0}}, "alpha": 0.2,
               "optimizer": {{"kind": "tra-signgd", "eta": 0.3}}, "steps": 12, "seed": 3,
               "probes": ["losses", "msgn_deviation"], "output": {{"path": "{}", "format": "csv"}}}}"#,
            p(&a)
        ),
    )
    .unwrap();
    assert_eq!(run(&["simulate", "--config", p(&cfg)]), 0);
    let flags = [
        "simulate", "--K", "40", "--M", "4", "--beta", "2.0", "--alpha", "0.2", "--optimizer", "tra-signgd",
        "--eta", "0.3", "--steps", "12", "--seed", "3", "--probes", "losses,msgn_deviation", "--out", p(&b),
    ];
    assert_eq!(run(&flags), 0);
    let (x, y) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(!x.is_empty());
    assert_eq!(x, y);
}

#[test]
fn flags_override_config_and_preset() {
    let base = cli::RunArgs { preset: Some(cli::PresetName::Fig3), ..Default::default() };
    let s = cli::resolve(&base).unwrap();
    assert_eq!((s.run.spec.m, s.run.spec.c), (10, 100));
    let s = cli::resolve(&cli::RunArgs { eta: Some(0.5), k: Some(200), ..base.clone() }).unwrap();
    assert_eq!((s.run.spec.m, s.run.spec.c, s.run.optimizer.eta), (10, 20, 0.5));
    let s = cli::resolve(&cli::RunArgs::default()).unwrap();
    assert_eq!((s.run.spec.k(), s.run.steps), (100, 50));
}

#[test]
fn presets_parse() {
    for p in [cli::PresetName::Fig1, cli::PresetName::Fig3, cli::PresetName::ScalingBeta15] {
        let args = cli::RunArgs { preset: Some(p), ..Default::default() };
        let s = cli::resolve(&args).unwrap();
        assert!(s.run.validate().is_ok());
    }
}

#[test]
fn sign_method_parsing() {
    use muon_memory::linalg::SignMethod;
    assert_eq!(cli::parse_sign_method("exact").unwrap(), SignMethod::Exact);
    assert_eq!(cli::parse_sign_method("ns:7").unwrap(), SignMethod::NewtonSchulz(7));
    assert!(cli::parse_sign_method("svd").is_err());
}

#[test]
fn sweep_writes_sweep_and_fit() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.csv");
    let code = run(&["sweep", "--optimizer", "gd", "--steps", "40", "--out", p(&out)]);
    assert_eq!(code, 0);
    let sweep = std::fs::read_to_string(&out).unwrap();
    assert_eq!(sweep.lines().count(), 5);
    let fit = std::fs::read_to_string(dir.path().join("s_fit.csv")).unwrap();
    assert!(fit.starts_with("name,amplitude,gamma"));
}

#[test]
fn binary_verify_and_bench() {
    let bin = env!("CARGO_BIN_EXE_muon-memory");
    let out = Command::new(bin).args(["verify", "--suite", "stability", "--K", "100"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
    let out = Command::new(bin).args(["verify", "--suite", "window", "--K", "100"]).output().unwrap();
    assert_eq!(out.status.code(), Some(cli::EXIT_CONFIG));
    let out = Command::new(bin)
        .args(["msgn-bench", "--sizes", "8", "--iterations", "5,20", "--count", "3"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 3);
    let out = Command::new(bin).args(["simulate", "--steps", "0"]).output().unwrap();
    assert_eq!(out.status.code(), Some(cli::EXIT_CONFIG));
}
