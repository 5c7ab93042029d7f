use std::fs;
use std::path::Path;
use std::process::Command;

use bsde_lab::harness::{list_experiments, load_config, run, HarnessError};
use sha2::{Digest, Sha256};

const COMPARISON: &str = r#"
experiment = "comparison-suite"
seed = 4

[grid]
steps = 8
paths = 400
"#;

#[test]
fn registry_is_fixed() {
    let list = list_experiments();
    assert_eq!(list.len(), 6);
    let names: Vec<&str> = list.iter().map(|e| e.name).collect();
    assert_eq!(
        names,
        ["lipschitz-convergence", "bounds-audit", "delta-hedge", "blowup-sweep", "utility-suite", "comparison-suite"]
    );
    let anchor = |n: &str| list.iter().find(|e| e.name == n).unwrap().anchor;
    assert_eq!(anchor("blowup-sweep"), "§5.3 / Prop 5.3");
    assert_eq!(anchor("delta-hedge"), "Cor 4.5");
    assert!(list.iter().all(|e| !e.description.is_empty() && !e.description.contains('\n')));
}

#[test]
fn unknown_experiment_is_a_usage_error() {
    let err = load_config("experiment = \"frobnicate\"\nseed = 1\n", None, None).unwrap_err();
    assert!(matches!(err, HarnessError::Usage(_)));
    assert_eq!(err.exit_code(), 2);
    let msg = err.to_string();
    for e in list_experiments() {
        assert!(msg.contains(e.name), "{msg}");
    }
}

#[test]
fn missing_seed_names_the_field() {
    let err = load_config("experiment = \"bounds-audit\"\n", None, None).unwrap_err();
    assert!(matches!(err, HarnessError::Config(_)));
    assert!(err.to_string().contains("seed"), "{err}");
    // A CLI seed does not excuse the config from declaring one.
    assert!(load_config("experiment = \"bounds-audit\"\n", Some(3), None).is_err());
}

#[test]
fn validation_errors_carry_the_field_path() {
    let cases = [
        ("experiment = \"bounds-audit\"\nseed = 1\n[grid]\nsteps = 1\n", "grid.steps"),
        ("experiment = \"bounds-audit\"\nseed = 1\n[grid]\npaths = 0\n", "grid.paths"),
        ("experiment = \"comparison-suite\"\nseed = 1\n[params]\nbeta = \"x\"\n", "params.beta"),
        ("experiment = \"comparison-suite\"\nseed = 1\n[params]\nbogus = 1\n", "params"),
        ("experiment = \"delta-hedge\"\nseed = 1\n[params.basis]\ndegree = -1\n", "params.basis.degree"),
        ("experiment = \"utility-suite\"\nseed = 1\n[params]\nterminal = [1.0]\n", "params.terminal"),
        ("experiment = \"comparison-suite\"\nseed = \"x\"\n", "seed"),
    ];
    for (text, path) in cases {
        let err = load_config(text, None, None).unwrap_err();
        assert!(matches!(err, HarnessError::Config(_)), "{text}: {err}");
        assert!(err.to_string().contains(path), "{text}: {err}");
    }
}

#[test]
fn cli_arguments_override_the_config() {
    let text = format!("output_dir = \"from-config\"\n{COMPARISON}");
    let cfg = load_config(&text, None, None).unwrap();
    assert_eq!(cfg.output_dir, Path::new("from-config"));
    assert_eq!(cfg.seed, 4);
    let cfg = load_config(&text, Some(9), Some(Path::new("cli"))).unwrap();
    assert_eq!(cfg.output_dir, Path::new("cli"));
    assert_eq!(cfg.seed, 9);
    let cfg = load_config(COMPARISON, None, None).unwrap();
    assert_eq!(cfg.output_dir, Path::new("out/comparison-suite"));
}

fn csv_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn same_seed_gives_identical_csvs_and_a_valid_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let ra = run(&load_config(COMPARISON, None, Some(&a)).unwrap()).unwrap();
    let rb = run(&load_config(COMPARISON, None, Some(&b)).unwrap()).unwrap();
    assert_eq!(ra.pass(), rb.pass());
    let (ca, cb) = (csv_bytes(&a), csv_bytes(&b));
    assert!(!ca.is_empty());
    assert_eq!(ca, cb);
    for (_, bytes) in &ca {
        let text = std::str::from_utf8(bytes).unwrap();
        assert!(!text.contains('\r'));
        let cols = text.lines().next().unwrap().split(',').count();
        assert!(text.lines().all(|l| l.split(',').count() == cols));
    }

    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["experiment"], "comparison-suite");
    assert_eq!(manifest["config"]["seed"], 4);
    assert!(manifest["wall_time_seconds"].as_f64().unwrap() >= 0.0);
    assert!(manifest["versions"]["bsde-lab"].is_string());
    let outputs = manifest["outputs"].as_object().unwrap();
    assert_eq!(outputs.len(), ra.files.len());
    for (name, entry) in outputs {
        let bytes = fs::read(a.join(name)).unwrap();
        let hex: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(entry["sha256"], hex.as_str(), "{name}");
    }
    assert!(outputs.contains_key("summary.json"));
}

#[test]
fn failing_checks_write_a_failure_record() {
    let text = format!("{COMPARISON}\n[params]\ngap_rtol = -1.0\n");
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&load_config(&text, None, Some(tmp.path())).unwrap()).unwrap();
    assert!(!out.pass());
    assert_eq!(out.exit_code(), 1);
    let failure: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("failure.json")).unwrap()).unwrap();
    let failed = failure["failed_checks"].as_array().unwrap();
    assert_eq!(failed.len(), 1);
    assert!(failed[0]["name"].as_str().unwrap().contains("constant-driver gap"));
    // Partial results are still there.
    assert!(tmp.path().join("comparison.csv").exists());
    assert!(tmp.path().join("manifest.json").exists());
}

#[test]
fn passing_run_has_no_failure_record() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&load_config(COMPARISON, None, Some(tmp.path())).unwrap()).unwrap();
    assert!(out.pass(), "{:?}", out.checks);
    assert!(!tmp.path().join("failure.json").exists());
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bsde-lab"))
}

#[test]
fn cli_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin().arg("list").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(text.contains("§5.3 / Prop 5.3"));

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "experiment = \"frobnicate\"\nseed = 1\n").unwrap();
    let out = bin().arg("run").arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lipschitz-convergence"));

    let good = tmp.path().join("good.toml");
    fs::write(&good, COMPARISON).unwrap();
    let dir = tmp.path().join("run");
    let out = bin().args(["--threads", "1", "run"]).arg(&good).arg("--output-dir").arg(&dir).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(dir.join("manifest.json").exists());

    let failing = tmp.path().join("failing.toml");
    fs::write(&failing, format!("{COMPARISON}\n[params]\ngap_rtol = -1.0\n")).unwrap();
    let out = bin().arg("run").arg(&failing).arg("--output-dir").arg(tmp.path().join("f")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(tmp.path().join("f/failure.json").exists());

    assert_eq!(bin().arg("nonsense").output().unwrap().status.code(), Some(2));
}

#[test]
fn bound_subcommands_print_one_json_object() {
    let out = bin().args(["bound", "z-one-dim", "--d-xi", "0.7", "--d-f", "0.4", "--k", "2.5", "--n", "3"]).output().unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["value"].as_f64().unwrap(), 3f64.sqrt() * (0.7 + 0.4 * 2.5));

    let out = bin().args(["bound", "y", "--c-xi", "1.3", "--c-f", "0.5", "--k", "0"]).output().unwrap();
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["value"].as_f64().unwrap(), (1.3f64 * 1.3 + 0.25).sqrt());

    let out = bin().args(["bound", "certificate", "--d-xi", "0.3", "--delta", "0.001"]).output().unwrap();
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let (lo, hi) = (v["r_min"].as_f64().unwrap(), v["r_max"].as_f64().unwrap());
    assert!(lo > 0.3 && lo < hi, "{v}");
}
