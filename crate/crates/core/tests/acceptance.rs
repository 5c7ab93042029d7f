//! Acceptance suite. Runs every experiment with the shipped configs and prints
//! one PASS/FAIL line per criterion.
//!
//! `cargo test --release --test acceptance -- --nocapture`

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bsde_lab::harness::{load_config, run, Check, ExperimentConfig, Params, RunOutcome};

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{name}.toml"))
}

fn config(name: &str, out: &Path) -> ExperimentConfig {
    let text = fs::read_to_string(config_path(name)).unwrap();
    load_config(&text, None, Some(out)).unwrap()
}

struct Timed {
    outcome: RunOutcome,
    seconds: f64,
}

fn run_named(name: &str, root: &Path) -> Timed {
    let cfg = config(name, &root.join(name));
    let start = Instant::now();
    let outcome = run(&cfg).unwrap();
    Timed { outcome, seconds: start.elapsed().as_secs_f64() }
}

struct Line {
    id: &'static str,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn judge(id: &'static str, title: &'static str, checks: &[&Check], extra: Option<(bool, String)>) -> Line {
    let failed: Vec<String> = checks.iter().filter(|c| !c.pass).map(|c| format!("{} [{}]", c.name, c.detail)).collect();
    let mut pass = !checks.is_empty() && failed.is_empty();
    let mut detail = if failed.is_empty() {
        format!("{} of {} checks pass", checks.len(), checks.len())
    } else {
        format!("failed: {}", failed.join("; "))
    };
    if let Some((ok, what)) = extra {
        pass &= ok;
        detail = format!("{detail}; {what}");
    }
    Line { id, title, pass, detail }
}

fn runtime(seconds: f64, budget: f64) -> Option<(bool, String)> {
    Some((seconds <= budget, format!("{seconds:.1} s of {budget:.0} s")))
}

fn all(o: &RunOutcome) -> Vec<&Check> {
    o.checks.iter().collect()
}

fn matching(o: &RunOutcome, pred: impl Fn(&str) -> bool) -> Vec<&Check> {
    o.checks.iter().filter(|c| pred(&c.name)).collect()
}

/// Small configs of every experiment, run twice; CSV bytes must agree.
fn reproducibility(root: &Path) -> Line {
    let names = [
        "lipschitz-convergence",
        "bounds-audit",
        "delta-hedge",
        "blowup-sweep",
        "utility-suite",
        "comparison-suite",
    ];
    let mut mismatches = Vec::new();
    let mut files = 0;
    for name in names {
        let mut outputs = Vec::new();
        for rep in ["a", "b"] {
            let dir = root.join("repro").join(name).join(rep);
            let mut cfg = config(name, &dir);
            reduce(&mut cfg);
            run(&cfg).unwrap();
            let mut csv: Vec<(String, Vec<u8>)> = fs::read_dir(&dir)
                .unwrap()
                .map(|e| e.unwrap().path())
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
                .collect();
            csv.sort();
            outputs.push(csv);
        }
        files += outputs[0].len();
        if outputs[0].is_empty() || outputs[0] != outputs[1] {
            mismatches.push(name);
        }
    }
    Line {
        id: "AC8",
        title: "byte-identical CSVs on re-run",
        pass: mismatches.is_empty(),
        detail: if mismatches.is_empty() {
            format!("{files} CSV files across 6 experiments")
        } else {
            format!("differing or missing: {}", mismatches.join(", "))
        },
    }
}

fn reduce(cfg: &mut ExperimentConfig) {
    cfg.grid.steps = 16;
    cfg.grid.paths = 1000;
    match &mut cfg.params {
        Params::Hedge(p) => {
            p.instants = 4;
            p.consistency_paths = 500;
        }
        Params::Blowup(p) => {
            p.refine = false;
            cfg.grid.paths = 300;
        }
        Params::Utility(p) => {
            cfg.grid.steps = 8;
            p.pointwise_samples = 50;
            p.pointwise_competitors = 50;
        }
        _ => {}
    }
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut lines = Vec::new();

    let conv = run_named("lipschitz-convergence", root);
    let per_example = conv.seconds / 3.0;
    lines.push(judge(
        "AC1",
        "closed-form BSDE suite",
        &all(&conv.outcome),
        Some((per_example <= 60.0, format!("{per_example:.1} s per example of 60 s"))),
    ));

    let bounds = run_named("bounds-audit", root);
    lines.push(judge("AC2", "a-priori bound audit", &all(&bounds.outcome), None));

    let cmp = run_named("comparison-suite", root);
    lines.push(judge("AC3", "comparison theorem", &all(&cmp.outcome), None));

    let hedge = run_named("delta-hedge", root);
    lines.push(judge(
        "AC4",
        "delta hedging",
        &matching(&hedge.outcome, |n| n.starts_with("hedge") || n.starts_with("quotients")),
        None,
    ));
    lines.push(judge(
        "AC5",
        "differentiated BSDE consistency",
        &matching(&hedge.outcome, |n| n.starts_with("differentiated")),
        None,
    ));

    let blow = run_named("blowup-sweep", root);
    lines.push(judge("AC6", "blow-up lab", &all(&blow.outcome), runtime(blow.seconds, 300.0)));

    let util = run_named("utility-suite", root);
    let cases = util.outcome.checks.iter().filter(|c| c.name.contains("G(k(z), z)")).count().max(1);
    let per_case = util.seconds / cases as f64;
    lines.push(judge(
        "AC7",
        "utility maximization",
        &all(&util.outcome),
        Some((per_case <= 180.0, format!("{per_case:.1} s per example of 180 s"))),
    ));

    lines.push(reproducibility(root));

    println!();
    for l in &lines {
        println!("{} {} {}: {}", l.id, if l.pass { "PASS" } else { "FAIL" }, l.title, l.detail);
    }
    let failed: Vec<&str> = lines.iter().filter(|l| !l.pass).map(|l| l.id).collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
