use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use bsde_lab::blowup::certificate_interval;
use bsde_lab::bsde::{y_bound, z_bound, ZBoundKind};
use bsde_lab::harness::{self, HarnessError};

#[derive(Parser)]
#[command(name = "bsde-lab", version, about = "Numerical experiments for BSDEs driven by continuous martingales")]
struct Cli {
    /// Worker threads for the rayon pool. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Overrides `seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// List registered experiments.
    List,
    /// Evaluate an a-priori bound and print it as JSON.
    #[command(subcommand)]
    Bound(Bound),
}

#[derive(Subcommand)]
enum Bound {
    /// sup |Y| bound.
    Y {
        #[arg(long)]
        c_xi: f64,
        #[arg(long, default_value_t = 0.0)]
        c_f: f64,
        #[arg(long)]
        k: f64,
        #[arg(long, default_value_t = 0.0)]
        c_y: f64,
        #[arg(long, default_value_t = 0.0)]
        c_z: f64,
    },
    /// sup |Z| bound, any dimension.
    Z {
        #[arg(long)]
        d_xi: f64,
        #[arg(long, default_value_t = 0.0)]
        d_f: f64,
        #[arg(long)]
        k: f64,
        #[arg(long, default_value_t = 0.0)]
        c_y: f64,
        #[arg(long, default_value_t = 0.0)]
        c_z: f64,
    },
    /// sup |Z| bound for d = 1 and drivers free of z.
    ZOneDim {
        #[arg(long)]
        d_xi: f64,
        #[arg(long, default_value_t = 0.0)]
        d_f: f64,
        #[arg(long)]
        k: f64,
        #[arg(long, default_value_t = 0.0)]
        c_y: f64,
        #[arg(long)]
        n: usize,
    },
    /// Admissible radii of the harmonic-map counterexample on a window δ.
    Certificate {
        #[arg(long)]
        d_xi: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value_t = 10.0)]
        r_max: f64,
        #[arg(long, default_value_t = 10_000)]
        resolution: usize,
    },
}

fn bound_json(b: Bound) -> serde_json::Value {
    match b {
        Bound::Y { c_xi, c_f, k, c_y, c_z } => json!({
            "bound": "y", "c_xi": c_xi, "c_f": c_f, "k": k, "c_y": c_y, "c_z": c_z,
            "value": y_bound(c_xi, c_f, k, c_y, c_z),
        }),
        Bound::Z { d_xi, d_f, k, c_y, c_z } => json!({
            "bound": "z", "d_xi": d_xi, "d_f": d_f, "k": k, "c_y": c_y, "c_z": c_z,
            "value": z_bound(ZBoundKind::Multi { d_xi, d_f, k, c_y, c_z }),
        }),
        Bound::ZOneDim { d_xi, d_f, k, c_y, n } => json!({
            "bound": "z-one-dim", "d_xi": d_xi, "d_f": d_f, "k": k, "c_y": c_y, "n": n,
            "value": z_bound(ZBoundKind::OneDim { d_xi, d_f, k, c_y, n }),
        }),
        Bound::Certificate { d_xi, delta, r_max, resolution } => {
            let iv = certificate_interval(d_xi, delta, r_max, resolution);
            json!({
                "bound": "certificate", "d_xi": d_xi, "delta": delta, "k": 4.0 * delta,
                "r_min": iv.map(|v| v.0), "r_max": iv.map(|v| v.1),
            })
        }
    }
}

fn run(config: PathBuf, output_dir: Option<PathBuf>, seed: Option<u64>) -> Result<i32, HarnessError> {
    let text = std::fs::read_to_string(&config)
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", config.display())))?;
    let cfg = harness::load_config(&text, seed, output_dir.as_deref())?;
    let outcome = harness::run(&cfg)?;
    for c in &outcome.checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if let Some(e) = &outcome.error {
        println!("ERROR {e}");
    }
    println!(
        "{} {} -> {}",
        if outcome.pass() { "PASS" } else { "FAIL" },
        outcome.experiment,
        outcome.output_dir.display()
    );
    Ok(outcome.exit_code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: --threads ignored: {e}");
        }
    }
    let code = match cli.command {
        Command::List => {
            for e in harness::list_experiments() {
                println!("{:<22} {:<28} {}", e.name, e.anchor, e.description);
            }
            0
        }
        Command::Bound(b) => {
            println!("{}", bound_json(b));
            0
        }
        Command::Run { config, output_dir, seed } => match run(config, output_dir, seed) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("{e}");
                e.exit_code()
            }
        },
    };
    ExitCode::from(code as u8)
}
