//! Named experiments driven by TOML configuration files.
//!
//! A config names one registered experiment, a seed, and optional `[model]`,
//! `[grid]` and `[params]` tables. Running it writes CSV data and a JSON
//! summary into the output directory, then `manifest.json` with a SHA-256 of
//! every artifact. A failing check also writes `failure.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::blowup::{self, CounterexampleConfig, RadialGrid, VerifyOptions};
use crate::bsde::catalog::{self, CatalogEntry};
use crate::bsde::stability::{driver_gap_norm_sq, terminal_gap_norm_sq};
use crate::bsde::{
    check_comparison, solve, stability_gap, y_bound, z_bound, Driver, FnDriver, RegressionBasis, SolveOptions,
    TerminalFunctional, ZBoundKind,
};
use crate::error::LabError;
use crate::martingale::{simulate, MartingaleEnsemble, MartingaleModel, PathPoint, TimeGrid};
use crate::path_derivative::{self as pd, BumpSpec, Problem};
use crate::utility::{
    check_pointwise_optimality, verify_martingale_method, ConstraintSet, MarketModel, OptimalControl, PenaltySpec,
    Utility, UtilitySpec, VerifyUtilityOptions,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ExperimentInfo {
    pub name: &'static str,
    pub description: &'static str,
    pub anchor: &'static str,
}

const REGISTRY: [ExperimentInfo; 6] = [
    ExperimentInfo {
        name: "lipschitz-convergence",
        description: "closed-form Lipschitz BSDEs: node-max Y and Z errors as N doubles",
        anchor: "Thm 3.4",
    },
    ExperimentInfo {
        name: "bounds-audit",
        description: "a-priori |Y| and |Z| bounds against ensemble maxima",
        anchor: "Prop 3.3 / Thm 5.1 / Thm 5.4",
    },
    ExperimentInfo {
        name: "delta-hedge",
        description: "bump quotients of Y against Z, and the differentiated BSDE",
        anchor: "Cor 4.5",
    },
    ExperimentInfo {
        name: "blowup-sweep",
        description: "harmonic-map counterexample: certified, intermediate and blow-up windows",
        anchor: "§5.3 / Prop 5.3",
    },
    ExperimentInfo {
        name: "utility-suite",
        description: "martingale optimality principle for power and exponential investors",
        anchor: "Thm 6.1 / Thm 6.2 / §7",
    },
    ExperimentInfo {
        name: "comparison-suite",
        description: "comparison theorem, constant-driver gap and stability estimate",
        anchor: "Thm 3.5",
    },
];

/// Registered experiments, in a fixed order.
pub fn list_experiments() -> &'static [ExperimentInfo] {
    &REGISTRY
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Lab(#[from] LabError),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) => 2,
            Self::Lab(_) => 1,
        }
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        Self::Lab(LabError::Io(e))
    }
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridOverride {
    pub horizon: Option<f64>,
    pub steps: Option<usize>,
    pub paths: Option<usize>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    experiment: String,
    seed: u64,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    #[serde(default)]
    model: Option<MartingaleModel>,
    #[serde(default)]
    grid: GridOverride,
    #[serde(default)]
    params: Option<toml::Table>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GridSpec {
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
}

impl GridSpec {
    fn time_grid(&self) -> Result<TimeGrid, LabError> {
        TimeGrid::uniform(self.horizon, self.steps)
    }
}

/// A validated configuration with every default filled in.
#[derive(Clone, Debug, Serialize)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: MartingaleModel,
    pub grid: GridSpec,
    pub params: Params,
}

#[derive(Clone, Debug, Serialize)]
#[serde(untagged)]
pub enum Params {
    Convergence(ConvergenceParams),
    Bounds(BoundsParams),
    Hedge(HedgeParams),
    Blowup(BlowupParams),
    Utility(UtilityParams),
    Comparison(ComparisonParams),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceParams {
    pub examples: Vec<String>,
    pub y_tolerance: f64,
    pub z_tolerance: f64,
    /// Errors at or below this count as converged when comparing `N/2` and `N`.
    pub floor: f64,
    pub basis: RegressionBasis,
    pub solve: SolveOptions,
}

impl Default for ConvergenceParams {
    fn default() -> Self {
        Self {
            examples: vec!["linear-terminal".into(), "exponential-growth".into(), "constant-driver".into()],
            y_tolerance: 0.01,
            z_tolerance: 0.05,
            floor: 1e-8,
            basis: RegressionBasis::default(),
            solve: SolveOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsParams {
    pub y_slack: f64,
    pub z_slack: f64,
    pub basis: RegressionBasis,
    pub solve: SolveOptions,
}

impl Default for BoundsParams {
    fn default() -> Self {
        Self {
            y_slack: 1.05,
            z_slack: 1.10,
            basis: RegressionBasis::default(),
            solve: SolveOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HedgeParams {
    pub instants: usize,
    /// Hedge bump; `10⁻² √K` when absent. Much smaller bumps leave only the
    /// regression floor, which does not move when `h` halves.
    pub h: Option<f64>,
    pub csv_paths: usize,
    pub basis: RegressionBasis,
    pub solve: SolveOptions,
    /// Paths for the differentiated-BSDE comparison.
    pub consistency_paths: usize,
    /// Bump for that comparison; `10⁻⁴ √K` when absent.
    pub consistency_h: Option<f64>,
    pub consistency_fd: f64,
    pub agreement: f64,
}

impl Default for HedgeParams {
    fn default() -> Self {
        Self {
            instants: 8,
            h: None,
            csv_paths: 20,
            basis: RegressionBasis::polynomial(5),
            solve: SolveOptions::default(),
            consistency_paths: 20_000,
            consistency_h: None,
            consistency_fd: 1e-6,
            agreement: 0.9,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlowupParams {
    pub epsilon: f64,
    pub lambda: Option<f64>,
    pub cells: usize,
    pub cfl: f64,
    pub t_max: f64,
    pub threshold: f64,
    /// Compare the blow-up time with a `(dr/2, dt/4)` run.
    pub refine: bool,
    pub refine_tolerance: f64,
    pub stationary_cells: usize,
    pub stationary_time: f64,
    pub stationary_tolerance: f64,
    /// Windows `δ`; absent means `[10⁻⁶, 10⁻⁵, T₀/2, T₀, 16T₀/15]`.
    pub deltas: Option<Vec<f64>>,
    pub verify: VerifyOptions,
}

impl Default for BlowupParams {
    fn default() -> Self {
        Self {
            epsilon: 0.5,
            lambda: None,
            cells: 500,
            cfl: blowup::DEFAULT_CFL,
            t_max: 0.5,
            threshold: blowup::DEFAULT_THRESHOLD,
            refine: true,
            refine_tolerance: 0.2,
            stationary_cells: 100,
            stationary_time: 1.0,
            stationary_tolerance: 1e-3,
            deltas: None,
            verify: VerifyOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilityCase {
    pub name: String,
    pub utility: Utility,
    pub penalty: PenaltySpec,
    pub theta: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UtilityParams {
    pub cases: Vec<UtilityCase>,
    /// Initial wealth.
    pub x: f64,
    /// `ξ = a · γ_T`.
    pub terminal: Vec<f64>,
    pub pointwise_samples: usize,
    pub pointwise_competitors: usize,
    pub z_radius: f64,
    pub scales: Vec<f64>,
    pub shifts: Vec<f64>,
    pub random_controls: usize,
    pub basis: RegressionBasis,
    pub solve: SolveOptions,
}

fn default_utility_cases() -> Vec<UtilityCase> {
    let theta = vec![0.2, 0.1];
    let zero = vec![0.0, 0.0];
    let costs = vec![0.05, 0.3];
    let w = vec![0.4, 0.6, 0.5, 0.5];
    vec![
        UtilityCase {
            name: "power-constraint".into(),
            utility: Utility::Power { kappa: 0.5 },
            penalty: PenaltySpec::ClosedSet { set: ConstraintSet::Box { lo: vec![-0.5, -0.5], hi: vec![1.0, 1.0] } },
            theta: theta.clone(),
        },
        UtilityCase {
            name: "power-diversification".into(),
            utility: Utility::Power { kappa: 0.5 },
            penalty: PenaltySpec::Diversification { w: w.clone(), beta: 2.0 },
            theta: theta.clone(),
        },
        UtilityCase {
            name: "power-risk-neutral-diversification".into(),
            utility: Utility::Power { kappa: 1.0 },
            penalty: PenaltySpec::Diversification { w: vec![0.3, 0.1, -0.2, 0.4], beta: 1.5 },
            theta: theta.clone(),
        },
        UtilityCase {
            name: "power-information-cost".into(),
            utility: Utility::Power { kappa: 0.5 },
            penalty: PenaltySpec::InfoCost { costs: costs.clone() },
            theta: zero.clone(),
        },
        UtilityCase {
            name: "exponential-constraint".into(),
            utility: Utility::Exponential { kappa: 1.5 },
            penalty: PenaltySpec::ClosedSet { set: ConstraintSet::Cone },
            theta: theta.clone(),
        },
        UtilityCase {
            name: "exponential-diversification".into(),
            utility: Utility::Exponential { kappa: 1.0 },
            penalty: PenaltySpec::Diversification { w, beta: 2.0 },
            theta,
        },
        UtilityCase {
            name: "exponential-information-cost".into(),
            utility: Utility::Exponential { kappa: 2.0 },
            penalty: PenaltySpec::InfoCost { costs },
            theta: zero,
        },
    ]
}

impl Default for UtilityParams {
    fn default() -> Self {
        let v = VerifyUtilityOptions::default();
        Self {
            cases: default_utility_cases(),
            x: 1.0,
            terminal: vec![1.2, 0.4],
            pointwise_samples: 1000,
            pointwise_competitors: 1000,
            z_radius: 2.0,
            scales: v.scales,
            shifts: v.shifts,
            random_controls: v.random_controls,
            basis: v.basis,
            solve: v.solve,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComparisonParams {
    pub xi_shift: f64,
    pub beta: f64,
    pub beta_bar: f64,
    /// `Y > Ȳ + tolerance` counts as a violation.
    pub tolerance: f64,
    pub gap_rtol: f64,
    pub basis: RegressionBasis,
    pub solve: SolveOptions,
}

impl Default for ComparisonParams {
    fn default() -> Self {
        Self {
            xi_shift: 1.0,
            beta: 0.0,
            beta_bar: 0.25,
            tolerance: 1e-9,
            gap_rtol: 1e-6,
            basis: RegressionBasis::default(),
            solve: SolveOptions::default(),
        }
    }
}

/// Default `(model, grid)` of each experiment.
fn defaults(name: &str) -> (MartingaleModel, GridSpec) {
    let bm = |dim| MartingaleModel::StandardBm { dim };
    match name {
        "lipschitz-convergence" => (bm(1), GridSpec { horizon: 1.0, steps: 64, paths: 100_000 }),
        "bounds-audit" => (
            MartingaleModel::StoppedScaledBm { horizon: 1.0, delta: 1.0 },
            GridSpec { horizon: 1.0, steps: 64, paths: 10_000 },
        ),
        "delta-hedge" => (bm(1), GridSpec { horizon: 1.0, steps: 64, paths: 100_000 }),
        "blowup-sweep" => (
            MartingaleModel::StoppedScaledBm { horizon: 1.0, delta: 1.0 },
            GridSpec { horizon: 1.0, steps: 64, paths: 10_000 },
        ),
        "utility-suite" => (bm(2), GridSpec { horizon: 1.0, steps: 16, paths: 100_000 }),
        _ => (bm(1), GridSpec { horizon: 1.0, steps: 32, paths: 10_000 }),
    }
}

fn parse_params<T: serde::de::DeserializeOwned>(table: Option<toml::Table>) -> Result<T, HarnessError> {
    let value = toml::Value::Table(table.unwrap_or_default());
    serde_path_to_error::deserialize(value)
        .map_err(|e| {
            let msg = e.inner().to_string();
            HarnessError::Config(format!("at `params.{}`: {}", e.path(), msg.lines().next().unwrap_or_default()))
        })
}

/// Parses and validates a config. `seed` and `output_dir` override the file.
pub fn load_config(text: &str, seed: Option<u64>, output_dir: Option<&Path>) -> Result<ExperimentConfig, HarnessError> {
    let de = toml::Deserializer::parse(text).map_err(|e| HarnessError::Config(e.to_string()))?;
    let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            HarnessError::Config(e.inner().to_string())
        } else {
            HarnessError::Config(format!("at `{path}`: {}", e.inner()))
        }
    })?;
    if !REGISTRY.iter().any(|e| e.name == raw.experiment) {
        let names: Vec<&str> = REGISTRY.iter().map(|e| e.name).collect();
        return Err(HarnessError::Usage(format!(
            "unknown experiment `{}`; registered: {}",
            raw.experiment,
            names.join(", ")
        )));
    }
    let (model, base) = defaults(&raw.experiment);
    let model = raw.model.unwrap_or(model);
    let grid = GridSpec {
        horizon: raw.grid.horizon.unwrap_or(base.horizon),
        steps: raw.grid.steps.unwrap_or(base.steps),
        paths: raw.grid.paths.unwrap_or(base.paths),
    };
    if grid.steps < 2 {
        return Err(HarnessError::Config(format!("at `grid.steps`: N must be at least 2, got {}", grid.steps)));
    }
    if grid.paths < 1 {
        return Err(HarnessError::Config("at `grid.paths`: P must be at least 1".into()));
    }
    if !(grid.horizon > 0.0) || !grid.horizon.is_finite() {
        return Err(HarnessError::Config(format!("at `grid.horizon`: must be positive, got {}", grid.horizon)));
    }
    let tg = grid.time_grid().map_err(|e| HarnessError::Config(format!("at `grid`: {e}")))?;
    model.validate(&tg).map_err(|e| HarnessError::Config(format!("at `model`: {e}")))?;
    let params = match raw.experiment.as_str() {
        "lipschitz-convergence" => {
            if !grid.steps.is_multiple_of(4) || grid.steps < 8 {
                return Err(HarnessError::Config(format!(
                    "at `grid.steps`: convergence runs N/4, N/2 and N, so N must be a multiple of 4 and at least 8, got {}",
                    grid.steps
                )));
            }
            Params::Convergence(parse_params(raw.params)?)
        }
        "bounds-audit" => Params::Bounds(parse_params(raw.params)?),
        "delta-hedge" => {
            let p: HedgeParams = parse_params(raw.params)?;
            if p.instants == 0 || p.instants > grid.steps {
                return Err(HarnessError::Config(format!(
                    "at `params.instants`: need 1..={} instants, got {}",
                    grid.steps, p.instants
                )));
            }
            Params::Hedge(p)
        }
        "blowup-sweep" => Params::Blowup(parse_params(raw.params)?),
        "utility-suite" => {
            let p: UtilityParams = parse_params(raw.params)?;
            if p.terminal.len() != model.dim() {
                return Err(HarnessError::Config(format!(
                    "at `params.terminal`: expected {} entries, got {}",
                    model.dim(),
                    p.terminal.len()
                )));
            }
            Params::Utility(p)
        }
        _ => Params::Comparison(parse_params(raw.params)?),
    };
    let seed = seed.unwrap_or(raw.seed);
    let output_dir = match output_dir {
        Some(d) => d.to_path_buf(),
        None => raw.output_dir.unwrap_or_else(|| PathBuf::from("out").join(&raw.experiment)),
    };
    Ok(ExperimentConfig { experiment: raw.experiment, seed, output_dir, model, grid, params })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Collects checks and writes artifacts into one directory.
struct Run {
    dir: PathBuf,
    files: Vec<String>,
    checks: Vec<Check>,
}

impl Run {
    fn check(&mut self, name: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.checks.push(Check { name: name.into(), pass, detail: detail.into() });
    }

    fn csv(&mut self, name: &str, body: impl FnOnce(&mut Vec<u8>) -> crate::Result<()>) -> crate::Result<()> {
        let mut buf = Vec::new();
        body(&mut buf)?;
        fs::write(self.dir.join(name), &buf)?;
        self.files.push(name.into());
        Ok(())
    }

    fn json(&mut self, name: &str, value: &serde_json::Value) -> crate::Result<()> {
        let mut text = serde_json::to_string_pretty(value).expect("serializable");
        text.push('\n');
        fs::write(self.dir.join(name), text)?;
        self.files.push(name.into());
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunOutcome {
    pub experiment: String,
    pub output_dir: PathBuf,
    pub checks: Vec<Check>,
    /// Artifacts in write order, manifest excluded.
    pub files: Vec<String>,
    pub error: Option<String>,
}

impl RunOutcome {
    pub fn pass(&self) -> bool {
        self.error.is_none() && self.checks.iter().all(|c| c.pass)
    }

    pub fn exit_code(&self) -> i32 {
        if self.pass() {
            0
        } else {
            1
        }
    }
}

/// Runs one experiment. Artifacts are written even when checks fail; a
/// library error mid-run is recorded in `failure.json`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome, HarnessError> {
    let started = Instant::now();
    fs::create_dir_all(&cfg.output_dir)?;
    let mut r = Run { dir: cfg.output_dir.clone(), files: Vec::new(), checks: Vec::new() };
    let result = match &cfg.params {
        Params::Convergence(p) => run_convergence(cfg, p, &mut r),
        Params::Bounds(p) => run_bounds(cfg, p, &mut r),
        Params::Hedge(p) => run_hedge(cfg, p, &mut r),
        Params::Blowup(p) => run_blowup(cfg, p, &mut r),
        Params::Utility(p) => run_utility(cfg, p, &mut r),
        Params::Comparison(p) => run_comparison(cfg, p, &mut r),
    };
    let error = result.err().map(|e| e.to_string());
    let failed: Vec<Check> = r.checks.iter().filter(|c| !c.pass).cloned().collect();
    let pass = error.is_none() && failed.is_empty();
    r.json(
        "summary.json",
        &json!({
            "experiment": cfg.experiment,
            "seed": cfg.seed,
            "pass": pass,
            "checks": r.checks,
        }),
    )?;
    if !pass {
        r.json(
            "failure.json",
            &json!({
                "experiment": cfg.experiment,
                "error": error,
                "failed_checks": failed,
            }),
        )?;
    }
    write_manifest(cfg, &r.dir, &r.files, started.elapsed().as_secs_f64())?;
    Ok(RunOutcome {
        experiment: cfg.experiment.clone(),
        output_dir: cfg.output_dir.clone(),
        checks: r.checks,
        files: r.files,
        error,
    })
}

fn write_manifest(cfg: &ExperimentConfig, dir: &Path, files: &[String], wall: f64) -> std::io::Result<()> {
    let mut outputs = BTreeMap::new();
    for f in files {
        let bytes = fs::read(dir.join(f))?;
        let digest = Sha256::digest(&bytes);
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        outputs.insert(f.clone(), json!({ "sha256": hex, "bytes": bytes.len() }));
    }
    let unix = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let manifest = json!({
        "config": cfg,
        "versions": { "bsde-lab": env!("CARGO_PKG_VERSION") },
        "threads": rayon::current_num_threads(),
        "finished_unix": unix,
        "wall_time_seconds": wall,
        "outputs": outputs,
    });
    let mut text = serde_json::to_string_pretty(&manifest).expect("serializable");
    text.push('\n');
    fs::write(dir.join("manifest.json"), text)
}

fn ensemble(cfg: &ExperimentConfig, steps: usize, paths: usize, seed: u64) -> crate::Result<MartingaleEnsemble> {
    simulate(&cfg.model, &TimeGrid::uniform(cfg.grid.horizon, steps)?, paths, seed)
}

fn catalog_entry(name: &str, n: usize, k: f64) -> crate::Result<CatalogEntry> {
    catalog::builtin_lipschitz(n, k)
        .into_iter()
        .find(|e| e.name == name)
        .ok_or_else(|| LabError::Config(format!("unknown catalog example `{name}`")))
}

fn rms(v: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0, 0usize);
    for x in v {
        s += x;
        c += 1;
    }
    (s / c.max(1) as f64).sqrt()
}

fn run_convergence(cfg: &ExperimentConfig, p: &ConvergenceParams, r: &mut Run) -> crate::Result<()> {
    let n_full = cfg.grid.steps;
    let levels = [n_full / 4, n_full / 2, n_full];
    let mut rows = Vec::new();
    for name in &p.examples {
        let mut errs = Vec::new();
        for &steps in &levels {
            let ens = ensemble(cfg, steps, cfg.grid.paths, cfg.seed)?;
            let e = catalog_entry(name, ens.dim(), ens.clock_bound())?;
            let (ey, ez) = match (&e.exact_y, &e.exact_z) {
                (Some(a), Some(b)) => (a.clone(), b.clone()),
                _ => return Err(LabError::Config(format!("`{name}` has no closed form"))),
            };
            let sol = solve(&ens, &e.xi, &e.driver, &p.basis, &p.solve)?;
            let paths = ens.paths();
            let mut y_err = 0.0f64;
            let mut y_scale = 1.0f64;
            for node in 0..ens.nodes() {
                y_err = y_err.max(rms((0..paths).map(|q| (sol.y(q, node)[0] - ey(&ens, q, node)).powi(2))));
                y_scale = y_scale.max(rms((0..paths).map(|q| ey(&ens, q, node).powi(2))));
            }
            let mut z_err = 0.0f64;
            let mut z_scale = 1.0f64;
            for step in 0..ens.steps() {
                z_err = z_err.max(rms((0..paths).map(|q| {
                    let ex = ez(&ens, q, step);
                    sol.z(q, step).iter().zip(&ex).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                })));
                z_scale = z_scale.max(rms((0..paths).map(|q| ez(&ens, q, step).iter().map(|v| v * v).sum())));
            }
            let y0_exact = (0..paths).map(|q| ey(&ens, q, 0)).sum::<f64>() / paths as f64;
            let (yr, zr) = (y_err / y_scale, z_err / z_scale);
            rows.push((name.clone(), steps, paths, yr, zr, sol.y0_mean()[0], y0_exact));
            errs.push((yr, zr));
        }
        let fine = errs[levels.len() - 1];
        r.check(
            format!("{name}: Y error at N={n_full}"),
            fine.0 <= p.y_tolerance,
            format!("{:.3e} ≤ {}", fine.0, p.y_tolerance),
        );
        r.check(
            format!("{name}: Z error at N={n_full}"),
            fine.1 <= p.z_tolerance,
            format!("{:.3e} ≤ {}", fine.1, p.z_tolerance),
        );
        let shrinks = |c: f64, f: f64| f <= c || f <= p.floor;
        let ok = errs.windows(2).all(|w| shrinks(w[0].0, w[1].0) && shrinks(w[0].1, w[1].1));
        let fmt = |sel: fn(&(f64, f64)) -> f64| errs.iter().map(|e| format!("{:.3e}", sel(e))).collect::<Vec<_>>().join(" → ");
        r.check(
            format!("{name}: errors shrink over N = {levels:?}"),
            ok,
            format!("Y {}, Z {}", fmt(|e| e.0), fmt(|e| e.1)),
        );
    }
    r.csv("convergence.csv", |w| {
        writeln!(w, "example,steps,paths,y_error,z_error,y0,y0_exact")?;
        for (n, s, pth, y, z, y0, ex) in &rows {
            writeln!(w, "{n},{s},{pth},{y},{z},{y0},{ex}")?;
        }
        Ok(())
    })
}

fn lipschitz_constants(f: &dyn Driver) -> crate::Result<(f64, f64)> {
    f.regularity()
        .lipschitz_constants()
        .ok_or_else(|| LabError::Config("bounds audit needs Lipschitz drivers".into()))
}

fn run_bounds(cfg: &ExperimentConfig, p: &BoundsParams, r: &mut Run) -> crate::Result<()> {
    let mut rows = Vec::new();
    let ens = ensemble(cfg, cfg.grid.steps, cfg.grid.paths, cfg.seed)?;
    audit_model(&ens, p, r, &mut rows)?;
    // Degenerate closed forms, compared exactly.
    let (d_xi, d_f, c_y, c_z, c_xi, c_f) = (0.7f64, 0.4f64, 0.8f64, 0.6f64, 1.3f64, 0.5f64);
    let nn = 3usize;
    let k0 = z_bound(ZBoundKind::Multi { d_xi, d_f, k: 0.0, c_y, c_z });
    r.check("z_bound at K = 0 equals D_ξ", k0 == d_xi, format!("{k0} vs {d_xi}"));
    let y0 = y_bound(c_xi, c_f, 0.0, c_y, c_z);
    let y0_exact = (c_xi * c_xi + c_f * c_f).sqrt();
    r.check("y_bound at K = 0 equals √(C_ξ² + C_f²)", y0 == y0_exact, format!("{y0} vs {y0_exact}"));
    let kk = 2.5;
    let one = z_bound(ZBoundKind::OneDim { d_xi, d_f, k: kk, c_y: 0.0, n: nn });
    let one_exact = (nn as f64).sqrt() * (d_xi + d_f * kk);
    r.check("one-dimensional z_bound at C_y = 0 equals √n(D_ξ + D_f K)", one == one_exact, format!("{one} vs {one_exact}"));
    r.csv("bounds.csv", |w| {
        writeln!(w, "model,example,max_y,y_bound,max_z,z_bound,z_bound_one_dim")?;
        for row in &rows {
            writeln!(w, "{row}")?;
        }
        Ok(())
    })
}

/// The stopped model's clock `A_T = 4(τ − T + δ)` moves with the path through
/// the exit time. A path bump then also moves `∫ f dA`, which the `Z` bounds
/// do not account for: with `ξ ≡ c` and `f ≡ β` the bound is 0 while
/// `Y_t = c + β E[A_T − A_t | F_t]` has a nonzero `Z`.
fn random_clock(model: &MartingaleModel) -> bool {
    matches!(model, MartingaleModel::StoppedScaledBm { .. })
}

fn audit_model(ens: &MartingaleEnsemble, p: &BoundsParams, r: &mut Run, rows: &mut Vec<String>) -> crate::Result<()> {
    let (n, k) = (ens.dim(), ens.clock_bound());
    let stopped = random_clock(ens.model());
    let label = if stopped { "stopped" } else { "standard" };
    for e in catalog::builtin_lipschitz(n, k) {
        let (cy, cz) = lipschitz_constants(&e.driver)?;
        let (d_xi, d_f) = (e.xi.d_xi, e.driver.df());
        let c_f = e.driver.cf().unwrap_or(0.0);
        // |ξ(γ)| ≤ |ξ(0)| + D_ξ sup|γ|, and the stopped model never leaves the unit ball.
        let c_xi = e.xi.c_xi.or_else(|| {
            stopped.then(|| {
                let zeros = vec![0.0; ens.nodes() * n];
                let mut o = vec![0.0; e.xi.dim()];
                e.xi.eval(&PathPoint::new(0, ens.steps(), ens.grid().horizon(), n, &zeros), &mut o);
                o.iter().map(|v| v * v).sum::<f64>().sqrt() + d_xi
            })
        });
        let sol = solve(ens, &e.xi, &e.driver, &p.basis, &p.solve)?;
        let mut max_y = 0.0f64;
        let mut max_z = 0.0f64;
        for q in 0..ens.paths() {
            for node in 0..ens.nodes() {
                max_y = max_y.max(sol.y(q, node).iter().map(|v| v * v).sum::<f64>().sqrt());
                if node < ens.steps() {
                    max_z = max_z.max(sol.z(q, node).iter().map(|v| v * v).sum::<f64>().sqrt());
                }
            }
        }
        let yb = c_xi.map(|c| y_bound(c, c_f, k, cy, cz));
        let zb = z_bound(ZBoundKind::Multi { d_xi, d_f, k, c_y: cy, c_z: cz });
        // The one-dimensional bound needs a driver free of z.
        let zb1 = (e.xi.dim() == 1 && cz == 0.0).then(|| z_bound(ZBoundKind::OneDim { d_xi, d_f, k, c_y: cy, n }));
        let tag = format!("{label}/{}", e.name);
        let zero_driver = cy == 0.0 && cz == 0.0 && d_f == 0.0 && e.driver.cf() == Some(0.0);
        const ABS: f64 = 1e-8;
        match yb {
            Some(b) => r.check(
                format!("{tag}: max |Y| ≤ {}·y_bound", p.y_slack),
                max_y <= p.y_slack * b + ABS,
                format!("{max_y:.4} vs {b:.4}"),
            ),
            None => r.check(format!("{tag}: max |Y|"), true, "not applicable: terminal value is unbounded"),
        }
        if stopped && !zero_driver {
            r.check(
                format!("{tag}: max |Z|"),
                true,
                format!("not applicable: random clock under a nonzero driver; max |Z| {max_z:.4}, bound {zb:.4}"),
            );
        } else {
            r.check(
                format!("{tag}: max |Z| ≤ {}·z_bound", p.z_slack),
                max_z <= p.z_slack * zb + ABS,
                format!("{max_z:.4} vs {zb:.4}"),
            );
            if let Some(b) = zb1 {
                r.check(
                    format!("{tag}: max |Z| ≤ {}·one-dimensional z_bound", p.z_slack),
                    max_z <= p.z_slack * b + ABS,
                    format!("{max_z:.4} vs {b:.4}"),
                );
            }
        }
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "none".into());
        rows.push(format!("{label},{},{max_y},{},{max_z},{zb},{}", e.name, opt(yb), opt(zb1)));
    }
    Ok(())
}

fn run_hedge(cfg: &ExperimentConfig, p: &HedgeParams, r: &mut Run) -> crate::Result<()> {
    let ens = ensemble(cfg, cfg.grid.steps, cfg.grid.paths, cfg.seed)?;
    let k = ens.clock_bound();
    let h = p.h.unwrap_or(1e-2 * k.sqrt());
    let e = catalog::sine_terminal();
    let base = solve(&ens, &e.xi, &e.driver, &p.basis, &p.solve)?;
    let problem = Problem { xi: &e.xi, driver: &e.driver, basis: &p.basis, opts: &p.solve };
    let instants: Vec<usize> = (0..p.instants).map(|i| i * ens.steps() / p.instants).collect();
    let directions: Vec<usize> = (0..ens.dim()).collect();
    let coarse = pd::delta_hedge_check(&problem, &ens, &base, &instants, &directions, h, p.csv_paths)?;
    let fine = pd::delta_hedge_check(&problem, &ens, &base, &instants, &directions, h / 2.0, 0)?;
    for rep in [&coarse, &fine] {
        r.check(
            format!("hedge discrepancy at h = {:e}", rep.h),
            rep.max_rms <= rep.tolerance,
            format!("max RMS over instants {:.3e} ≤ {:.3e}", rep.max_rms, rep.tolerance),
        );
    }
    r.check(
        "hedge discrepancy decreases when h halves",
        fine.max_rms < coarse.max_rms,
        format!("{:.6e} → {:.6e}", coarse.max_rms, fine.max_rms),
    );
    r.check(
        "quotients before the bump instant are exactly zero",
        coarse.instants.iter().chain(&fine.instants).all(|i| i.pre_bump_zero),
        "",
    );
    r.csv("hedge.csv", |w| {
        writeln!(w, "h,u_index,direction,time,rms,max,mean_abs,near_stop_paths,pre_bump_zero")?;
        for rep in [&coarse, &fine] {
            for i in &rep.instants {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{}",
                    rep.h, i.u_index, i.direction, i.time, i.rms, i.max, i.mean_abs, i.near_stop_paths, i.pre_bump_zero
                )?;
            }
        }
        Ok(())
    })?;
    r.csv("hedge_paths.csv", |w| coarse.write_csv(w))?;

    // Differentiated BSDE against the bump quotient, for a driver depending on (γ, y, z).
    let ens = ensemble(cfg, cfg.grid.steps, p.consistency_paths, cfg.seed.wrapping_add(1))?;
    let e = catalog::smooth_coupled(k);
    let base = solve(&ens, &e.xi, &e.driver, &p.basis, &p.solve)?;
    let problem = Problem { xi: &e.xi, driver: &e.driver, basis: &p.basis, opts: &p.solve };
    let u = ens.steps() / 2;
    let h = p.consistency_h.unwrap_or_else(|| BumpSpec::default_h(k));
    let bump = BumpSpec::coordinate(u, ens.dim(), 0, h)?;
    let coeffs = pd::linearized_coeffs(&e.driver, &ens, &base, &bump, p.consistency_fd)?;
    let xi_values = pd::terminal_derivative(&e.xi, &ens, &bump)?;
    let diff = pd::solve_differentiated(&coeffs, xi_values, &ens, &p.basis, &p.solve)?;
    let q = pd::numeric_nabla(&problem, &ens, &base, &bump, false)?;
    let tol = 5e-3 + 10.0 * h;
    let frac = pd::agreement_fraction(&diff, &q, tol);
    r.check(
        "differentiated BSDE matches the bump quotient",
        frac >= p.agreement,
        format!("{:.4} of nodes within {tol:.2e} (need {})", frac, p.agreement),
    );
    r.csv("consistency.csv", |w| {
        writeln!(w, "node,mean_abs_difference,max_abs_difference")?;
        for node in u..ens.nodes() {
            let d: Vec<f64> = (0..ens.paths()).map(|p| (diff.y(p, node)[0] - q.y(p, node)[0]).abs()).collect();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let max = d.iter().cloned().fold(0.0, f64::max);
            writeln!(w, "{node},{mean},{max}")?;
        }
        Ok(())
    })
}

fn run_blowup(cfg: &ExperimentConfig, p: &BlowupParams, r: &mut Run) -> crate::Result<()> {
    // Stationary oracle: 2 atan r solves the flow with g(1) = π/2.
    let sgrid = RadialGrid::with_cfl(p.stationary_cells, p.cfl, p.stationary_time)?;
    let stat = blowup::solve_pde(&blowup::stationary_profile(&sgrid), &sgrid, f64::INFINITY)?;
    let drift = blowup::max_drift(&stat);
    r.check(
        "stationary profile 2·atan(r) is preserved",
        drift <= p.stationary_tolerance,
        format!("max drift {drift:.3e} over t ≤ {}", p.stationary_time),
    );

    let lambda = match p.lambda {
        Some(l) => l,
        None => blowup::choose_lambda(p.epsilon)?,
    };
    let profile = CounterexampleConfig::new(p.epsilon, lambda, 1.0)?;
    let grid = RadialGrid::with_cfl(p.cells, p.cfl, p.t_max)?;
    let g0 = blowup::build_g0(&profile, &grid)?;
    let pde = blowup::solve_pde(&g0, &grid, p.threshold)?;
    let t0 = pde.blow_up_time;
    r.check(
        "gradient at the origin exceeds the threshold in finite time",
        t0.is_some(),
        match t0 {
            Some(t) => format!("T₀ = {t}"),
            None => format!("no blow-up before t = {}", pde.horizon()),
        },
    );
    let mut refined_t0 = None;
    if p.refine {
        let fine_grid = grid.refined()?;
        let fine = blowup::solve_pde(&blowup::build_g0(&profile, &fine_grid)?, &fine_grid, p.threshold)?;
        refined_t0 = fine.blow_up_time;
        let stable = match (t0, refined_t0) {
            (Some(a), Some(b)) => (a - b).abs() <= p.refine_tolerance * a,
            _ => false,
        };
        r.check(
            "blow-up time stable under (dr/2, dt/4)",
            stable,
            format!("{t0:?} vs {refined_t0:?}"),
        );
    }
    r.csv("trace.csv", |w| pde.write_trace_csv(w))?;
    if let Some(t) = t0 {
        r.csv("profile.csv", |w| pde.write_snapshots_csv(&[0.0, 0.5 * t, 0.9 * t, t], w))?;
    }

    let Some(t0) = t0 else {
        return Ok(());
    };
    let deltas = p.deltas.clone().unwrap_or_else(|| vec![1e-6, 1e-5, 0.5 * t0, t0, t0 * 16.0 / 15.0]);
    let sweep = blowup::blowup_sweep(p.epsilon, lambda, &deltas, &pde, cfg.grid.paths, cfg.grid.steps, cfg.seed, &p.verify)?;
    r.check(
        "certified windows: sup |Z| ≤ 1.1·R",
        sweep.certified_ok && sweep.reports.iter().any(|x| x.certificate.is_some()),
        sweep
            .reports
            .iter()
            .filter_map(|x| x.certificate.map(|c| format!("δ={:e}: {:.3} vs R={:.3}", x.delta, x.sup_z, c.0)))
            .collect::<Vec<_>>()
            .join("; "),
    );
    r.check(
        "blow-up windows: sup |Z| > 10× every certificate",
        sweep.blow_up_ok && sweep.reports.iter().any(|x| x.regime == blowup::Regime::BlowUp),
        format!(
            "largest certificate {:?}; blow-up sup |Z| {:?}",
            sweep.largest_certificate,
            sweep.reports.iter().filter(|x| x.regime == blowup::Regime::BlowUp).map(|x| x.sup_z).collect::<Vec<_>>()
        ),
    );
    let defect = sweep.reports.iter().map(|x| x.sphere_defect).fold(0.0, f64::max);
    r.check("|Y| = 1 on every evaluated node", sweep.sphere_ok, format!("max defect {defect:.2e}"));
    r.csv("sweep.csv", |w| sweep.write_csv(w))?;
    r.csv("residuals.csv", |w| {
        writeln!(w, "delta,dt,mean_defect")?;
        for rep in &sweep.reports {
            for (dt, m) in &rep.residuals {
                writeln!(w, "{},{dt},{m}", rep.delta)?;
            }
        }
        Ok(())
    })?;
    r.json(
        "blowup.json",
        &json!({
            "epsilon": p.epsilon,
            "lambda": lambda,
            "d_xi": profile.d_xi(),
            "blow_up_time": t0,
            "refined_blow_up_time": refined_t0,
            "stationary_drift": drift,
            "sweep": sweep,
        }),
    )
}

fn run_utility(cfg: &ExperimentConfig, p: &UtilityParams, r: &mut Run) -> crate::Result<()> {
    let train = ensemble(cfg, cfg.grid.steps, cfg.grid.paths, cfg.seed)?;
    let test = ensemble(cfg, cfg.grid.steps, cfg.grid.paths, cfg.seed.wrapping_add(1))?;
    let xi = TerminalFunctional::linear(p.terminal.clone());
    let opts = VerifyUtilityOptions {
        basis: p.basis.clone(),
        solve: p.solve.clone(),
        scales: p.scales.clone(),
        shifts: p.shifts.clone(),
        random_controls: p.random_controls,
        seed: cfg.seed.wrapping_add(2),
    };
    let mut value_rows = Vec::new();
    let mut point_rows = Vec::new();
    let mut reports = Vec::new();
    for case in &p.cases {
        let market = MarketModel::new(case.theta.clone(), cfg.model.clone())?;
        let ctl = OptimalControl::new(case.penalty.clone(), UtilitySpec::new(case.utility, p.x)?, market)?;
        let pw = check_pointwise_optimality(&ctl, p.pointwise_samples, p.pointwise_competitors, p.z_radius, cfg.seed);
        r.check(
            format!("{}: G(k(z), z) ≤ G(π, z) + 1e-8", case.name),
            pw.pass,
            format!("worst gap {:.3e} over {}×{}", pw.worst_gap, pw.samples, pw.competitors),
        );
        point_rows.push(format!("{},{},{},{},{}", case.name, pw.samples, pw.competitors, pw.worst_gap, pw.pass));
        let rep = verify_martingale_method(&ctl, &xi, &train, &test, &opts)?;
        r.check(
            format!("{}: optimal value within 2 SE of the closed form", case.name),
            rep.value_ok,
            format!("{:.6} ± {:.2e} vs {:.6}", rep.optimal.value, rep.optimal.se, rep.closed_form),
        );
        r.check(
            format!("{}: perturbed controls do not beat the optimum", case.name),
            rep.dominance_ok,
            rep.perturbed.iter().filter(|c| !c.pass).map(|c| c.name.clone()).collect::<Vec<_>>().join(" "),
        );
        r.check(
            format!("{}: optimal per-step drift within 3 SE", case.name),
            rep.drift_ok,
            format!("max |z| {:.3}", rep.optimal.max_abs_drift_z),
        );
        r.check(
            format!("{}: perturbed per-step drift ≤ +3 SE", case.name),
            rep.supermartingale_ok,
            format!("max z {:.3}", rep.perturbed.iter().map(|c| c.max_drift_z).fold(f64::NEG_INFINITY, f64::max)),
        );
        for c in std::iter::once(&rep.optimal).chain(&rep.perturbed) {
            value_rows.push(format!(
                "{},{},{},{},{},{},{}",
                case.name, c.name, c.value, c.se, rep.closed_form, c.max_drift_z, c.pass
            ));
        }
        reports.push(json!({ "case": case.name, "report": rep }));
    }
    r.csv("utility.csv", |w| {
        writeln!(w, "case,control,value,se,closed_form,max_drift_z,pass")?;
        for row in &value_rows {
            writeln!(w, "{row}")?;
        }
        Ok(())
    })?;
    r.csv("pointwise.csv", |w| {
        writeln!(w, "case,samples,competitors,worst_gap,pass")?;
        for row in &point_rows {
            writeln!(w, "{row}")?;
        }
        Ok(())
    })?;
    r.json("utility.json", &serde_json::Value::Array(reports))
}

fn run_comparison(cfg: &ExperimentConfig, p: &ComparisonParams, r: &mut Run) -> crate::Result<()> {
    let ens = ensemble(cfg, cfg.grid.steps, cfg.grid.paths, cfg.seed)?;
    let k = ens.clock_bound();
    let e = catalog::smooth_coupled(k);
    let sol = solve(&ens, &e.xi, &e.driver, &p.basis, &p.solve)?;
    let mut rows = Vec::new();

    let base_xi = e.xi.clone();
    let shift = p.xi_shift;
    let xi_bar = TerminalFunctional::new(1, e.xi.d_xi, move |pt, o| {
        base_xi.eval(pt, o);
        o[0] += shift;
    });
    let sol_xi = solve(&ens, &xi_bar, &e.driver, &p.basis, &p.solve)?;
    let rep = check_comparison(&sol, &sol_xi, p.tolerance)?;
    r.check(
        "ξ̄ = ξ + c: no violating nodes",
        rep.violations == 0,
        format!("{} of {} nodes, max excess {:.3e}", rep.violations, rep.nodes, rep.max_excess),
    );
    rows.push(("terminal-shift", rep));

    let (cy, cz) = lipschitz_constants(&e.driver)?;
    let base_f = e.driver.clone();
    let gap = p.beta_bar - p.beta;
    let f_lo = {
        let b = base_f.clone();
        let beta = p.beta;
        FnDriver::new(1, e.driver.regularity(), move |pt, y, z, o| {
            b.eval(pt, y, z, o);
            o[0] += beta;
        })
    };
    let f_hi = {
        let beta_bar = p.beta_bar;
        FnDriver::new(1, e.driver.regularity(), move |pt, y, z, o| {
            base_f.eval(pt, y, z, o);
            o[0] += beta_bar;
        })
    };
    let sol_lo = solve(&ens, &e.xi, &f_lo, &p.basis, &p.solve)?;
    let sol_hi = solve(&ens, &e.xi, &f_hi, &p.basis, &p.solve)?;
    let rep = check_comparison(&sol_lo, &sol_hi, p.tolerance)?;
    r.check(
        "f̄ = f + β̄ − β: no violating nodes",
        rep.violations == 0,
        format!("{} of {} nodes, max excess {:.3e}", rep.violations, rep.nodes, rep.max_excess),
    );
    rows.push(("driver-shift", rep));

    // Constant drivers: Ȳ₀ − Y₀ = (β̄ − β) A_T.
    let lo = catalog::constant_driver(p.beta, 1.0, k);
    let hi = catalog::constant_driver(p.beta_bar, 1.0, k);
    let y_lo = solve(&ens, &lo.xi, &lo.driver, &p.basis, &p.solve)?.y0_mean()[0];
    let y_hi = solve(&ens, &hi.xi, &hi.driver, &p.basis, &p.solve)?.y0_mean()[0];
    let a_t = (0..ens.paths()).map(|q| ens.clock(q, ens.steps())).sum::<f64>() / ens.paths() as f64;
    let expected = gap * a_t;
    let measured = y_hi - y_lo;
    let rel = if expected != 0.0 { (measured - expected).abs() / expected.abs() } else { measured.abs() };
    r.check(
        "constant-driver gap equals (β̄ − β) A_T",
        rel <= p.gap_rtol,
        format!("{measured} vs {expected} (relative {rel:.2e})"),
    );

    // Stability estimate between (ξ, f) and (ξ + c, f).
    let dxi = terminal_gap_norm_sq(&sol, &sol_xi);
    let df = driver_gap_norm_sq(&ens, &sol_xi, &e.driver, &e.driver);
    let st = stability_gap(&ens, &sol, &sol_xi, dxi, df, k, cy, cz)?;
    r.check(
        "stability estimate holds",
        st.ok,
        format!("{:.4e} ≤ {:.4e}", st.measured, st.bound),
    );
    r.csv("comparison.csv", |w| {
        writeln!(w, "case,nodes,violations,max_excess,pass")?;
        for (name, rep) in &rows {
            writeln!(w, "{name},{},{},{},{}", rep.nodes, rep.violations, rep.max_excess, rep.violations == 0)?;
        }
        Ok(())
    })?;
    r.csv("gap.csv", |w| {
        writeln!(w, "beta,beta_bar,y0,y0_bar,measured_gap,expected_gap,relative_error")?;
        writeln!(w, "{},{},{y_lo},{y_hi},{measured},{expected},{rel}", p.beta, p.beta_bar)?;
        Ok(())
    })
}
