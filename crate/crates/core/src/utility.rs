//! Portfolio selection by the martingale optimality principle.
//!
//! The market has prices `dS^i/S^i = θ^i dA + dM^i`. For a penalty `p` the
//! Hamiltonian `G(π, z)` is minimized in closed form by `k(z)`, and the value
//! of the problem is read off `Y₀` of `BSDE(ξ, f)` with `f(z) = G(k(z), z)`.
//! Throughout `z` stands for the product `Z m` (a row of length `n`).

use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::bounds::{z_bound, ZBoundKind};
use crate::bsde::driver::{truncate_driver, FnDriver, Regularity, Rho, TerminalFunctional};
use crate::bsde::{solve, RegressionBasis, SolveOptions};
use crate::error::{LabError, Result};
use crate::martingale::{MartingaleEnsemble, MartingaleModel};

/// Tolerance for membership in a constraint set.
const MEMBERSHIP_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketModel {
    pub theta: Vec<f64>,
    pub model: MartingaleModel,
}

impl MarketModel {
    pub fn new(theta: Vec<f64>, model: MartingaleModel) -> Result<Self> {
        if theta.len() != model.dim() {
            return Err(LabError::UnsupportedDimension { expected: model.dim(), got: theta.len() });
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(LabError::InvalidInput("θ must be finite".into()));
        }
        if model.volatility().try_inverse().is_none() {
            return Err(LabError::Config("volatility factor m is not invertible".into()));
        }
        Ok(Self { theta, model })
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn m(&self) -> DMatrix<f64> {
        self.model.volatility()
    }

    /// `c` when `m = c I`.
    fn scalar_m(&self) -> Option<f64> {
        let m = self.m();
        let c = m[(0, 0)];
        let n = m.nrows();
        let scalar = (0..n).all(|i| (0..n).all(|j| m[(i, j)] == if i == j { c } else { 0.0 }));
        scalar.then_some(c)
    }
}

type ProjectFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// A closed set `C ⊂ R^{1×n}` of admissible positions.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ConstraintSet {
    Whole,
    /// `C = {0}`: no trading.
    Origin,
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ball { radius: f64 },
    /// No short selling, `π ≥ 0` componentwise.
    Cone,
    /// A user projector. `bound` is `sup_C |π|` when `C` is bounded.
    #[serde(skip)]
    Custom { project: Arc<ProjectFn>, bound: Option<f64> },
}

impl std::fmt::Debug for ConstraintSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Whole => write!(f, "Whole"),
            Self::Origin => write!(f, "Origin"),
            Self::Box { lo, hi } => f.debug_struct("Box").field("lo", lo).field("hi", hi).finish(),
            Self::Ball { radius } => f.debug_struct("Ball").field("radius", radius).finish(),
            Self::Cone => write!(f, "Cone"),
            Self::Custom { bound, .. } => f.debug_struct("Custom").field("bound", bound).finish(),
        }
    }
}

impl ConstraintSet {
    pub fn project(&self, v: &[f64], out: &mut [f64]) {
        match self {
            Self::Whole => out.copy_from_slice(v),
            Self::Origin => out.fill(0.0),
            Self::Box { lo, hi } => {
                for i in 0..v.len() {
                    out[i] = v[i].clamp(lo[i], hi[i]);
                }
            }
            Self::Ball { radius } => {
                // Points already on the sphere up to roundoff stay put, so Π∘Π = Π bitwise.
                if norm(v) <= radius * (1.0 + 8.0 * f64::EPSILON) {
                    out.copy_from_slice(v);
                } else {
                    crate::bsde::driver::clamp_to_ball(v, *radius, out);
                }
            }
            Self::Cone => {
                for (o, x) in out.iter_mut().zip(v) {
                    *o = x.max(0.0);
                }
            }
            Self::Custom { project, .. } => project(v, out),
        }
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        let mut p = vec![0.0; v.len()];
        self.project(v, &mut p);
        norm(&sub(&p, v)) <= MEMBERSHIP_TOL * (1.0 + norm(v))
    }

    /// `sup_C |π|`, if `C` is bounded.
    pub fn bound(&self) -> Option<f64> {
        match self {
            Self::Origin => Some(0.0),
            Self::Box { lo, hi } => Some(lo.iter().zip(hi).map(|(a, b)| a.abs().max(b.abs()).powi(2)).sum::<f64>().sqrt()),
            Self::Ball { radius } => Some(*radius),
            Self::Custom { bound, .. } => *bound,
            Self::Whole | Self::Cone => None,
        }
    }

    /// `argmin_{π ∈ C} π·c` for bounded built-in sets.
    fn linear_minimizer(&self, c: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::Origin => Ok(vec![0.0; c.len()]),
            Self::Box { lo, hi } => Ok((0..c.len())
                .map(|i| {
                    if c[i] > 0.0 {
                        lo[i]
                    } else if c[i] < 0.0 {
                        hi[i]
                    } else {
                        0.0f64.clamp(lo[i], hi[i])
                    }
                })
                .collect()),
            Self::Ball { radius } => {
                let nc = norm(c);
                Ok(if nc == 0.0 { vec![0.0; c.len()] } else { c.iter().map(|x| -radius * x / nc).collect() })
            }
            _ => Err(LabError::Unsupported("risk-neutral investor needs a bounded built-in constraint set".into())),
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        match self {
            Self::Box { lo, hi } => {
                if lo.len() != n || hi.len() != n {
                    return Err(LabError::UnsupportedDimension { expected: n, got: lo.len().min(hi.len()) });
                }
                if lo.iter().zip(hi).any(|(a, b)| !(a <= b)) {
                    return Err(LabError::Config("box constraint needs lo ≤ hi".into()));
                }
            }
            Self::Ball { radius } if !(*radius >= 0.0) => {
                return Err(LabError::Config(format!("ball radius must be ≥ 0, got {radius}")));
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PenaltySpec {
    /// `p = 0` on `C` and `∞` outside.
    ClosedSet { set: ConstraintSet },
    /// `p(π) = |π(I − w)|^β`, `w` row-major `n × n`.
    Diversification { w: Vec<f64>, beta: f64 },
    /// `p(π) = Σ C_i 1{π^i ≠ 0}`.
    InfoCost { costs: Vec<f64> },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Utility {
    /// `(1/κ)(X e^{−ξ})^κ`, `κ ∈ (−∞, 0) ∪ (0, 1]`, multiplicative wealth.
    Power { kappa: f64 },
    /// `−exp(−κ(X − ξ))`, `κ > 0`, additive wealth.
    Exponential { kappa: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilitySpec {
    pub utility: Utility,
    /// Initial wealth.
    pub x: f64,
}

impl UtilitySpec {
    pub fn new(utility: Utility, x: f64) -> Result<Self> {
        match utility {
            Utility::Power { kappa } => {
                if !(kappa <= 1.0) || kappa == 0.0 || !kappa.is_finite() {
                    return Err(LabError::Config(format!("power κ must lie in (−∞,0)∪(0,1], got {kappa}")));
                }
                if !(x > 0.0) {
                    return Err(LabError::Config(format!("power utility needs positive wealth, got {x}")));
                }
            }
            Utility::Exponential { kappa } => {
                if !(kappa > 0.0) || !kappa.is_finite() {
                    return Err(LabError::Config(format!("exponential κ must be positive, got {kappa}")));
                }
                if !x.is_finite() {
                    return Err(LabError::Config("initial wealth must be finite".into()));
                }
            }
        }
        Ok(Self { utility, x })
    }

    pub fn kappa(&self) -> f64 {
        match self.utility {
            Utility::Power { kappa } | Utility::Exponential { kappa } => kappa,
        }
    }

    /// `x^κ e^{−κY₀}/κ` or `−e^{−κ(x − Y₀)}`.
    pub fn optimal_value(&self, y0: f64) -> f64 {
        self.evaluate(self.x, y0)
    }

    /// `U = (1/κ)(X e^{−Y})^κ` or `−e^{−κ(X − Y)}`.
    pub fn evaluate(&self, wealth: f64, y: f64) -> f64 {
        match self.utility {
            Utility::Power { kappa } => (kappa * (wealth.ln() - y)).exp() / kappa,
            Utility::Exponential { kappa } => -(-kappa * (wealth - y)).exp(),
        }
    }

    pub fn dynamics(&self) -> WealthDynamics {
        match self.utility {
            Utility::Power { .. } => WealthDynamics::Multiplicative,
            Utility::Exponential { .. } => WealthDynamics::Additive,
        }
    }
}

#[derive(Clone, Debug)]
enum Rule {
    /// `π = Π_C((a·s_a + s_z z)/c)`.
    Project { set: ConstraintSet, s_a: f64, s_z: f64 },
    /// `π = argmin_C π·c(z − a)`.
    Linear { set: ConstraintSet },
    /// `π = (s_z z m* + θ*) B⁻¹ / 2`.
    Affine { s_z: f64, b_inv: DMatrix<f64> },
    /// `κ = 1`, general `β`.
    RiskNeutralDiversification { beta: f64, inv_iw_t: DMatrix<f64>, inv_iw: DMatrix<f64> },
    /// Per-asset switch at `z_j² > threshold_j` to `π_j = slope · z_j`.
    Switch { threshold: Vec<f64>, slope: f64 },
}

/// The closed-form minimizer `k(z)` of `G(·, z)` and the induced driver.
#[derive(Clone, Debug)]
pub struct OptimalControl {
    pub penalty: PenaltySpec,
    pub utility: UtilitySpec,
    pub market: MarketModel,
    m: DMatrix<f64>,
    /// `θ* (m⁻¹)*` as a row.
    a: Vec<f64>,
    iw: Option<DMatrix<f64>>,
    rule: Rule,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Row vector times matrix.
fn row_times(v: &[f64], m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.ncols()).map(|j| (0..m.nrows()).map(|k| v[k] * m[(k, j)]).sum()).collect()
}

impl OptimalControl {
    pub fn new(penalty: PenaltySpec, utility: UtilitySpec, market: MarketModel) -> Result<Self> {
        let n = market.dim();
        let m = market.m();
        let m_inv = m.clone().try_inverse().ok_or_else(|| LabError::Config("m is not invertible".into()))?;
        let a = row_times(&market.theta, &m_inv.transpose());
        let kappa = utility.kappa();
        let power = matches!(utility.utility, Utility::Power { .. });
        let mut iw = None;
        let rule = match &penalty {
            PenaltySpec::ClosedSet { set } => {
                set.validate(n)?;
                if market.scalar_m().is_none() {
                    return Err(LabError::Unsupported("constraint projection needs m = c·I".into()));
                }
                if power && kappa == 1.0 {
                    set.bound().ok_or_else(|| {
                        LabError::Unsupported("risk-neutral investor needs a bounded constraint set".into())
                    })?;
                    set.linear_minimizer(&vec![1.0; n])?;
                    Rule::Linear { set: set.clone() }
                } else if power {
                    Rule::Project { set: set.clone(), s_a: 1.0 / (1.0 - kappa), s_z: -kappa / (1.0 - kappa) }
                } else {
                    Rule::Project { set: set.clone(), s_a: 1.0 / kappa, s_z: 1.0 }
                }
            }
            PenaltySpec::Diversification { w, beta } => {
                if w.len() != n * n {
                    return Err(LabError::UnsupportedDimension { expected: n * n, got: w.len() });
                }
                if !(*beta > 1.0) {
                    return Err(LabError::Config(format!("diversification exponent must exceed 1, got {beta}")));
                }
                let i_w = DMatrix::identity(n, n) - DMatrix::from_row_slice(n, n, w);
                iw = Some(i_w.clone());
                let mm = &m * m.transpose();
                if power && kappa == 1.0 {
                    let inv_iw = i_w.clone().try_inverse().ok_or_else(|| {
                        LabError::Config("I − w must be invertible for a risk-neutral investor".into())
                    })?;
                    Rule::RiskNeutralDiversification { beta: *beta, inv_iw_t: inv_iw.transpose(), inv_iw }
                } else if *beta == 2.0 {
                    let c = if power { 0.5 * (1.0 - kappa) } else { 0.5 * kappa };
                    let b = &i_w * i_w.transpose() + mm * c;
                    let b_inv = b.try_inverse().ok_or_else(|| {
                        LabError::Config("(I−w)(I−w)* + c·mm* is singular".into())
                    })?;
                    Rule::Affine { s_z: if power { -kappa } else { kappa }, b_inv }
                } else {
                    return Err(LabError::Unsupported(format!(
                        "diversification with β = {beta} has a closed form only for a risk-neutral power investor"
                    )));
                }
            }
            PenaltySpec::InfoCost { costs } => {
                if costs.len() != n {
                    return Err(LabError::UnsupportedDimension { expected: n, got: costs.len() });
                }
                if costs.iter().any(|c| !(*c >= 0.0)) {
                    return Err(LabError::Config("information costs must be ≥ 0".into()));
                }
                if market.theta.iter().any(|t| *t != 0.0) {
                    return Err(LabError::Unsupported("information-cost example assumes θ = 0".into()));
                }
                let c = market.scalar_m();
                if c.is_none_or(|c| (c - 1.0 / (n as f64).sqrt()).abs() > 1e-15) {
                    return Err(LabError::Unsupported("information-cost example assumes m = I/√n".into()));
                }
                let sn = (n as f64).sqrt();
                if power {
                    if kappa == 1.0 {
                        return Err(LabError::Unsupported("information cost with κ = 1 has no minimizer".into()));
                    }
                    let threshold = costs.iter().map(|c| 2.0 * c * (1.0 - kappa) / (kappa * kappa)).collect();
                    Rule::Switch { threshold, slope: -kappa * sn / (1.0 - kappa) }
                } else {
                    Rule::Switch { threshold: costs.iter().map(|c| 2.0 * c / kappa).collect(), slope: sn }
                }
            }
        };
        Ok(Self { penalty, utility, market, m, a, iw, rule })
    }

    pub fn dim(&self) -> usize {
        self.market.dim()
    }

    /// `p(π)`; `∞` outside a constraint set.
    pub fn penalty_value(&self, pi: &[f64]) -> f64 {
        match &self.penalty {
            PenaltySpec::ClosedSet { set } => {
                if set.contains(pi) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            PenaltySpec::Diversification { beta, .. } => {
                norm(&row_times(pi, self.iw.as_ref().expect("I − w"))).powf(*beta)
            }
            PenaltySpec::InfoCost { costs } => {
                pi.iter().zip(costs).filter(|(p, _)| **p != 0.0).map(|(_, c)| c).sum()
            }
        }
    }

    /// `G(π, z)`.
    pub fn hamiltonian(&self, pi: &[f64], z: &[f64]) -> f64 {
        let pm = row_times(pi, &self.m);
        let diff = norm(&sub(&pm, z)).powi(2);
        let drift: f64 = pi.iter().zip(&self.market.theta).map(|(p, t)| p * t).sum();
        let p = self.penalty_value(pi);
        match self.utility.utility {
            Utility::Power { kappa } => -0.5 * kappa * diff + p - drift + 0.5 * norm(&pm).powi(2),
            Utility::Exponential { kappa } => 0.5 * kappa * diff + p - drift,
        }
    }

    /// `k(z)`.
    pub fn control(&self, z: &[f64]) -> Vec<f64> {
        let n = self.dim();
        match &self.rule {
            Rule::Project { set, s_a, s_z } => {
                let c = self.m[(0, 0)];
                let v: Vec<f64> = (0..n).map(|i| (s_a * self.a[i] + s_z * z[i]) / c).collect();
                let mut out = vec![0.0; n];
                set.project(&v, &mut out);
                out
            }
            Rule::Linear { set } => {
                let c = self.m[(0, 0)];
                let dir: Vec<f64> = (0..n).map(|i| c * (z[i] - self.a[i])).collect();
                set.linear_minimizer(&dir).expect("validated at construction")
            }
            Rule::Affine { s_z, b_inv } => {
                let zm = row_times(z, &self.m.transpose());
                let rhs: Vec<f64> = (0..n).map(|i| s_z * zm[i] + self.market.theta[i]).collect();
                row_times(&rhs, b_inv).into_iter().map(|v| 0.5 * v).collect()
            }
            Rule::RiskNeutralDiversification { beta, inv_iw_t, inv_iw } => {
                let zm = row_times(z, &self.m.transpose());
                let c: Vec<f64> = (0..n).map(|i| self.market.theta[i] - zm[i]).collect();
                let a = row_times(&c, inv_iw_t);
                let na = norm(&a);
                if na == 0.0 {
                    // The formula degenerates here; 0 is its continuous extension.
                    return vec![0.0; n];
                }
                let q_norm = (na / beta).powf(1.0 / (beta - 1.0));
                let q: Vec<f64> = a.iter().map(|v| v * q_norm / na).collect();
                row_times(&q, inv_iw)
            }
            Rule::Switch { threshold, slope } => {
                (0..n).map(|j| if z[j] * z[j] > threshold[j] { slope * z[j] } else { 0.0 }).collect()
            }
        }
    }

    /// `f(z) = G(k(z), z)`.
    pub fn driver_value(&self, z: &[f64]) -> f64 {
        let k = self.control(z);
        match &self.penalty {
            // k lies in C by construction; skip the roundoff-sensitive membership test.
            PenaltySpec::ClosedSet { .. } => {
                let pm = row_times(&k, &self.m);
                let diff = norm(&sub(&pm, z)).powi(2);
                let drift: f64 = k.iter().zip(&self.market.theta).map(|(p, t)| p * t).sum();
                match self.utility.utility {
                    Utility::Power { kappa } => -0.5 * kappa * diff - drift + 0.5 * norm(&pm).powi(2),
                    Utility::Exponential { kappa } => 0.5 * kappa * diff - drift,
                }
            }
            _ => self.hamiltonian(&k, z),
        }
    }

    /// Upper bound of `|k(z) m|` over `|z| ≤ x`.
    fn control_growth(&self, x: f64) -> f64 {
        let m_norm = self.m.norm();
        match &self.rule {
            Rule::Project { set, s_a, s_z } => {
                let c = self.m[(0, 0)];
                let mut p0 = vec![0.0; self.dim()];
                set.project(&vec![0.0; self.dim()], &mut p0);
                c * norm(&p0) + s_a.abs() * norm(&self.a) + s_z.abs() * x
            }
            Rule::Linear { set } => self.m[(0, 0)].abs() * set.bound().unwrap_or(0.0),
            Rule::Affine { s_z, b_inv } => {
                let k0 = 0.5 * norm(&row_times(&self.market.theta, b_inv));
                (k0 + 0.5 * s_z.abs() * m_norm * b_inv.norm() * x) * m_norm
            }
            Rule::RiskNeutralDiversification { beta, inv_iw_t, inv_iw } => {
                let a_max = (norm(&self.market.theta) + m_norm * x) * inv_iw_t.norm();
                (a_max / beta).powf(1.0 / (beta - 1.0)) * inv_iw.norm() * m_norm
            }
            Rule::Switch { slope, .. } => slope.abs() * self.m[(0, 0)] * x,
        }
    }

    /// Growth function of the driver: by the envelope theorem `|∂f/∂z| = |κ||k m − z|`.
    pub fn rho(&self) -> Rho {
        let me = self.clone();
        let kappa = self.utility.kappa().abs();
        Rho::new(move |x| kappa * (me.control_growth(x) + x))
    }

    /// Declared regularity of `f`.
    pub fn regularity(&self) -> Regularity {
        match (&self.rule, self.utility.utility) {
            (Rule::Switch { threshold, .. }, Utility::Exponential { kappa }) => {
                // ∂f/∂z_j = κ z_j below the switch and 0 above it.
                let cz = threshold.iter().map(|t| kappa * kappa * t).sum::<f64>().sqrt();
                Regularity::Lipschitz { cy: 0.0, cz }
            }
            _ => Regularity::LocallyLipschitzZ { cy: 0.0, rho: self.rho() },
        }
    }

    /// `f(s, z) = G(k(z), z)` as a scalar BSDE driver.
    pub fn driver(&self) -> FnDriver {
        let me = self.clone();
        FnDriver::new(1, self.regularity(), move |_, _, z, out| out[0] = me.driver_value(z))
    }

    /// A random admissible position near `centre`.
    fn random_admissible(&self, rng: &mut ChaCha8Rng, centre: &[f64], radius: f64) -> Vec<f64> {
        let n = self.dim();
        let v: Vec<f64> = (0..n).map(|i| centre[i] + radius * (2.0 * rng.gen::<f64>() - 1.0)).collect();
        match &self.penalty {
            PenaltySpec::ClosedSet { set } => {
                let mut out = vec![0.0; n];
                set.project(&v, &mut out);
                out
            }
            PenaltySpec::InfoCost { .. } => {
                // Exercise the zero branch of the indicator as well.
                v.into_iter().map(|x| if rng.gen::<f64>() < 0.25 { 0.0 } else { x }).collect()
            }
            PenaltySpec::Diversification { .. } => v,
        }
    }
}

/// `k(s, z)` for one `(penalty, utility, market)` triple.
pub fn optimal_control(penalty: &PenaltySpec, utility: &UtilitySpec, market: &MarketModel, z: &[f64]) -> Result<Vec<f64>> {
    Ok(OptimalControl::new(penalty.clone(), *utility, market.clone())?.control(z))
}

/// The driver `f(s, z) = G(s, k(s, z), z)`.
pub fn driver_from_penalty(penalty: &PenaltySpec, utility: &UtilitySpec, market: &MarketModel) -> Result<FnDriver> {
    Ok(OptimalControl::new(penalty.clone(), *utility, market.clone())?.driver())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimalityCheck {
    pub samples: usize,
    pub competitors: usize,
    /// `max (G(k(z), z) − G(π, z))` over all pairs; ≤ 0 up to roundoff.
    pub worst_gap: f64,
    pub pass: bool,
}

/// Compares `G(k(z), z)` with `G(π, z)` for random admissible `π`.
pub fn check_pointwise_optimality(ctl: &OptimalControl, samples: usize, competitors: usize, z_radius: f64, seed: u64) -> OptimalityCheck {
    let n = ctl.dim();
    let worst = (0..samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s as u64);
            let z: Vec<f64> = (0..n).map(|_| z_radius * (2.0 * rng.gen::<f64>() - 1.0)).collect();
            let k = ctl.control(&z);
            let gk = ctl.driver_value(&z);
            let spread = 2.0 * (1.0 + norm(&k));
            let zero = vec![0.0; n];
            let mut worst = f64::NEG_INFINITY;
            for j in 0..competitors {
                let centre = if j % 2 == 0 { &k } else { &zero };
                let pi = ctl.random_admissible(&mut rng, centre, spread);
                worst = worst.max(gk - ctl.hamiltonian(&pi, &z));
            }
            worst
        })
        .reduce(|| f64::NEG_INFINITY, f64::max);
    OptimalityCheck { samples, competitors, worst_gap: worst, pass: worst <= 1e-8 }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WealthDynamics {
    /// Exact exponential step of `dX = X(−p + Δθ)dA + XΔ dM`.
    Multiplicative,
    /// `X_{i+1} = X_i (1 + (−p + Δθ)ΔA + Δ·ΔM)`.
    MultiplicativeEuler,
    /// `dX = (−p + Δθ)dA + Δ dM`.
    Additive,
}

/// Positions `Δ` per path and step, `n` entries each.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlProcess {
    paths: usize,
    steps: usize,
    n: usize,
    values: Vec<f64>,
}

impl ControlProcess {
    pub fn new(paths: usize, steps: usize, n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != paths * steps * n {
            return Err(LabError::InvalidInput("control has the wrong length".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LabError::InvalidInput("control leaves the admissible set (non-finite entry)".into()));
        }
        Ok(Self { paths, steps, n, values })
    }

    pub fn from_fn(paths: usize, steps: usize, n: usize, f: impl Fn(usize, usize, &mut [f64]) + Sync) -> Result<Self> {
        let mut values = vec![0.0; paths * steps * n];
        values.par_chunks_mut(steps * n).enumerate().for_each(|(p, row)| {
            for (i, out) in row.chunks_mut(n).enumerate() {
                f(p, i, out);
            }
        });
        Self::new(paths, steps, n, values)
    }

    pub fn at(&self, p: usize, step: usize) -> &[f64] {
        let s = (p * self.steps + step) * self.n;
        &self.values[s..s + self.n]
    }

    /// Uniform bound `sup |Δ|`.
    pub fn bound(&self) -> f64 {
        self.values.chunks(self.n).map(norm).fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(usize, usize, &[f64], &mut [f64]) + Sync) -> Result<Self> {
        Self::from_fn(self.paths, self.steps, self.n, |p, i, out| f(p, i, self.at(p, i), out))
    }
}

/// Wealth on every path and node, path-major.
#[derive(Clone, Debug, PartialEq)]
pub struct WealthPaths {
    pub nodes: usize,
    pub values: Vec<f64>,
}

impl WealthPaths {
    pub fn at(&self, p: usize, node: usize) -> f64 {
        self.values[p * self.nodes + node]
    }
}

pub fn simulate_wealth(
    ctl: &OptimalControl,
    control: &ControlProcess,
    dynamics: WealthDynamics,
    ens: &MartingaleEnsemble,
    x: f64,
) -> Result<WealthPaths> {
    let n = ens.dim();
    if control.paths != ens.paths() || control.steps != ens.steps() || control.n != n {
        return Err(LabError::InvalidInput("control does not match the ensemble".into()));
    }
    if dynamics != WealthDynamics::Additive && !(x > 0.0) {
        return Err(LabError::InvalidInput(format!("multiplicative wealth needs x > 0, got {x}")));
    }
    let nodes = ens.nodes();
    let theta = &ctl.market.theta;
    let mut values = vec![0.0; ens.paths() * nodes];
    let failures: Vec<Option<LabError>> = values
        .par_chunks_mut(nodes)
        .enumerate()
        .map(|(p, w)| {
            w[0] = x;
            for i in 0..ens.steps() {
                let d = control.at(p, i);
                let pen = ctl.penalty_value(d);
                if !pen.is_finite() {
                    return Some(LabError::Domain(format!("control leaves the constraint set on path {p}, step {i}")));
                }
                let da = ens.d_clock(p, i);
                let dm = ens.increment(p, i);
                let dtheta: f64 = d.iter().zip(theta).map(|(a, b)| a * b).sum();
                let ddm: f64 = d.iter().zip(&dm).map(|(a, b)| a * b).sum();
                w[i + 1] = match dynamics {
                    WealthDynamics::Multiplicative => {
                        let dmv = row_times(d, ens.vol(i));
                        let q = norm(&dmv).powi(2);
                        w[i] * ((-pen + dtheta - 0.5 * q) * da + ddm).exp()
                    }
                    WealthDynamics::MultiplicativeEuler => w[i] * (1.0 + (-pen + dtheta) * da + ddm),
                    WealthDynamics::Additive => w[i] + dtheta * da + ddm - pen * da,
                };
                if !w[i + 1].is_finite() {
                    return Some(LabError::Divergence { step: i, detail: format!("non-finite wealth on path {p}") });
                }
            }
            None
        })
        .collect();
    if let Some(e) = failures.into_iter().flatten().next() {
        return Err(e);
    }
    Ok(WealthPaths { nodes, values })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlReport {
    pub name: String,
    pub value: f64,
    pub se: f64,
    /// Largest per-step `mean(ΔU)/SE` (signed).
    pub max_drift_z: f64,
    /// Largest per-step `|mean(ΔU)|/SE`.
    pub max_abs_drift_z: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub y0: f64,
    pub closed_form: f64,
    pub truncation_radius: f64,
    pub optimal: ControlReport,
    pub perturbed: Vec<ControlReport>,
    pub value_ok: bool,
    pub dominance_ok: bool,
    pub drift_ok: bool,
    pub supermartingale_ok: bool,
}

impl VerificationReport {
    pub fn pass(&self) -> bool {
        self.value_ok && self.dominance_ok && self.drift_ok && self.supermartingale_ok
    }

    /// `control,value,se,closed_form,max_drift_z,pass`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "control,value,se,closed_form,max_drift_z,pass")?;
        for c in std::iter::once(&self.optimal).chain(&self.perturbed) {
            writeln!(w, "{},{},{},{},{},{}", c.name, c.value, c.se, self.closed_form, c.max_drift_z, c.pass)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyUtilityOptions {
    pub basis: RegressionBasis,
    pub solve: SolveOptions,
    pub scales: Vec<f64>,
    /// Each is added to every entry of the optimal control.
    pub shifts: Vec<f64>,
    /// Number of independent bounded random competitors.
    pub random_controls: usize,
    pub seed: u64,
}

impl Default for VerifyUtilityOptions {
    fn default() -> Self {
        Self {
            basis: RegressionBasis::default(),
            solve: SolveOptions::default(),
            scales: vec![0.0, 0.5, 0.9, 1.1, 1.5],
            shifts: vec![0.3, -0.3, 0.1],
            random_controls: 2,
            seed: 0,
        }
    }
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Solves `BSDE(ξ, f)` on `train`, then on the independent `test` ensemble
/// simulates the candidate `Δ̄ = k(Z m)` and its perturbations and checks the
/// martingale optimality principle.
pub fn verify_martingale_method(
    ctl: &OptimalControl,
    xi: &TerminalFunctional,
    train: &MartingaleEnsemble,
    test: &MartingaleEnsemble,
    opts: &VerifyUtilityOptions,
) -> Result<VerificationReport> {
    let n = ctl.dim();
    if train.dim() != n || test.dim() != n {
        return Err(LabError::UnsupportedDimension { expected: n, got: train.dim() });
    }
    let radius = z_bound(ZBoundKind::OneDim { d_xi: xi.d_xi, d_f: 0.0, k: train.clock_bound(), c_y: 0.0, n });
    if !(radius >= 0.0) || !radius.is_finite() {
        return Err(LabError::Config(format!("invalid truncation radius {radius}")));
    }
    // D_ξ = 0 forces Z = 0; any positive radius then leaves the scheme unchanged.
    let radius = radius.max(f64::MIN_POSITIVE);
    let f = truncate_driver(ctl.driver(), radius);
    let fitted = solve(train, xi, &f, &opts.basis, &opts.solve)?;
    let sol = fitted.evaluate_on(test, xi, &f, &opts.basis)?;
    let y0 = sol.y0_mean()[0];
    let closed_form = ctl.utility.optimal_value(y0);

    let steps = test.steps();
    let optimal = ControlProcess::from_fn(test.paths(), steps, n, |p, i, out| {
        let mut zm = vec![0.0; n];
        crate::bsde::solver::times_m(sol.z(p, i), test.vol(i), 1, n, &mut zm);
        crate::bsde::driver::clamp_to_ball(&zm.clone(), radius, &mut zm);
        out.copy_from_slice(&ctl.control(&zm));
    })?;
    let admissible = |v: &mut [f64]| {
        if let PenaltySpec::ClosedSet { set } = &ctl.penalty {
            let c = v.to_vec();
            set.project(&c, v);
        }
    };
    let mut competitors: Vec<(String, ControlProcess)> = Vec::new();
    for &s in &opts.scales {
        competitors.push((
            format!("scale-{s}"),
            optimal.map(|_, _, d, out| {
                for (o, v) in out.iter_mut().zip(d) {
                    *o = s * v;
                }
                admissible(out);
            })?,
        ));
    }
    for &shift in &opts.shifts {
        competitors.push((
            format!("shift-{shift}"),
            optimal.map(|_, _, d, out| {
                for (o, v) in out.iter_mut().zip(d) {
                    *o = v + shift;
                }
                admissible(out);
            })?,
        ));
    }
    let b = 1.0 + optimal.bound();
    for r in 0..opts.random_controls {
        let seed = opts.seed.wrapping_add(r as u64);
        competitors.push((
            format!("random-{r}"),
            ControlProcess::from_fn(test.paths(), steps, n, |p, i, out| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream((p * steps + i) as u64);
                for o in out.iter_mut() {
                    *o = b * (2.0 * rng.gen::<f64>() - 1.0);
                }
                admissible(out);
            })?,
        ));
    }

    let opt_report = control_report(ctl, "optimal", &optimal, test, &sol, xi)?;
    let value_ok = (opt_report.value - closed_form).abs() <= 2.0 * opt_report.se + 1e-12 * closed_form.abs();
    let drift_ok = opt_report.max_abs_drift_z <= 3.0;
    let mut perturbed = Vec::new();
    let (mut dominance_ok, mut supermartingale_ok) = (true, true);
    for (name, c) in &competitors {
        let mut r = control_report(ctl, name, c, test, &sol, xi)?;
        let combined = (r.se.powi(2) + opt_report.se.powi(2)).sqrt();
        let dominated = r.value <= opt_report.value + 2.0 * combined + 1e-12 * opt_report.value.abs();
        let supermart = r.max_drift_z <= 3.0;
        r.pass = dominated && supermart;
        dominance_ok &= dominated;
        supermartingale_ok &= supermart;
        perturbed.push(r);
    }
    let mut optimal_report = opt_report;
    optimal_report.pass = value_ok && drift_ok;
    Ok(VerificationReport {
        y0,
        closed_form,
        truncation_radius: radius,
        optimal: optimal_report,
        perturbed,
        value_ok,
        dominance_ok,
        drift_ok,
        supermartingale_ok,
    })
}

fn control_report(
    ctl: &OptimalControl,
    name: &str,
    control: &ControlProcess,
    ens: &MartingaleEnsemble,
    sol: &crate::bsde::DiscreteBsdeSolution,
    xi: &TerminalFunctional,
) -> Result<ControlReport> {
    let x = ctl.utility.x;
    let wealth = simulate_wealth(ctl, control, ctl.utility.dynamics(), ens, x)?;
    let steps = ens.steps();
    let paths = ens.paths();
    // U on every node; at T the terminal value uses ξ itself.
    let u: Vec<f64> = (0..paths)
        .into_par_iter()
        .flat_map_iter(|p| {
            let mut row = Vec::with_capacity(steps + 1);
            for node in 0..=steps {
                let y = if node == steps {
                    let mut o = [0.0];
                    xi.eval(&ens.point(p, node), &mut o);
                    o[0]
                } else {
                    sol.y(p, node)[0]
                };
                row.push(ctl.utility.evaluate(wealth.at(p, node), y));
            }
            row
        })
        .collect();
    let terminal: Vec<f64> = (0..paths).map(|p| u[p * (steps + 1) + steps]).collect();
    let (value, se) = mean_se(&terminal);
    let mut max_drift_z = f64::NEG_INFINITY;
    let mut max_abs_drift_z = 0.0f64;
    for i in 0..steps {
        let inc: Vec<f64> = (0..paths).map(|p| u[p * (steps + 1) + i + 1] - u[p * (steps + 1) + i]).collect();
        let (m, s) = mean_se(&inc);
        let zscore = if s > 0.0 {
            m / s
        } else if m.abs() <= 1e-14 * (1.0 + value.abs()) {
            0.0
        } else {
            m.signum() * f64::INFINITY
        };
        max_drift_z = max_drift_z.max(zscore);
        max_abs_drift_z = max_abs_drift_z.max(zscore.abs());
    }
    Ok(ControlReport { name: name.into(), value, se, max_drift_z, max_abs_drift_z, pass: true })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn market(theta: Vec<f64>) -> MarketModel {
        let n = theta.len();
        MarketModel::new(theta, MartingaleModel::StandardBm { dim: n }).unwrap()
    }

    fn power(kappa: f64) -> UtilitySpec {
        UtilitySpec::new(Utility::Power { kappa }, 1.0).unwrap()
    }

    fn expo(kappa: f64) -> UtilitySpec {
        UtilitySpec::new(Utility::Exponential { kappa }, 1.0).unwrap()
    }

    #[test]
    fn unconstrained_power_formula() {
        let mk = market(vec![0.2, -0.1]);
        let k = 0.4;
        let pen = PenaltySpec::ClosedSet { set: ConstraintSet::Whole };
        let z = [0.3, 0.5];
        let pi = optimal_control(&pen, &power(k), &mk, &z).unwrap();
        // m = I/√2: (θ* m⁻¹ − κz)/(1−κ) · m⁻¹
        let s = 2f64.sqrt();
        for i in 0..2 {
            let v = (mk.theta[i] * s - k * z[i]) / (1.0 - k);
            assert!((pi[i] - v * s).abs() < 1e-13);
        }
    }

    #[test]
    fn info_cost_exponential_zero_below_threshold() {
        let mk = market(vec![0.0, 0.0]);
        let pen = PenaltySpec::InfoCost { costs: vec![0.5, 0.2] };
        let u = expo(2.0);
        let ctl = OptimalControl::new(pen, u, mk).unwrap();
        let z = [0.7, -0.44];
        assert_eq!(ctl.control(&z), vec![0.0, 0.0]);
        let f = ctl.driver_value(&z);
        let expect = 0.5 * 2.0 * (0.49f64.min(0.5) + 0.1936f64.min(0.2));
        assert!((f - expect).abs() < 1e-14);
        // continuity across |z_j| = √(2C_j/κ)
        let edge = (2.0f64 * 0.5 / 2.0).sqrt();
        let below = ctl.driver_value(&[edge - 1e-12, 0.0]);
        let above = ctl.driver_value(&[edge + 1e-12, 0.0]);
        assert!((below - above).abs() < 1e-10);
    }

    #[test]
    fn diversification_first_order_condition() {
        let mk = market(vec![0.1, 0.3]);
        let w = vec![0.45, 0.55, 0.5, 0.5];
        let pen = PenaltySpec::Diversification { w: w.clone(), beta: 2.0 };
        let kappa = 0.3;
        let ctl = OptimalControl::new(pen, power(kappa), mk.clone()).unwrap();
        let z = [0.4, -0.2];
        let pi = ctl.control(&z);
        let m = mk.m();
        let iw = DMatrix::identity(2, 2) - DMatrix::from_row_slice(2, 2, &w);
        let grad_p: Vec<f64> = row_times(&row_times(&pi, &iw), &iw.transpose()).iter().map(|v| 2.0 * v).collect();
        let pmm = row_times(&row_times(&pi, &m), &m.transpose());
        let zm = row_times(&z, &m.transpose());
        for i in 0..2 {
            let res = grad_p[i] + (1.0 - kappa) * pmm[i] + kappa * zm[i] - mk.theta[i];
            assert!(res.abs() < 1e-10, "{res}");
        }
    }

    #[test]
    fn risk_neutral_diversification_matches_written_form() {
        let mk = market(vec![0.2, 0.1]);
        let w = vec![0.3, 0.1, -0.2, 0.4];
        for beta in [1.5, 2.0, 3.0] {
            let ctl = OptimalControl::new(PenaltySpec::Diversification { w: w.clone(), beta }, power(1.0), mk.clone()).unwrap();
            let z = [0.25, -0.6];
            let pi = ctl.control(&z);
            let m = mk.m();
            let iw = DMatrix::identity(2, 2) - DMatrix::from_row_slice(2, 2, &w);
            let zm = row_times(&z, &m.transpose());
            let c: Vec<f64> = (0..2).map(|i| mk.theta[i] - zm[i]).collect();
            let a = row_times(&c, &iw.transpose().try_inverse().unwrap());
            let scale = (norm(&a).powf(2.0 - beta) / beta).powf(1.0 / (beta - 1.0));
            let written = row_times(&c, &(&iw * iw.transpose()).try_inverse().unwrap());
            for i in 0..2 {
                assert!((pi[i] - scale * written[i]).abs() < 1e-12);
            }
            let f = (norm(&a) / beta).powf(beta / (beta - 1.0))
                - pi.iter().zip(&c).map(|(p, q)| p * q).sum::<f64>()
                - 0.5 * norm(&z).powi(2);
            assert!((ctl.driver_value(&z) - f).abs() < 1e-12);
        }
        // z m* = θ*: degenerate point
        let ctl = OptimalControl::new(PenaltySpec::Diversification { w, beta: 1.5 }, power(1.0), mk.clone()).unwrap();
        let z: Vec<f64> = mk.theta.iter().map(|t| t * 2f64.sqrt()).collect();
        assert_eq!(ctl.control(&z), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_is_stationary_and_free() {
        let mk = market(vec![0.0, 0.0]);
        let specs = vec![
            (PenaltySpec::ClosedSet { set: ConstraintSet::Ball { radius: 1.0 } }, power(0.5)),
            (PenaltySpec::Diversification { w: vec![0.5; 4], beta: 2.0 }, power(-1.0)),
            (PenaltySpec::InfoCost { costs: vec![0.1, 0.2] }, power(0.5)),
            (PenaltySpec::ClosedSet { set: ConstraintSet::Cone }, expo(1.0)),
            (PenaltySpec::Diversification { w: vec![0.5; 4], beta: 2.0 }, expo(1.0)),
            (PenaltySpec::InfoCost { costs: vec![0.1, 0.2] }, expo(1.0)),
        ];
        for (pen, u) in specs {
            let ctl = OptimalControl::new(pen, u, mk.clone()).unwrap();
            assert_eq!(ctl.control(&[0.0, 0.0]), vec![0.0, 0.0]);
            assert_eq!(ctl.driver_value(&[0.0, 0.0]), 0.0);
        }
    }

    #[test]
    fn unsupported_combinations() {
        let mk = market(vec![0.0, 0.0]);
        let div3 = PenaltySpec::Diversification { w: vec![0.5; 4], beta: 3.0 };
        assert!(matches!(OptimalControl::new(div3.clone(), power(0.5), mk.clone()), Err(LabError::Unsupported(_))));
        assert!(matches!(OptimalControl::new(div3, expo(0.5), mk.clone()), Err(LabError::Unsupported(_))));
        let cone = PenaltySpec::ClosedSet { set: ConstraintSet::Cone };
        assert!(OptimalControl::new(cone, power(1.0), mk.clone()).is_err());
        let info = PenaltySpec::InfoCost { costs: vec![0.1, 0.1] };
        assert!(OptimalControl::new(info.clone(), power(0.5), market(vec![0.1, 0.0])).is_err());
        // singular I − w for the risk-neutral investor
        let div = PenaltySpec::Diversification { w: vec![0.5; 4], beta: 2.0 };
        assert!(matches!(OptimalControl::new(div, power(1.0), mk), Err(LabError::Config(_))));
    }

    #[test]
    fn pointwise_optimality_all_examples() {
        let mk = market(vec![0.15, -0.05]);
        let mk0 = market(vec![0.0, 0.0]);
        let cases = vec![
            (PenaltySpec::ClosedSet { set: ConstraintSet::Box { lo: vec![-0.5, 0.0], hi: vec![1.0, 0.8] } }, power(0.5), mk.clone()),
            (PenaltySpec::ClosedSet { set: ConstraintSet::Ball { radius: 0.7 } }, power(1.0), mk.clone()),
            (PenaltySpec::Diversification { w: vec![0.4, 0.6, 0.5, 0.5], beta: 2.0 }, power(-2.0), mk.clone()),
            (PenaltySpec::Diversification { w: vec![0.3, 0.1, -0.2, 0.4], beta: 1.5 }, power(1.0), mk.clone()),
            (PenaltySpec::InfoCost { costs: vec![0.05, 0.3] }, power(0.5), mk0.clone()),
            (PenaltySpec::ClosedSet { set: ConstraintSet::Cone }, expo(1.5), mk.clone()),
            (PenaltySpec::Diversification { w: vec![0.4, 0.6, 0.5, 0.5], beta: 2.0 }, expo(0.8), mk.clone()),
            (PenaltySpec::InfoCost { costs: vec![0.05, 0.3] }, expo(2.0), mk0),
        ];
        for (pen, u, m) in cases {
            let ctl = OptimalControl::new(pen.clone(), u, m).unwrap();
            let chk = check_pointwise_optimality(&ctl, 200, 200, 2.0, 3);
            assert!(chk.pass, "{pen:?} {u:?}: {}", chk.worst_gap);
        }
    }

    #[test]
    fn projections_are_idempotent() {
        let sets = [
            ConstraintSet::Box { lo: vec![-1.0, 0.0], hi: vec![0.5, 2.0] },
            ConstraintSet::Ball { radius: 0.3 },
            ConstraintSet::Cone,
            ConstraintSet::Origin,
            ConstraintSet::Whole,
        ];
        for s in &sets {
            for v in [[3.0, -2.0], [0.1, 0.1], [-0.4, 5.0]] {
                let mut a = [0.0; 2];
                let mut b = [0.0; 2];
                s.project(&v, &mut a);
                s.project(&a, &mut b);
                assert_eq!(a, b);
                assert!(s.contains(&a));
            }
        }
    }

    #[test]
    fn zero_control_keeps_wealth() {
        let g = crate::martingale::TimeGrid::uniform(1.0, 8).unwrap();
        let ens = crate::martingale::simulate(&MartingaleModel::StandardBm { dim: 2 }, &g, 50, 1).unwrap();
        let ctl = OptimalControl::new(PenaltySpec::InfoCost { costs: vec![0.2, 0.2] }, power(0.5), market(vec![0.0, 0.0])).unwrap();
        let zero = ControlProcess::new(50, 8, 2, vec![0.0; 800]).unwrap();
        for dynamics in [WealthDynamics::Multiplicative, WealthDynamics::Additive, WealthDynamics::MultiplicativeEuler] {
            let w = simulate_wealth(&ctl, &zero, dynamics, &ens, 1.5).unwrap();
            assert!(w.values.iter().all(|&v| v == 1.5));
        }
    }

    #[test]
    fn additive_wealth_is_the_direct_sum() {
        let g = crate::martingale::TimeGrid::uniform(1.0, 6).unwrap();
        let ens = crate::martingale::simulate(&MartingaleModel::StandardBm { dim: 2 }, &g, 20, 4).unwrap();
        let mk = market(vec![0.3, -0.2]);
        let ctl = OptimalControl::new(PenaltySpec::Diversification { w: vec![0.5; 4], beta: 2.0 }, expo(1.0), mk.clone()).unwrap();
        let c = ControlProcess::from_fn(20, 6, 2, |p, i, out| {
            out[0] = 0.1 * p as f64 - 0.5;
            out[1] = 0.2 * i as f64;
        })
        .unwrap();
        let w = simulate_wealth(&ctl, &c, WealthDynamics::Additive, &ens, 2.0).unwrap();
        for p in 0..20 {
            let mut x = 2.0;
            for i in 0..6 {
                let d = c.at(p, i);
                let dm = ens.increment(p, i);
                let da = ens.d_clock(p, i);
                x += d[0] * (0.3 * da + dm[0]) + d[1] * (-0.2 * da + dm[1]) - ctl.penalty_value(d) * da;
            }
            assert!((w.at(p, 6) - x).abs() < 1e-12);
        }
    }

    #[test]
    fn constraint_violation_is_rejected() {
        let g = crate::martingale::TimeGrid::uniform(1.0, 2).unwrap();
        let ens = crate::martingale::simulate(&MartingaleModel::StandardBm { dim: 1 }, &g, 3, 4).unwrap();
        let mk = MarketModel::new(vec![0.0], MartingaleModel::StandardBm { dim: 1 }).unwrap();
        let ctl = OptimalControl::new(PenaltySpec::ClosedSet { set: ConstraintSet::Ball { radius: 1.0 } }, expo(1.0), mk).unwrap();
        let c = ControlProcess::new(3, 2, 1, vec![0.5, 0.5, 0.5, 2.0, 0.5, 0.5]).unwrap();
        assert!(simulate_wealth(&ctl, &c, WealthDynamics::Additive, &ens, 0.0).is_err());
    }

    fn ensembles(paths: usize) -> (MartingaleEnsemble, MartingaleEnsemble) {
        let model = MartingaleModel::StandardBm { dim: 2 };
        let g = crate::martingale::TimeGrid::uniform(1.0, 8).unwrap();
        (
            crate::martingale::simulate(&model, &g, paths, 101).unwrap(),
            crate::martingale::simulate(&model, &g, paths, 202).unwrap(),
        )
    }

    #[test]
    fn no_trading_exponential_certainty_equivalent() {
        let (train, test) = ensembles(20_000);
        let ctl = OptimalControl::new(PenaltySpec::ClosedSet { set: ConstraintSet::Origin }, expo(1.0), market(vec![0.0, 0.0])).unwrap();
        let xi = TerminalFunctional::linear(vec![1.2, 0.4]);
        let r = verify_martingale_method(&ctl, &xi, &train, &test, &VerifyUtilityOptions::default()).unwrap();
        // Z ≡ a, f = ½κ|a m|², K = 2: Y₀ = ½(1.44 + 0.16)/2 · 2.
        assert!((r.y0 - 0.8).abs() < 1e-6, "{}", r.y0);
        assert!((r.closed_form + (-0.2f64).exp()).abs() < 1e-6);
        // every competitor projects back onto {0}
        assert!(r.perturbed.iter().all(|c| c.value == r.optimal.value));
        assert!(r.pass());
    }

    #[test]
    fn zero_terminal_exponential_unconstrained() {
        let (train, test) = ensembles(2_000);
        let ctl = OptimalControl::new(PenaltySpec::ClosedSet { set: ConstraintSet::Whole }, expo(0.7), market(vec![0.0, 0.0])).unwrap();
        let xi = TerminalFunctional::constant(vec![0.0]);
        let r = verify_martingale_method(&ctl, &xi, &train, &test, &VerifyUtilityOptions::default()).unwrap();
        assert_eq!(r.y0, 0.0);
        assert!((r.optimal.value + (-0.7f64).exp()).abs() < 1e-12);
        assert!(r.optimal.se < 1e-12);
        assert!(r.pass());
    }

    #[test]
    fn power_info_cost_value_and_dominance() {
        let (train, test) = ensembles(40_000);
        let pen = PenaltySpec::InfoCost { costs: vec![0.05, 0.3] };
        let ctl = OptimalControl::new(pen, power(0.5), market(vec![0.0, 0.0])).unwrap();
        let xi = TerminalFunctional::linear(vec![1.2, 0.4]);
        let r = verify_martingale_method(&ctl, &xi, &train, &test, &VerifyUtilityOptions::default()).unwrap();
        // z = a/√2 = (0.849, 0.283): only the first asset clears its threshold.
        // f = (0.05 − 0.25·0.72) − ¼·0.8 = −0.33, Y₀ = 2f.
        assert!((r.y0 + 0.66).abs() < 1e-6, "{}", r.y0);
        assert_eq!(r.perturbed.len(), 10);
        assert!(r.value_ok && r.dominance_ok, "{r:?}");
    }

    #[test]
    fn exact_and_euler_wealth_converge_together() {
        let model = MartingaleModel::StandardBm { dim: 2 };
        let mk = MarketModel::new(vec![0.2, 0.1], model.clone()).unwrap();
        let ctl = OptimalControl::new(PenaltySpec::InfoCost { costs: vec![0.1, 0.0] }, power(0.5), market(vec![0.0, 0.0])).unwrap();
        let ctl = OptimalControl { market: mk, ..ctl };
        let mut gaps = Vec::new();
        for steps in [16, 64] {
            let g = crate::martingale::TimeGrid::uniform(1.0, steps).unwrap();
            let ens = crate::martingale::simulate(&model, &g, 4000, 9).unwrap();
            let c = ControlProcess::from_fn(4000, steps, 2, |_, _, out| out.copy_from_slice(&[0.6, -0.4])).unwrap();
            let a = simulate_wealth(&ctl, &c, WealthDynamics::Multiplicative, &ens, 1.0).unwrap();
            let b = simulate_wealth(&ctl, &c, WealthDynamics::MultiplicativeEuler, &ens, 1.0).unwrap();
            let rms = ((0..4000).map(|p| (a.at(p, steps) - b.at(p, steps)).powi(2)).sum::<f64>() / 4000.0).sqrt();
            let mean_a = (0..4000).map(|p| a.at(p, steps)).sum::<f64>() / 4000.0;
            let mean_b = (0..4000).map(|p| b.at(p, steps)).sum::<f64>() / 4000.0;
            assert!((mean_a - mean_b).abs() < 2.0 / steps as f64);
            gaps.push(rms);
        }
        // strong gap shrinks like √Δt: a factor 2 for 4× the steps
        assert!(gaps[1] < 0.6 * gaps[0], "{gaps:?}");
    }
}
