//! Radial harmonic-map heat flow and the sphere-valued counterexample.
//!
//! The equivariant reduction of the harmonic map heat flow into `S²` is
//! `g_t = g_rr + g_r/r − sin g cos g / r²` on `r ∈ [0, 1]`. With the martingale
//! `M = √2(W − W_{T−δ})` the process `Y_t = u(T−t, M_t)` solves the quadratic
//! BSDE with driver `½|Zm|² Y/(|Y| ∨ 1)`, and `Z = ∇u` blows up with `g_r(·, 0)`.

use std::f64::consts::TAU;
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::bounds::smallness_lhs;
use crate::bsde::driver::Rho;
use crate::error::{LabError, Result};
use crate::martingale::{simulate, MartingaleEnsemble, MartingaleModel, TimeGrid};

/// Explicit-scheme stability limit on `dt / dr²`.
pub const CFL_LIMIT: f64 = 0.4;
/// Default `dt / dr²`.
pub const DEFAULT_CFL: f64 = 0.25;
pub const DEFAULT_THRESHOLD: f64 = 1e3;

/// Smallest `λ` with `cos φ(1) ≥ 1/(1+ε)`, found by a doubling scan and
/// bisection, then inflated by 5%.
pub fn choose_lambda(epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(LabError::InvalidInput(format!("ε must lie in (0, 1), got {epsilon}")));
    }
    let ok = |lambda: f64| cos_phi(lambda, epsilon, 1.0) >= 1.0 / (1.0 + epsilon);
    let mut hi = 1.0;
    while !ok(hi) {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(1.05 * hi)
}

fn cos_phi(lambda: f64, epsilon: f64, r: f64) -> f64 {
    let l2 = lambda * lambda;
    let q = r.powf(2.0 * (1.0 + epsilon));
    (l2 - q) / (l2 + q)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleConfig {
    pub epsilon: f64,
    pub lambda: f64,
    /// Length of the window in which the martingale runs.
    pub delta: f64,
}

impl CounterexampleConfig {
    pub fn new(epsilon: f64, lambda: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(LabError::Config(format!("ε must lie in (0, 1), got {epsilon}")));
        }
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(LabError::Config(format!("λ must be positive, got {lambda}")));
        }
        if !(delta > 0.0) {
            return Err(LabError::Config(format!("δ must be positive, got {delta}")));
        }
        // cos φ is decreasing in r, so r = 1 is the binding radius.
        if cos_phi(lambda, epsilon, 1.0) < 1.0 / (1.0 + epsilon) {
            return Err(LabError::Config(format!(
                "λ = {lambda} too small: cos φ(1) = {} < 1/(1+ε)",
                cos_phi(lambda, epsilon, 1.0)
            )));
        }
        Ok(Self { epsilon, lambda, delta })
    }

    /// Configuration with `λ` from [`choose_lambda`].
    pub fn with_epsilon(epsilon: f64, delta: f64) -> Result<Self> {
        Self::new(epsilon, choose_lambda(epsilon)?, delta)
    }

    pub fn phi(&self, r: f64) -> f64 {
        cos_phi(self.lambda, self.epsilon, r).clamp(-1.0, 1.0).acos()
    }

    /// `arccos((1−r²)/(1+r²)) + φ(r)`.
    pub fn lower_bound(&self, r: f64) -> f64 {
        ((1.0 - r * r) / (1.0 + r * r)).clamp(-1.0, 1.0).acos() + self.phi(r)
    }

    fn lower_bound_prime(&self, r: f64) -> f64 {
        // arccos((1−r²)/(1+r²)) = 2 atan r and φ(r) = 2 atan(r^a/λ).
        let a = 1.0 + self.epsilon;
        let q = r.powf(a) / self.lambda;
        let dq = if r > 0.0 { a * r.powf(a - 1.0) / self.lambda } else { 0.0 };
        2.0 / (1.0 + r * r) + 2.0 * dq / (1.0 + q * q)
    }

    fn lift(&self) -> f64 {
        TAU - self.lower_bound(1.0)
    }

    /// `bound(r) + (2π − bound(1))(3r² − 2r³)`.
    pub fn g0(&self, r: f64) -> f64 {
        if r >= 1.0 {
            return TAU;
        }
        self.lower_bound(r) + self.lift() * r * r * (3.0 - 2.0 * r)
    }

    pub fn g0_prime(&self, r: f64) -> f64 {
        self.lower_bound_prime(r) + self.lift() * 6.0 * r * (1.0 - r)
    }

    /// `sup_x |∇ξ(x)|` over the closed unit disc, on a fine radial grid.
    pub fn d_xi(&self) -> f64 {
        let n = 20_000;
        (0..=n)
            .map(|i| {
                let r = i as f64 / n as f64;
                let gp = self.g0_prime(r);
                let s = if r > 0.0 { self.g0(r).sin() / r } else { gp };
                (gp * gp + s * s).sqrt()
            })
            .fold(0.0, f64::max)
    }
}

/// `g₀` on the grid radii; checks the lower bound at every point.
pub fn build_g0(cfg: &CounterexampleConfig, grid: &RadialGrid) -> Result<Vec<f64>> {
    if cfg.lift() <= 0.0 {
        return Err(LabError::Config(format!(
            "lower bound {} at r = 1 exceeds 2π; no admissible blend",
            cfg.lower_bound(1.0)
        )));
    }
    let g: Vec<f64> = (0..=grid.cells).map(|i| cfg.g0(grid.radius(i))).collect();
    for (i, v) in g.iter().enumerate() {
        let r = grid.radius(i);
        if *v < cfg.lower_bound(r) - 1e-12 {
            return Err(LabError::Config(format!("g₀({r}) = {v} is below the lower bound")));
        }
        if cos_phi(cfg.lambda, cfg.epsilon, r) < 1.0 / (1.0 + cfg.epsilon) {
            return Err(LabError::Config(format!("cos φ({r}) < 1/(1+ε)")));
        }
    }
    Ok(g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialGrid {
    pub cells: usize,
    pub dr: f64,
    pub dt: f64,
    pub t_max: f64,
}

impl RadialGrid {
    pub fn new(cells: usize, dt: f64, t_max: f64) -> Result<Self> {
        if cells < 4 {
            return Err(LabError::Config(format!("need at least 4 radial cells, got {cells}")));
        }
        let dr = 1.0 / cells as f64;
        if !(dt > 0.0) || dt > CFL_LIMIT * dr * dr {
            return Err(LabError::Config(format!(
                "dt = {dt} violates the explicit-scheme limit {CFL_LIMIT}·dr² = {}",
                CFL_LIMIT * dr * dr
            )));
        }
        if !(t_max > 0.0) {
            return Err(LabError::Config(format!("integration horizon must be positive, got {t_max}")));
        }
        Ok(Self { cells, dr, dt, t_max })
    }

    pub fn with_cfl(cells: usize, factor: f64, t_max: f64) -> Result<Self> {
        let dr = 1.0 / cells as f64;
        Self::new(cells, factor * dr * dr, t_max)
    }

    /// `(dr/2, dt/4)`.
    pub fn refined(&self) -> Result<Self> {
        Self::new(2 * self.cells, self.dt / 4.0, self.t_max)
    }

    pub fn radius(&self, i: usize) -> f64 {
        i as f64 / self.cells as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdeSolution {
    pub grid: RadialGrid,
    pub threshold: f64,
    /// Snapshot times, increasing; the last is where integration stopped.
    pub times: Vec<f64>,
    /// `g` at each snapshot, `cells + 1` values each.
    pub g: Vec<Vec<f64>>,
    /// One-sided `∂_r g(t, 0⁺)` at each snapshot.
    pub trace: Vec<f64>,
    pub blow_up_time: Option<f64>,
    pub steps: usize,
}

/// `(−3g₀ + 4g₁ − g₂)/(2dr)`.
fn origin_slope(g: &[f64], dr: f64) -> f64 {
    (-3.0 * g[0] + 4.0 * g[1] - g[2]) / (2.0 * dr)
}

/// Explicit integration from `g0` (whose end values fix the boundary data)
/// until `t_max` or until the origin slope exceeds `threshold`.
pub fn solve_pde(g0: &[f64], grid: &RadialGrid, threshold: f64) -> Result<PdeSolution> {
    let n = grid.cells;
    if g0.len() != n + 1 {
        return Err(LabError::InvalidInput(format!("g₀ has {} values, grid has {} nodes", g0.len(), n + 1)));
    }
    if g0[0] != 0.0 {
        return Err(LabError::InvalidInput(format!("g₀(0) must be 0, got {}", g0[0])));
    }
    let (dr, dt) = (grid.dr, grid.dt);
    let outer = g0[n];
    let mut g = g0.to_vec();
    let mut next = g.clone();
    let inv_dr2 = 1.0 / (dr * dr);

    let snapshot_gap = grid.t_max / 500.0;
    let mut sol = PdeSolution {
        grid: grid.clone(),
        threshold,
        times: vec![0.0],
        g: vec![g.clone()],
        trace: vec![origin_slope(&g, dr)],
        blow_up_time: None,
        steps: 0,
    };
    let total = (grid.t_max / dt).ceil() as usize;
    let mut t = 0.0;
    for step in 1..=total {
        let h = dt.min(grid.t_max - t);
        for i in 1..n {
            let r = i as f64 * dr;
            let (gm, gi, gp) = (g[i - 1], g[i], g[i + 1]);
            let lap = (gp - 2.0 * gi + gm) * inv_dr2 + (gp - gm) / (2.0 * dr * r);
            next[i] = gi + h * (lap - (2.0 * gi).sin() / (2.0 * r * r));
        }
        next[0] = 0.0;
        next[n] = outer;
        std::mem::swap(&mut g, &mut next);
        t = if step == total { grid.t_max } else { step as f64 * dt };
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(LabError::Numerical(format!("non-finite g at r = {} and t = {t}", i as f64 * dr)));
        }
        let slope = origin_slope(&g, dr);
        let last_t = *sol.times.last().unwrap();
        let last_s = *sol.trace.last().unwrap();
        let blown = slope > threshold;
        if blown || step == total || t - last_t >= snapshot_gap || (slope - last_s).abs() > 0.02 * last_s.abs() {
            sol.times.push(t);
            sol.g.push(g.clone());
            sol.trace.push(slope);
        }
        sol.steps = step;
        if blown {
            sol.blow_up_time = Some(t);
            break;
        }
    }
    Ok(sol)
}

/// Cubic Lagrange value and derivative at `r`, with the odd reflection
/// `g(−r) = −g(r)` supplying the ghost node at the origin.
fn interp(g: &[f64], dr: f64, r: f64) -> (f64, f64) {
    let n = g.len() - 1;
    let x = r / dr;
    let j = (x.floor() as isize).clamp(0, n as isize - 1);
    let start = (j - 1).min(n as isize - 3);
    let at = |k: isize| if k < 0 { -g[(-k) as usize] } else { g[k as usize] };
    let nodes = [start, start + 1, start + 2, start + 3];
    let mut v = 0.0;
    let mut dv = 0.0;
    for (a, &ka) in nodes.iter().enumerate() {
        let xa = ka as f64;
        let mut w = 1.0;
        let mut dw = 0.0;
        for (b, &kb) in nodes.iter().enumerate() {
            if a == b {
                continue;
            }
            let xb = kb as f64;
            let den = xa - xb;
            dw = dw * (x - xb) / den + w / den;
            w *= (x - xb) / den;
        }
        v += w * at(ka);
        dv += dw * at(ka);
    }
    (v, dv / dr)
}

impl PdeSolution {
    /// Last time covered by the solution.
    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// `(g, ∂_r g)` at `(t, r)`: linear in time between snapshots, cubic in radius.
    pub fn g_at(&self, t: f64, r: f64) -> Result<(f64, f64)> {
        if !(t >= 0.0) || t > self.horizon() * (1.0 + 1e-12) {
            return Err(LabError::Domain(format!("t = {t} outside [0, {}]", self.horizon())));
        }
        if !(0.0..=1.0 + 1e-9).contains(&r) {
            return Err(LabError::Domain(format!("radius {r} outside [0, 1]")));
        }
        let r = r.min(1.0);
        let k = self.times.partition_point(|&s| s <= t).clamp(1, self.times.len().max(2) - 1);
        if self.times.len() == 1 {
            return Ok(interp(&self.g[0], self.grid.dr, r));
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        let (a, da) = interp(&self.g[k - 1], self.grid.dr, r);
        let (b, db) = interp(&self.g[k], self.grid.dr, r);
        Ok(((1.0 - w) * a + w * b, (1.0 - w) * da + w * db))
    }

    /// `t, trace` rows.
    pub fn write_trace_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,dr_g_origin")?;
        for (t, s) in self.times.iter().zip(&self.trace) {
            writeln!(w, "{t},{s}")?;
        }
        Ok(())
    }

    /// `t, r, g` rows for the snapshot nearest each requested time.
    pub fn write_snapshots_csv<W: Write>(&self, at: &[f64], mut w: W) -> Result<()> {
        writeln!(w, "t,r,g")?;
        for &t in at {
            let k = self.times.partition_point(|&s| s < t).min(self.times.len() - 1);
            for (i, v) in self.g[k].iter().enumerate() {
                writeln!(w, "{},{},{v}", self.times[k], self.grid.radius(i))?;
            }
        }
        Ok(())
    }
}

pub type Jacobian = [[f64; 2]; 3];

/// `u(t, x) = (x₁/|x| sin g, x₂/|x| sin g, cos g)` and its `3 × 2` Jacobian.
pub fn u_field(pde: &PdeSolution, t: f64, x: [f64; 2]) -> Result<([f64; 3], Jacobian)> {
    let r = x[0].hypot(x[1]);
    let (g, gr) = pde.g_at(t, r)?;
    let (sg, cg) = g.sin_cos();
    if r == 0.0 {
        return Ok(([0.0, 0.0, 1.0], [[gr, 0.0], [0.0, gr], [0.0, 0.0]]));
    }
    let (c, s) = (x[0] / r, x[1] / r);
    let sin_over_r = sg / r;
    let u = [c * sg, s * sg, cg];
    // ∂_j u = ∂_r u · x_j/r + (1/r) ∂_θ u · (−s, c)_j.
    let ur = [c * cg * gr, s * cg * gr, -sg * gr];
    let ut = [-s * sin_over_r, c * sin_over_r, 0.0];
    let dir_r = [c, s];
    let dir_t = [-s, c];
    let mut jac = [[0.0; 2]; 3];
    for a in 0..3 {
        for j in 0..2 {
            jac[a][j] = ur[a] * dir_r[j] + ut[a] * dir_t[j];
        }
    }
    Ok((u, jac))
}

/// Central differences of [`u_field`] with step `h`.
pub fn u_gradient_fd(pde: &PdeSolution, t: f64, x: [f64; 2], h: f64) -> Result<Jacobian> {
    let mut jac = [[0.0; 2]; 3];
    for j in 0..2 {
        let mut xp = x;
        let mut xm = x;
        xp[j] += h;
        xm[j] -= h;
        let (up, _) = u_field(pde, t, xp)?;
        let (um, _) = u_field(pde, t, xm)?;
        for a in 0..3 {
            jac[a][j] = (up[a] - um[a]) / (2.0 * h);
        }
    }
    Ok(jac)
}

fn frob(j: &Jacobian) -> f64 {
    j.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

/// Nodes and weights of `n`-point Gauss quadrature for the standard normal.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jm = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        jm[(k - 1, k)] = b;
        jm[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(jm);
    let mut pairs: Vec<(f64, f64)> =
        (0..n).map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2))).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// `ρ(x) = x + x²/2`.
pub fn counterexample_rho() -> Rho {
    Rho::new(|x| x + 0.5 * x * x)
}

/// Every `R ∈ (0, r_max]` with `D_ξ e^{2δ(R+R²/2+1)²} ≤ R`, as `[lo, hi]`.
/// The admissible set is an interval because the left side is log-convex in `R`.
pub fn certificate_interval(d_xi: f64, delta: f64, r_max: f64, resolution: usize) -> Option<(f64, f64)> {
    let rho = counterexample_rho();
    let k = 4.0 * delta;
    let ok = |r: f64| smallness_lhs(d_xi, 0.0, k, &rho, r) <= r;
    let h = r_max / resolution.max(1) as f64;
    let first = (1..=resolution).map(|i| i as f64 * h).find(|&r| ok(r))?;
    let last = (1..=resolution).rev().map(|i| i as f64 * h).find(|&r| ok(r))?;
    let bisect = |mut good: f64, mut bad: f64| {
        for _ in 0..200 {
            let mid = 0.5 * (good + bad);
            if mid == good || mid == bad {
                break;
            }
            if ok(mid) {
                good = mid;
            } else {
                bad = mid;
            }
        }
        good
    };
    let lo = bisect(first, first - h);
    let hi = if last + h > r_max { last } else { bisect(last, last + h) };
    Some((lo, hi))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// A smallness certificate exists: `Z` is bounded by it.
    Certified,
    /// No certificate, and the window ends before the detected blow-up.
    Intermediate,
    /// `δ` reaches the detected blow-up time.
    BlowUp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyOptions {
    /// `L` in the fraction of paths with `sup_t |Z| ≥ L`.
    pub level: f64,
    /// Points sampled for the one-step residual.
    pub residual_points: usize,
    pub quadrature_nodes: usize,
    /// Halvings of the step in the residual table.
    pub residual_halvings: usize,
    pub certificate_r_max: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { level: 100.0, residual_points: 200, quadrature_nodes: 10, residual_halvings: 2, certificate_r_max: 1e3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleReport {
    pub delta: f64,
    pub clock_bound: f64,
    pub d_xi: f64,
    pub blow_up_time: Option<f64>,
    pub certificate: Option<(f64, f64)>,
    pub regime: Regime,
    pub sup_z: f64,
    pub fraction_above_level: f64,
    /// `max | |Y| − 1 |` over evaluated nodes.
    pub sphere_defect: f64,
    pub nodes_evaluated: usize,
    /// Nodes whose backward time lies past the end of the PDE solution.
    pub nodes_beyond: usize,
    /// `(Δt, mean one-step defect)`, halving `Δt` each row.
    pub residuals: Vec<(f64, f64)>,
}

impl CounterexampleReport {
    /// `log₂` of successive residual ratios.
    pub fn residual_orders(&self) -> Vec<f64> {
        self.residuals.windows(2).map(|w| (w[0].1 / w[1].1).log2()).collect()
    }
}

/// `Y = u(T−t, M_t)` and `Z = ∇u(T−t, M_t)` on every path of `ens`; measures
/// `sup |Z|`, the sphere constraint and the one-step BSDE defect, and evaluates
/// the smallness certificate at `K = 4δ`.
pub fn verify_counterexample(
    cfg: &CounterexampleConfig,
    pde: &PdeSolution,
    ens: &MartingaleEnsemble,
    opts: &VerifyOptions,
) -> Result<CounterexampleReport> {
    let (horizon, delta) = match *ens.model() {
        MartingaleModel::StoppedScaledBm { horizon, delta } => (horizon, delta),
        _ => return Err(LabError::InvalidInput("counterexample needs the stopped scaled Brownian model".into())),
    };
    if (delta - cfg.delta).abs() > 1e-12 * delta {
        return Err(LabError::InvalidInput(format!("ensemble δ = {delta} differs from config δ = {}", cfg.delta)));
    }
    let times = ens.grid().times().to_vec();
    let end = pde.horizon();
    // Before T − δ the martingale sits at 0 and the clock is idle, so Y is frozen at u(δ, 0).
    let backward = |node: usize| (horizon - times[node]).min(delta);
    let inside = |s: f64| s <= end * (1.0 + 1e-12);

    let per_path: Vec<Result<(f64, f64, usize, usize)>> = (0..ens.paths())
        .into_par_iter()
        .map(|p| {
            let mut sup = 0.0f64;
            let mut defect = 0.0f64;
            let (mut used, mut beyond) = (0, 0);
            for node in 0..ens.nodes() {
                let s = backward(node);
                if !inside(s) {
                    beyond += 1;
                    continue;
                }
                let v = ens.value(p, node);
                let (u, jac) = u_field(pde, s, [v[0], v[1]])?;
                let norm = u.iter().map(|c| c * c).sum::<f64>().sqrt();
                defect = defect.max((norm - 1.0).abs());
                if node < ens.steps() {
                    sup = sup.max(frob(&jac));
                }
                used += 1;
            }
            Ok((sup, defect, used, beyond))
        })
        .collect();
    let mut sup_z = 0.0f64;
    let mut sphere_defect = 0.0f64;
    let (mut nodes_evaluated, mut nodes_beyond, mut above) = (0, 0, 0usize);
    for r in per_path {
        let (s, d, u, b) = r?;
        sup_z = sup_z.max(s);
        sphere_defect = sphere_defect.max(d);
        nodes_evaluated += u;
        nodes_beyond += b;
        if s >= opts.level {
            above += 1;
        }
    }

    let residuals = residual_table(pde, ens, &backward, end, opts)?;
    let d_xi = cfg.d_xi();
    let certificate = certificate_interval(d_xi, delta, opts.certificate_r_max, 100_000);
    let regime = match (certificate, pde.blow_up_time) {
        (Some(_), _) => Regime::Certified,
        (None, Some(t0)) if delta >= t0 * (1.0 - 1e-12) => Regime::BlowUp,
        _ => Regime::Intermediate,
    };
    Ok(CounterexampleReport {
        delta,
        clock_bound: 4.0 * delta,
        d_xi,
        blow_up_time: pde.blow_up_time,
        certificate,
        regime,
        sup_z,
        fraction_above_level: above as f64 / ens.paths() as f64,
        sphere_defect,
        nodes_evaluated,
        nodes_beyond,
        residuals,
    })
}

/// Mean of `|u(s,x) − E[u(s−Δt, x + √(2Δt) ξ)] − Δt |∇u|² u|` over sampled
/// interior points, with the expectation by tensor Gauss quadrature.
fn residual_table(
    pde: &PdeSolution,
    ens: &MartingaleEnsemble,
    backward: &dyn Fn(usize) -> f64,
    end: f64,
    opts: &VerifyOptions,
) -> Result<Vec<(f64, f64)>> {
    let (xs, ws) = gauss_hermite(opts.quadrature_nodes.max(2));
    let reach = xs.iter().fold(0.0f64, |a, x| a.max(x.abs())) * 2f64.sqrt();
    let dt0 = (0..ens.steps()).map(|i| ens.grid().dt(i)).fold(f64::INFINITY, f64::min);
    let mut samples = Vec::new();
    let stride = (ens.paths() * ens.steps() / opts.residual_points.max(1)).max(1);
    let mut k = 0;
    'outer: for node in 0..ens.steps() {
        let s = backward(node);
        if !(s - dt0 >= 0.0) || s > end {
            continue;
        }
        for p in 0..ens.paths() {
            k += 1;
            if k % stride != 0 {
                continue;
            }
            let v = ens.value(p, node);
            let x = [v[0], v[1]];
            if x[0].hypot(x[1]) + reach * (2.0 * dt0).sqrt() < 0.95 {
                samples.push((s, x));
            }
            if samples.len() >= opts.residual_points {
                break 'outer;
            }
        }
    }
    let mut out = Vec::new();
    let mut dt = dt0;
    for _ in 0..=opts.residual_halvings {
        let sd = (2.0 * dt).sqrt();
        let defects: Vec<Result<f64>> = samples
            .par_iter()
            .map(|&(s, x)| {
                let (u, jac) = u_field(pde, s, x)?;
                let z2 = frob(&jac).powi(2);
                let mut mean = [0.0; 3];
                for (a, wa) in xs.iter().zip(&ws) {
                    for (b, wb) in xs.iter().zip(&ws) {
                        let (v, _) = u_field(pde, s - dt, [x[0] + sd * a, x[1] + sd * b])?;
                        for c in 0..3 {
                            mean[c] += wa * wb * v[c];
                        }
                    }
                }
                Ok((0..3).map(|c| (u[c] - mean[c] - dt * z2 * u[c]).powi(2)).sum::<f64>().sqrt())
            })
            .collect();
        let mut total = 0.0;
        for d in defects {
            total += d?;
        }
        let mean = if samples.is_empty() { 0.0 } else { total / samples.len() as f64 };
        out.push((dt, mean));
        dt *= 0.5;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub blow_up_time: Option<f64>,
    pub reports: Vec<CounterexampleReport>,
    /// Largest `R` admissible for any certified `δ`.
    pub largest_certificate: Option<f64>,
    pub certified_ok: bool,
    pub blow_up_ok: bool,
    pub sphere_ok: bool,
}

/// One verification per `δ`, each on its own `StoppedScaledBm` ensemble with
/// `T = δ` and `steps` uniform steps.
pub fn blowup_sweep(
    epsilon: f64,
    lambda: f64,
    deltas: &[f64],
    pde: &PdeSolution,
    paths: usize,
    steps: usize,
    seed: u64,
    opts: &VerifyOptions,
) -> Result<SweepReport> {
    let mut reports = Vec::new();
    for (i, &delta) in deltas.iter().enumerate() {
        let cfg = CounterexampleConfig::new(epsilon, lambda, delta)?;
        let grid = TimeGrid::uniform(delta, steps)?;
        let model = MartingaleModel::StoppedScaledBm { horizon: delta, delta };
        let ens = simulate(&model, &grid, paths, seed.wrapping_add(i as u64))?;
        reports.push(verify_counterexample(&cfg, pde, &ens, opts)?);
    }
    let largest_certificate = reports.iter().filter_map(|r| r.certificate.map(|c| c.1)).reduce(f64::max);
    let certified_ok = reports
        .iter()
        .filter_map(|r| r.certificate.map(|(lo, _)| r.sup_z <= 1.1 * lo))
        .all(|ok| ok);
    let blow_up_ok = reports
        .iter()
        .filter(|r| r.regime == Regime::BlowUp)
        .all(|r| largest_certificate.is_none_or(|c| r.sup_z > 10.0 * c));
    let sphere_ok = reports.iter().all(|r| r.sphere_defect <= 1e-10);
    Ok(SweepReport { blow_up_time: pde.blow_up_time, reports, largest_certificate, certified_ok, blow_up_ok, sphere_ok })
}

impl SweepReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "delta,regime,sup_z,certificate_lo,certificate_hi,fraction_above_level,sphere_defect,nodes_beyond")?;
        for r in &self.reports {
            let (lo, hi) = match r.certificate {
                Some((a, b)) => (a.to_string(), b.to_string()),
                None => ("none".into(), "none".into()),
            };
            let regime = match r.regime {
                Regime::Certified => "certified",
                Regime::Intermediate => "intermediate",
                Regime::BlowUp => "blow-up",
            };
            writeln!(
                w,
                "{},{regime},{},{lo},{hi},{},{},{}",
                r.delta, r.sup_z, r.fraction_above_level, r.sphere_defect, r.nodes_beyond
            )?;
        }
        Ok(())
    }
}

/// `2 atan r` on the grid; stationary under the flow when `g(1) = π/2`.
pub fn stationary_profile(grid: &RadialGrid) -> Vec<f64> {
    (0..=grid.cells).map(|i| 2.0 * grid.radius(i).atan()).collect()
}

/// Largest `|g(t, ·) − g₀|` over the stored snapshots.
pub fn max_drift(sol: &PdeSolution) -> f64 {
    let g0 = &sol.g[0];
    sol.g.iter().flat_map(|g| g.iter().zip(g0).map(|(a, b)| (a - b).abs())).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn lambda_threshold() {
        // ε = 1 sits at the edge of the admissible range: λ = √3 makes the condition tight.
        assert!((cos_phi(3f64.sqrt(), 1.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(choose_lambda(1.0).is_err());
        for eps in [0.1, 0.5, 0.9] {
            let l = choose_lambda(eps).unwrap() / 1.05;
            assert!((l * l - (2.0 + eps) / eps).abs() < 1e-9 * l * l);
        }
        assert!(choose_lambda(1.5).is_err());
        assert!(CounterexampleConfig::new(0.5, 1.0, 0.1).is_err());
    }

    #[test]
    fn profile_meets_constraints() {
        let cfg = CounterexampleConfig::with_epsilon(0.5, 0.1).unwrap();
        assert_eq!(cfg.phi(0.0), 0.0);
        assert_eq!(cfg.lower_bound(0.0), 0.0);
        assert!((cfg.lower_bound(1.0) - (PI / 2.0 + cfg.phi(1.0))).abs() < 1e-15);
        assert!(cfg.lower_bound(1.0) < TAU);
        let grid = RadialGrid::with_cfl(200, DEFAULT_CFL, 0.1).unwrap();
        let g = build_g0(&cfg, &grid).unwrap();
        assert_eq!(g[0], 0.0);
        assert_eq!(g[200], TAU);
        for (i, v) in g.iter().enumerate() {
            assert!(*v >= cfg.lower_bound(grid.radius(i)));
        }
        // analytic derivative against differences
        for r in [0.1, 0.37, 0.8] {
            let fd = (cfg.g0(r + 1e-6) - cfg.g0(r - 1e-6)) / 2e-6;
            assert!((fd - cfg.g0_prime(r)).abs() < 1e-6);
        }
    }

    #[test]
    fn cfl_is_enforced() {
        assert!(RadialGrid::new(10, 0.41e-2, 1.0).is_err());
        assert!(RadialGrid::new(10, 0.4e-2, 1.0).is_ok());
        let g = RadialGrid::with_cfl(10, 0.25, 1.0).unwrap().refined().unwrap();
        assert_eq!(g.cells, 20);
        assert!((g.dt - 0.25 / 400.0).abs() < 1e-18);
    }

    #[test]
    fn zero_profile_stays_zero() {
        let grid = RadialGrid::with_cfl(20, DEFAULT_CFL, 0.2).unwrap();
        let sol = solve_pde(&vec![0.0; 21], &grid, DEFAULT_THRESHOLD).unwrap();
        assert!(sol.g.iter().flatten().all(|&v| v == 0.0));
        assert!(sol.blow_up_time.is_none());
    }

    #[test]
    fn stationary_harmonic_map() {
        let grid = RadialGrid::with_cfl(100, DEFAULT_CFL, 1.0).unwrap();
        let sol = solve_pde(&stationary_profile(&grid), &grid, DEFAULT_THRESHOLD).unwrap();
        assert!(max_drift(&sol) <= 1e-3, "{}", max_drift(&sol));
        assert_eq!(sol.horizon(), 1.0);
    }

    #[test]
    fn interpolation_reproduces_cubics() {
        let dr = 0.1;
        let g: Vec<f64> = (0..=10).map(|i| {
            let r = i as f64 * dr;
            r - 0.5 * r * r * r
        }).collect();
        for r in [0.0, 0.03, 0.27, 0.55, 0.99, 1.0] {
            let (v, d) = interp(&g, dr, r);
            assert!((v - (r - 0.5 * r * r * r)).abs() < 1e-13, "{r}");
            assert!((d - (1.0 - 1.5 * r * r)).abs() < 1e-12, "{r}");
        }
    }

    #[test]
    fn field_is_sphere_valued_with_tangent_gradient() {
        let grid = RadialGrid::with_cfl(100, DEFAULT_CFL, 0.01).unwrap();
        let cfg = CounterexampleConfig::with_epsilon(0.5, 0.01).unwrap();
        let sol = solve_pde(&build_g0(&cfg, &grid).unwrap(), &grid, DEFAULT_THRESHOLD).unwrap();
        let (u0, j0) = u_field(&sol, 0.005, [0.0, 0.0]).unwrap();
        assert_eq!(u0, [0.0, 0.0, 1.0]);
        assert_eq!(j0[0][0], j0[1][1]);
        for x in [[0.3, -0.2], [0.01, 0.02], [-0.6, 0.7], [1.0, 0.0]] {
            let (u, jac) = u_field(&sol, 0.005, x).unwrap();
            assert!((u.iter().map(|c| c * c).sum::<f64>() - 1.0).abs() < 1e-12);
            for j in 0..2 {
                let dot: f64 = (0..3).map(|a| u[a] * jac[a][j]).sum();
                assert!(dot.abs() < 1e-10);
            }
            if x[0].hypot(x[1]) < 0.99 {
                let fd = u_gradient_fd(&sol, 0.005, x, 1e-6).unwrap();
                for a in 0..3 {
                    for j in 0..2 {
                        assert!((fd[a][j] - jac[a][j]).abs() < 1e-5, "{x:?} {a} {j}");
                    }
                }
            }
        }
        assert!(u_field(&sol, 0.02, [0.1, 0.1]).is_err());
    }

    #[test]
    fn point_where_g_is_pi() {
        let grid = RadialGrid::with_cfl(10, DEFAULT_CFL, 1e-3).unwrap();
        let g: Vec<f64> = (0..=10).map(|i| PI * i as f64 / 10.0).collect();
        let sol = PdeSolution {
            grid,
            threshold: DEFAULT_THRESHOLD,
            times: vec![0.0],
            g: vec![g],
            trace: vec![PI],
            blow_up_time: None,
            steps: 0,
        };
        let (u, _) = u_field(&sol, 0.0, [0.0, 1.0]).unwrap();
        assert!(u[0].abs() < 1e-15 && u[1].abs() < 1e-15 && (u[2] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn quadrature_moments() {
        let (x, w) = gauss_hermite(8);
        let m = |k: i32| x.iter().zip(&w).map(|(a, b)| b * a.powi(k)).sum::<f64>();
        assert!((m(0) - 1.0).abs() < 1e-13);
        assert!(m(1).abs() < 1e-13);
        assert!((m(2) - 1.0).abs() < 1e-12);
        assert!((m(4) - 3.0).abs() < 1e-11);
        assert!((m(6) - 15.0).abs() < 1e-10);
    }

    #[test]
    fn certificate_matches_smallness_radius() {
        let rho = counterexample_rho();
        let (lo, hi) = certificate_interval(2.0, 1e-4, 100.0, 100_000).unwrap();
        let r = crate::bsde::smallness_radius(2.0, 0.0, 4e-4, &rho, 100.0, 100_000).unwrap();
        assert!((lo - r).abs() < 1e-9);
        assert!(hi > lo);
        assert!(smallness_lhs(2.0, 0.0, 4e-4, &rho, hi) <= hi);
        assert!(smallness_lhs(2.0, 0.0, 4e-4, &rho, hi * 1.001) > hi * 1.001);
        assert!(certificate_interval(2.0, 1.0, 100.0, 10_000).is_none());
    }
}
