//! Path derivatives by bump-and-recompute, the linearized BSDE they solve,
//! and the delta-hedging check `∇_u Y_u = Z_u`.

use serde::{Deserialize, Serialize};

use crate::bsde::solver::times_m;
use crate::bsde::{
    solve_from, DiscreteBsdeSolution, Driver, FnDriver, RegressionBasis, Regularity, SolveOptions, TerminalFunctional,
};
use crate::error::{LabError, Result};
use crate::martingale::MartingaleEnsemble;

/// Perturbation `h e* 1_{[t_u, T]}` of the driving path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BumpSpec {
    pub u_index: usize,
    pub e: Vec<f64>,
    pub h: f64,
}

impl BumpSpec {
    pub fn new(u_index: usize, e: Vec<f64>, h: f64) -> Result<Self> {
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(LabError::InvalidInput(format!("bump direction must be a unit vector, |e| = {norm}")));
        }
        if h == 0.0 || !h.is_finite() {
            return Err(LabError::InvalidInput(format!("bump size must be finite and nonzero, got {h}")));
        }
        Ok(Self { u_index, e, h })
    }

    /// Unit direction along coordinate `i`.
    pub fn coordinate(u_index: usize, n: usize, i: usize, h: f64) -> Result<Self> {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        Self::new(u_index, e, h)
    }

    /// `10⁻⁴ √K`.
    pub fn default_h(clock_bound: f64) -> f64 {
        1e-4 * clock_bound.sqrt()
    }
}

/// A BSDE problem that can be re-solved on bumped ensembles.
pub struct Problem<'a, D: ?Sized> {
    pub xi: &'a TerminalFunctional,
    pub driver: &'a D,
    pub basis: &'a RegressionBasis,
    pub opts: &'a SolveOptions,
}

/// Difference quotients of `Y` and `Z` under one bump. Node-major.
#[derive(Clone, Debug)]
pub struct Quotients {
    pub bump: BumpSpec,
    paths: usize,
    d: usize,
    n: usize,
    y: Vec<f64>,
    z: Vec<f64>,
}

impl Quotients {
    pub fn y(&self, p: usize, node: usize) -> &[f64] {
        let s = (node * self.paths + p) * self.d;
        &self.y[s..s + self.d]
    }

    pub fn z(&self, p: usize, step: usize) -> &[f64] {
        let w = self.d * self.n;
        let s = (step * self.paths + p) * w;
        &self.z[s..s + w]
    }
}

/// `(solve(bumped) − solve(base))/h` node-wise. The bumped problem reuses the
/// base noise and is re-solved only on nodes `≥ u`; earlier nodes depend on a
/// prefix the bump does not touch, so their quotient is exactly zero.
pub fn numeric_nabla<D: Driver + ?Sized>(
    problem: &Problem<'_, D>,
    ens: &MartingaleEnsemble,
    base: &DiscreteBsdeSolution,
    bump: &BumpSpec,
    central: bool,
) -> Result<Quotients> {
    let u = bump.u_index;
    let (d, n, paths) = (base.dim_y(), base.dim_m(), base.paths());
    let up_ens = ens.bumped(u, &bump.e, bump.h)?;
    let up = solve_from(&up_ens, problem.xi, problem.driver, problem.basis, problem.opts, u)?;
    let down = if central {
        let dn_ens = ens.bumped(u, &bump.e, -bump.h)?;
        Some(solve_from(&dn_ens, problem.xi, problem.driver, problem.basis, problem.opts, u)?)
    } else {
        None
    };
    let nodes = base.nodes();
    let mut y = vec![0.0; nodes * paths * d];
    let mut z = vec![0.0; (nodes - 1) * paths * d * n];
    for node in u..nodes {
        for p in 0..paths {
            let (lo, denom) = match &down {
                Some(s) => (s.y(p, node), 2.0 * bump.h),
                None => (base.y(p, node), bump.h),
            };
            for (j, (a, b)) in up.y(p, node).iter().zip(lo).enumerate() {
                y[(node * paths + p) * d + j] = (a - b) / denom;
            }
            if node + 1 < nodes {
                let lo = match &down {
                    Some(s) => s.z(p, node),
                    None => base.z(p, node),
                };
                for (j, (a, b)) in up.z(p, node).iter().zip(lo).enumerate() {
                    z[(node * paths + p) * d * n + j] = (a - b) / denom;
                }
            }
        }
    }
    Ok(Quotients { bump: bump.clone(), paths, d, n, y, z })
}

/// Coefficients of the differentiated driver `g = ζ + η y + θ·z`, per path and step.
#[derive(Clone, Debug)]
pub struct LinearCoeffs {
    pub u_index: usize,
    paths: usize,
    d: usize,
    n: usize,
    zeta: Vec<f64>,
    eta: Vec<f64>,
    theta: Vec<f64>,
    pub max_eta: f64,
    pub max_theta: f64,
}

impl LinearCoeffs {
    /// Assemble from raw per-path arrays (`steps × P × ...`, step-major).
    pub fn from_parts(
        u_index: usize,
        paths: usize,
        d: usize,
        n: usize,
        zeta: Vec<f64>,
        eta: Vec<f64>,
        theta: Vec<f64>,
    ) -> Self {
        let max_eta = norms(&eta, d * d);
        let max_theta = norms(&theta, d * d * n);
        Self { u_index, paths, d, n, zeta, eta, theta, max_eta, max_theta }
    }

    pub fn zeta(&self, p: usize, step: usize) -> &[f64] {
        let s = (step * self.paths + p) * self.d;
        &self.zeta[s..s + self.d]
    }

    /// `d × d`, row-major.
    pub fn eta(&self, p: usize, step: usize) -> &[f64] {
        let w = self.d * self.d;
        let s = (step * self.paths + p) * w;
        &self.eta[s..s + w]
    }

    /// `d × (d·n)`: row `j` holds `∂f_j/∂z_{kl}` at index `k·n + l`.
    pub fn theta(&self, p: usize, step: usize) -> &[f64] {
        let w = self.d * self.d * self.n;
        let s = (step * self.paths + p) * w;
        &self.theta[s..s + w]
    }

    /// The linear driver, Lipschitz with the observed coefficient bounds.
    pub fn driver(&self) -> FnDriver {
        let c = self.clone();
        let (d, n) = (self.d, self.n);
        FnDriver::new(d, Regularity::Lipschitz { cy: self.max_eta, cz: self.max_theta }, move |pt, y, z, out| {
            let zeta = c.zeta(pt.path, pt.step);
            let eta = c.eta(pt.path, pt.step);
            let theta = c.theta(pt.path, pt.step);
            for j in 0..d {
                let mut v = zeta[j];
                for k in 0..d {
                    v += eta[j * d + k] * y[k];
                }
                for (a, zv) in z.iter().enumerate() {
                    v += theta[j * d * n + a] * zv;
                }
                out[j] = v;
            }
        })
    }
}

fn norms(v: &[f64], block: usize) -> f64 {
    v.chunks(block)
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// `ζ` by a path-bump quotient of `f` at frozen `(Y, Zm)`; `η`, `θ` by
/// central differences with step `fd` at the base solution.
pub fn linearized_coeffs<D: Driver + ?Sized>(
    f: &D,
    ens: &MartingaleEnsemble,
    base: &DiscreteBsdeSolution,
    bump: &BumpSpec,
    fd: f64,
) -> Result<LinearCoeffs> {
    let (d, n, paths, steps) = (base.dim_y(), base.dim_m(), base.paths(), ens.steps());
    let bumped = ens.bumped(bump.u_index, &bump.e, bump.h)?;
    let mut zeta = vec![0.0; steps * paths * d];
    let mut eta = vec![0.0; steps * paths * d * d];
    let mut theta = vec![0.0; steps * paths * d * d * n];
    let mut zm = vec![0.0; d * n];
    let (mut a, mut b) = (vec![0.0; d], vec![0.0; d]);
    let mut yp = vec![0.0; d];
    let mut zp = vec![0.0; d * n];
    for i in bump.u_index.min(steps)..steps {
        for p in 0..paths {
            let pt = ens.point(p, i);
            let y = base.y(p, i);
            times_m(base.z(p, i), ens.vol(i), d, n, &mut zm);
            f.eval(&bumped.point(p, i), y, &zm, &mut a);
            f.eval(&pt, y, &zm, &mut b);
            for j in 0..d {
                zeta[(i * paths + p) * d + j] = (a[j] - b[j]) / bump.h;
            }
            for k in 0..d {
                yp.copy_from_slice(y);
                yp[k] = y[k] + fd;
                f.eval(&pt, &yp, &zm, &mut a);
                yp[k] = y[k] - fd;
                f.eval(&pt, &yp, &zm, &mut b);
                for j in 0..d {
                    eta[((i * paths + p) * d + j) * d + k] = (a[j] - b[j]) / (2.0 * fd);
                }
            }
            for q in 0..d * n {
                zp.copy_from_slice(&zm);
                zp[q] = zm[q] + fd;
                f.eval(&pt, y, &zp, &mut a);
                zp[q] = zm[q] - fd;
                f.eval(&pt, y, &zp, &mut b);
                for j in 0..d {
                    theta[((i * paths + p) * d + j) * d * n + q] = (a[j] - b[j]) / (2.0 * fd);
                }
            }
            let s = (i * paths + p) * d;
            if zeta[s..s + d].iter().chain(&eta[s * d..(s + d) * d]).any(|v| !v.is_finite()) {
                return Err(LabError::Numerical(format!("non-finite driver derivative at path {p}, step {i}")));
            }
        }
    }
    Ok(LinearCoeffs::from_parts(bump.u_index, paths, d, n, zeta, eta, theta))
}

/// `(ξ(bumped) − ξ(base))/h` on every path.
pub fn terminal_derivative(xi: &TerminalFunctional, ens: &MartingaleEnsemble, bump: &BumpSpec) -> Result<Vec<f64>> {
    let d = xi.dim();
    let bumped = ens.bumped(bump.u_index, &bump.e, bump.h)?;
    let last = ens.steps();
    let mut out = vec![0.0; ens.paths() * d];
    let (mut a, mut b) = (vec![0.0; d], vec![0.0; d]);
    for p in 0..ens.paths() {
        xi.eval(&bumped.point(p, last), &mut a);
        xi.eval(&ens.point(p, last), &mut b);
        for j in 0..d {
            out[p * d + j] = (a[j] - b[j]) / bump.h;
        }
    }
    Ok(out)
}

/// Solves the linear BSDE with driver `ζ + ηU + θ·(Vm)` and terminal `Ξ` on
/// nodes `≥ u`. `U` is zero before the bump instant.
pub fn solve_differentiated(
    coeffs: &LinearCoeffs,
    xi_values: Vec<f64>,
    ens: &MartingaleEnsemble,
    basis: &RegressionBasis,
    opts: &SolveOptions,
) -> Result<DiscreteBsdeSolution> {
    let d = coeffs.d;
    if xi_values.len() != ens.paths() * d {
        return Err(LabError::InvalidInput("terminal derivative has the wrong length".into()));
    }
    let xi = TerminalFunctional::new(d, 0.0, move |pt, out| out.copy_from_slice(&xi_values[pt.path * d..(pt.path + 1) * d]));
    solve_from(ens, &xi, &coeffs.driver(), basis, opts, coeffs.u_index)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HedgeInstant {
    pub u_index: usize,
    pub direction: usize,
    pub time: f64,
    /// Root mean square of `|Q − Z_u e*|` over paths away from stopping.
    pub rms: f64,
    pub max: f64,
    pub mean_abs: f64,
    /// Paths whose martingale stops within one step of `u`, reported apart.
    pub near_stop_paths: usize,
    pub near_stop_rms: f64,
    pub pre_bump_zero: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaHedgeReport {
    pub h: f64,
    pub tolerance: f64,
    pub instants: Vec<HedgeInstant>,
    pub max_rms: f64,
    pub max_pathwise: f64,
    pub pass: bool,
    /// `(u, direction, path, quotient, Z projection, discrepancy)` rows for the first paths.
    #[serde(skip)]
    pub rows: Vec<(usize, usize, usize, f64, f64, f64)>,
}

impl DeltaHedgeReport {
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "u_index,direction,path,quotient,z_projection,discrepancy")?;
        for (u, e, p, q, z, dd) in &self.rows {
            writeln!(w, "{u},{e},{p},{q},{z},{dd}")?;
        }
        Ok(())
    }
}

/// Compares the quotient of `Y_u` with `Z_u e*` for every instant and
/// coordinate direction. Pass when the largest per-instant RMS discrepancy
/// is at most `max(10⁻², 20h)`.
pub fn delta_hedge_check<D: Driver + ?Sized>(
    problem: &Problem<'_, D>,
    ens: &MartingaleEnsemble,
    base: &DiscreteBsdeSolution,
    instants: &[usize],
    directions: &[usize],
    h: f64,
    csv_paths: usize,
) -> Result<DeltaHedgeReport> {
    let (d, n, paths) = (base.dim_y(), base.dim_m(), base.paths());
    let tolerance = (20.0 * h).max(1e-2);
    let mut out = Vec::new();
    let mut rows = Vec::new();
    let mut zproj = vec![0.0; d];
    for &u in instants {
        if u >= ens.steps() {
            return Err(LabError::InvalidInput(format!("hedge instant {u} must be before the last node")));
        }
        for &dir in directions {
            let bump = BumpSpec::coordinate(u, n, dir, h)?;
            let q = numeric_nabla(problem, ens, base, &bump, false)?;
            let pre_bump_zero = (0..u).all(|node| (0..paths).all(|p| q.y(p, node).iter().all(|v| *v == 0.0)));
            let (mut ss, mut max, mut sum_abs, mut count) = (0.0, 0.0f64, 0.0, 0usize);
            let (mut near_ss, mut near) = (0.0, 0usize);
            for p in 0..paths {
                let z = base.z(p, u);
                for j in 0..d {
                    zproj[j] = z[j * n + dir];
                }
                let disc = q.y(p, u).iter().zip(&zproj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                if near_stop(ens, p, u) {
                    near += 1;
                    near_ss += disc * disc;
                } else {
                    ss += disc * disc;
                    max = max.max(disc);
                    sum_abs += disc;
                    count += 1;
                }
                if p < csv_paths {
                    rows.push((u, dir, p, q.y(p, u)[0], zproj[0], disc));
                }
            }
            out.push(HedgeInstant {
                u_index: u,
                direction: dir,
                time: ens.grid().times()[u],
                rms: (ss / count.max(1) as f64).sqrt(),
                max,
                mean_abs: sum_abs / count.max(1) as f64,
                near_stop_paths: near,
                near_stop_rms: if near > 0 { (near_ss / near as f64).sqrt() } else { 0.0 },
                pre_bump_zero,
            });
        }
    }
    let max_rms = out.iter().map(|i| i.rms).fold(0.0, f64::max);
    let max_pathwise = out.iter().map(|i| i.max).fold(0.0, f64::max);
    let pass = max_rms <= tolerance && out.iter().all(|i| i.pre_bump_zero);
    Ok(DeltaHedgeReport { h, tolerance, instants: out, max_rms, max_pathwise, pass, rows })
}

/// Whether the (stopped) martingale is on the barrier by node `u + 1`.
fn near_stop(ens: &MartingaleEnsemble, p: usize, u: usize) -> bool {
    let node = (u + 1).min(ens.steps());
    matches!(ens.model(), crate::martingale::MartingaleModel::StoppedScaledBm { .. })
        && ens.value(p, node).iter().map(|v| v * v).sum::<f64>().sqrt() >= 1.0 - 1e-12
}

/// Fraction of nodes `≥ u` where `|U − quotient| ≤ tol`.
pub fn agreement_fraction(u: &DiscreteBsdeSolution, q: &Quotients, tol: f64) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for node in u.first_node()..u.nodes() {
        for p in 0..u.paths() {
            let diff = u.y(p, node).iter().zip(q.y(p, node)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            total += 1;
            if diff <= tol {
                hits += 1;
            }
        }
    }
    hits as f64 / total.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::{solve, FnDriver};
    use crate::martingale::{simulate, MartingaleModel, TimeGrid};

    fn bm(n: usize, steps: usize, paths: usize) -> MartingaleEnsemble {
        simulate(&MartingaleModel::StandardBm { dim: n }, &TimeGrid::uniform(1.0, steps).unwrap(), paths, 77).unwrap()
    }

    #[test]
    fn bump_spec_validation() {
        assert!(BumpSpec::new(1, vec![1.0, 1.0], 0.1).is_err());
        assert!(BumpSpec::new(1, vec![1.0], 0.0).is_err());
        assert!(BumpSpec::new(1, vec![0.6, 0.8], 0.1).is_ok());
        assert_eq!(BumpSpec::default_h(4.0), 2e-4);
    }

    #[test]
    fn linear_terminal_quotients() {
        let ens = bm(2, 8, 1000);
        let xi = TerminalFunctional::linear(vec![1.0, 0.0]);
        let f = FnDriver::zero(1);
        let basis = RegressionBasis::default();
        let opts = SolveOptions { picard_iters: 1, implicit_y: false };
        let base = solve(&ens, &xi, &f, &basis, &opts).unwrap();
        let problem = Problem { xi: &xi, driver: &f, basis: &basis, opts: &opts };
        for h in [1e-3, 0.5] {
            let bump = BumpSpec::coordinate(3, 2, 0, h).unwrap();
            let q = numeric_nabla(&problem, &ens, &base, &bump, false).unwrap();
            for p in 0..ens.paths() {
                for node in 0..3 {
                    assert_eq!(q.y(p, node)[0], 0.0);
                }
                for node in 3..=8 {
                    assert!((q.y(p, node)[0] - 1.0).abs() < 1e-6);
                }
            }
        }
        let rep = delta_hedge_check(&problem, &ens, &base, &[0, 4, 7], &[0, 1], 1e-3, 5).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(rep.max_rms < 1e-6);
        assert_eq!(rep.rows.len(), 3 * 2 * 5);
    }

    #[test]
    fn squared_terminal_quotient() {
        let ens = bm(1, 4, 200);
        let xi = TerminalFunctional::new(1, 0.0, |pt, o| o[0] = pt.current()[0].powi(2));
        let h = 1e-2;
        let bump = BumpSpec::coordinate(2, 1, 0, h).unwrap();
        let q = terminal_derivative(&xi, &ens, &bump).unwrap();
        for p in 0..ens.paths() {
            let m = ens.value(p, 4)[0];
            assert!((q[p] - (2.0 * m + h)).abs() < 1e-9);
        }
    }

    #[test]
    fn coefficients_of_simple_drivers() {
        let ens = bm(1, 6, 300);
        let xi = TerminalFunctional::linear(vec![1.0]);
        let alpha = 0.7;
        let f = FnDriver::new(1, Regularity::Lipschitz { cy: alpha, cz: 0.0 }, move |_, y, _, o| o[0] = alpha * y[0]);
        let basis = RegressionBasis::default();
        let base = solve(&ens, &xi, &f, &basis, &SolveOptions::default()).unwrap();
        let bump = BumpSpec::coordinate(2, 1, 0, 1e-4).unwrap();
        let c = linearized_coeffs(&f, &ens, &base, &bump, 1e-5).unwrap();
        for p in 0..ens.paths() {
            for step in 2..6 {
                assert_eq!(c.zeta(p, step)[0], 0.0);
                assert!((c.eta(p, step)[0] - alpha).abs() < 1e-8);
                assert!(c.theta(p, step)[0].abs() < 1e-12);
            }
        }

        // |z|²/2 inside its truncation radius: θ·w = ⟨z, w⟩.
        let quad = FnDriver::new(1, Regularity::Lipschitz { cy: 0.0, cz: 10.0 }, |_, _, z, o| {
            o[0] = 0.5 * z.iter().map(|v| v * v).sum::<f64>()
        });
        let ens2 = bm(2, 4, 100);
        let xi2 = TerminalFunctional::linear(vec![0.6, -0.3]);
        let base2 = solve(&ens2, &xi2, &quad, &basis, &SolveOptions::default()).unwrap();
        let c2 = linearized_coeffs(&quad, &ens2, &base2, &BumpSpec::coordinate(1, 2, 1, 1e-4).unwrap(), 1e-5).unwrap();
        let mut zm = [0.0; 2];
        for p in 0..ens2.paths() {
            times_m(base2.z(p, 2), ens2.vol(2), 1, 2, &mut zm);
            let th = c2.theta(p, 2);
            assert!((th[0] - zm[0]).abs() < 1e-8 && (th[1] - zm[1]).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_terminal_differentiated() {
        let ens = bm(1, 5, 200);
        let (paths, steps) = (ens.paths(), ens.steps());
        let c = LinearCoeffs::from_parts(
            2,
            paths,
            1,
            1,
            vec![0.0; steps * paths],
            vec![0.0; steps * paths],
            vec![0.0; steps * paths],
        );
        let basis = RegressionBasis::default().with_ridge(0.0);
        let sol = solve_differentiated(&c, vec![1.5; paths], &ens, &basis, &SolveOptions::default()).unwrap();
        for p in 0..paths {
            for node in 0..2 {
                assert_eq!(sol.y(p, node)[0], 0.0);
            }
            for node in 2..=5 {
                assert!((sol.y(p, node)[0] - 1.5).abs() < 1e-12);
            }
            for step in 2..5 {
                assert!(sol.z(p, step)[0].abs() < 1e-10);
            }
        }
    }
}
