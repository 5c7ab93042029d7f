//! Discrete checks of the stability estimate and of the comparison theorem.

use serde::{Deserialize, Serialize};

use super::driver::Driver;
use super::solver::{times_m, DiscreteBsdeSolution};
use crate::error::{LabError, Result};
use crate::martingale::MartingaleEnsemble;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// `sup_t E|δY_t|² + E Σ|δY_{i+1}|² ΔA_i + E Σ|δZ_i m_i|² ΔA_i`.
    pub measured: f64,
    pub bound: f64,
    pub ok: bool,
}

fn same_shape(a: &DiscreteBsdeSolution, b: &DiscreteBsdeSolution, ens: &MartingaleEnsemble) -> Result<()> {
    if a.paths() != b.paths()
        || a.nodes() != b.nodes()
        || a.dim_y() != b.dim_y()
        || a.paths() != ens.paths()
        || a.nodes() != ens.nodes()
    {
        return Err(LabError::InvalidInput("solutions were not computed on the same ensemble".into()));
    }
    Ok(())
}

/// `E|ξ − ξ̄|²` read off the terminal nodes.
pub fn terminal_gap_norm_sq(sol: &DiscreteBsdeSolution, sol_bar: &DiscreteBsdeSolution) -> f64 {
    let last = sol.nodes() - 1;
    (0..sol.paths()).map(|p| sq_dist(sol.y(p, last), sol_bar.y(p, last))).sum::<f64>() / sol.paths() as f64
}

/// Monte Carlo estimate of `‖f(Ȳ, Z̄m) − f̄(Ȳ, Z̄m)‖²_{H²}`.
pub fn driver_gap_norm_sq<F: Driver + ?Sized, G: Driver + ?Sized>(
    ens: &MartingaleEnsemble,
    sol_bar: &DiscreteBsdeSolution,
    f: &F,
    f_bar: &G,
) -> f64 {
    let (d, n) = (sol_bar.dim_y(), sol_bar.dim_m());
    let mut zm = vec![0.0; d * n];
    let (mut a, mut b) = (vec![0.0; d], vec![0.0; d]);
    let mut total = 0.0;
    for p in 0..ens.paths() {
        for i in 0..ens.steps() {
            let da = ens.d_clock(p, i);
            if da == 0.0 {
                continue;
            }
            let pt = ens.point(p, i);
            times_m(sol_bar.z(p, i), ens.vol(i), d, n, &mut zm);
            f.eval(&pt, sol_bar.y(p, i), &zm, &mut a);
            f_bar.eval(&pt, sol_bar.y(p, i), &zm, &mut b);
            total += sq_dist(&a, &b) * da;
        }
    }
    total / ens.paths() as f64
}

#[allow(clippy::too_many_arguments)]
pub fn stability_gap(
    ens: &MartingaleEnsemble,
    sol: &DiscreteBsdeSolution,
    sol_bar: &DiscreteBsdeSolution,
    delta_xi_norm_sq: f64,
    driver_gap_norm_sq: f64,
    k: f64,
    c_y: f64,
    c_z: f64,
) -> Result<StabilityReport> {
    same_shape(sol, sol_bar, ens)?;
    let (d, n) = (sol.dim_y(), sol.dim_m());
    let paths = sol.paths() as f64;
    let mut sup_marginal = 0.0f64;
    for node in 0..sol.nodes() {
        let m = (0..sol.paths()).map(|p| sq_dist(sol.y(p, node), sol_bar.y(p, node))).sum::<f64>() / paths;
        sup_marginal = sup_marginal.max(m);
    }
    let mut h2_y = 0.0;
    let mut h2_z = 0.0;
    let mut dz = vec![0.0; d * n];
    let mut dzm = vec![0.0; d * n];
    for p in 0..sol.paths() {
        for i in 0..ens.steps() {
            let da = ens.d_clock(p, i);
            h2_y += sq_dist(sol.y(p, i + 1), sol_bar.y(p, i + 1)) * da;
            for (o, (a, b)) in dz.iter_mut().zip(sol.z(p, i).iter().zip(sol_bar.z(p, i))) {
                *o = a - b;
            }
            times_m(&dz, ens.vol(i), d, n, &mut dzm);
            h2_z += dzm.iter().map(|v| v * v).sum::<f64>() * da;
        }
    }
    let measured = sup_marginal + (h2_y + h2_z) / paths;
    let bound = 2.0 * (k * (2.0 * c_y + 2.0 * c_z * c_z + 2.0)).exp() * (delta_xi_norm_sq + driver_gap_norm_sq);
    let ok = measured <= bound + 1e-8 + 1e-6 * bound;
    Ok(StabilityReport { measured, bound, ok })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub nodes: usize,
    pub violations: usize,
    pub fraction: f64,
    /// Largest `Y − Ȳ` observed.
    pub max_excess: f64,
    pub pass: bool,
}

/// Counts nodes with `Y > Ȳ + tol`. One-dimensional `Y` only.
pub fn check_comparison(sol: &DiscreteBsdeSolution, sol_bar: &DiscreteBsdeSolution, tol: f64) -> Result<ComparisonReport> {
    for s in [sol, sol_bar] {
        if s.dim_y() != 1 {
            return Err(LabError::UnsupportedDimension { expected: 1, got: s.dim_y() });
        }
    }
    if sol.paths() != sol_bar.paths() || sol.nodes() != sol_bar.nodes() {
        return Err(LabError::InvalidInput("solutions were not computed on the same ensemble".into()));
    }
    let mut violations = 0;
    let mut max_excess = f64::NEG_INFINITY;
    let mut nodes = 0;
    for p in 0..sol.paths() {
        for node in sol.first_node().max(sol_bar.first_node())..sol.nodes() {
            let excess = sol.y(p, node)[0] - sol_bar.y(p, node)[0];
            max_excess = max_excess.max(excess);
            nodes += 1;
            if excess > tol {
                violations += 1;
            }
        }
    }
    Ok(ComparisonReport {
        nodes,
        violations,
        fraction: violations as f64 / nodes.max(1) as f64,
        max_excess,
        pass: violations == 0,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
