//! Backward least-squares Monte Carlo scheme with Picard sweeps.
//!
//! At each step `Y_{i+1}` is regressed jointly on `φ(γ_{[0,t_i]})` and
//! `φ(γ_{[0,t_i]}) ΔM_i^l`. The first block gives `Ê_i[Y_{i+1}]`, the second
//! gives `Z_i` directly as the coefficient of the martingale increment.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::basis::{PreparedBasis, RegressionBasis, StepBasis, CHUNK};
use super::driver::{Driver, TerminalFunctional};
use crate::error::{LabError, Result};
use crate::martingale::MartingaleEnsemble;

/// Gram matrices whose condition number exceeds this are rejected.
const MAX_CONDITION: f64 = 1e14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveOptions {
    pub picard_iters: usize,
    pub implicit_y: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { picard_iters: 3, implicit_y: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionDiagnostics {
    pub step: usize,
    pub columns: usize,
    pub dropped: usize,
    pub condition: f64,
}

/// Fitted regression at one step; reusable on other ensembles of the same grid.
#[derive(Clone, Debug)]
pub struct StepMap {
    basis: StepBasis,
    /// `K × d`, coefficients of `Ê_i[Y_{i+1}]`.
    beta: Vec<f64>,
    /// `(K·n) × d`, coefficients of `Z_i`; block `l` multiplies `ΔM^l`.
    gamma: Vec<f64>,
}

impl StepMap {
    fn apply(&self, phi: &[f64], d: usize, n: usize, c: &mut [f64], z: &mut [f64]) {
        let k = phi.len();
        for j in 0..d {
            c[j] = (0..k).map(|a| phi[a] * self.beta[a * d + j]).sum();
            for l in 0..n {
                z[j * n + l] = (0..k).map(|a| phi[a] * self.gamma[(l * k + a) * d + j]).sum();
            }
        }
    }
}

/// Discrete solution on an ensemble. Stored node-major internally.
#[derive(Clone, Debug)]
pub struct DiscreteBsdeSolution {
    paths: usize,
    nodes: usize,
    d: usize,
    n: usize,
    first_node: usize,
    y: Vec<f64>,
    z: Vec<f64>,
    cond: Vec<f64>,
    pub picard_iterations: usize,
    /// Mean absolute one-step defect per step (last sweep).
    pub residual: Vec<f64>,
    /// Sum of per-step residuals after each sweep.
    pub sweep_residuals: Vec<f64>,
    pub diagnostics: Vec<RegressionDiagnostics>,
    maps: Vec<Option<StepMap>>,
    implicit_y: bool,
}

impl DiscreteBsdeSolution {
    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn dim_y(&self) -> usize {
        self.d
    }

    pub fn dim_m(&self) -> usize {
        self.n
    }

    /// First node the solution covers (0 unless solved on a window).
    pub fn first_node(&self) -> usize {
        self.first_node
    }

    pub fn y(&self, p: usize, node: usize) -> &[f64] {
        let s = (node * self.paths + p) * self.d;
        &self.y[s..s + self.d]
    }

    /// `Z_i`, row-major `d × n`.
    pub fn z(&self, p: usize, step: usize) -> &[f64] {
        let w = self.d * self.n;
        let s = (step * self.paths + p) * w;
        &self.z[s..s + w]
    }

    /// `Ê_i[Y_{i+1}]` on path `p`.
    pub fn conditional_expectation(&self, p: usize, step: usize) -> &[f64] {
        let s = (step * self.paths + p) * self.d;
        &self.cond[s..s + self.d]
    }

    pub fn y0_mean(&self) -> Vec<f64> {
        (0..self.d)
            .map(|j| (0..self.paths).map(|p| self.y(p, 0)[j]).sum::<f64>() / self.paths as f64)
            .collect()
    }

    pub(crate) fn y_node_mut(&mut self, node: usize) -> &mut [f64] {
        let w = self.paths * self.d;
        &mut self.y[node * w..(node + 1) * w]
    }

    pub(crate) fn z_step_mut(&mut self, step: usize) -> &mut [f64] {
        let w = self.paths * self.d * self.n;
        &mut self.z[step * w..(step + 1) * w]
    }

    /// CSV: path, time, `Y` components, `Z` entries (zeros at `T`), residual of the step.
    pub fn write_csv<W: std::io::Write>(&self, ens: &MartingaleEnsemble, mut w: W) -> Result<()> {
        write!(w, "path,time")?;
        for j in 1..=self.d {
            write!(w, ",y{j}")?;
        }
        for j in 1..=self.d {
            for l in 1..=self.n {
                write!(w, ",z{j}_{l}")?;
            }
        }
        writeln!(w, ",residual")?;
        let steps = self.nodes - 1;
        for p in 0..self.paths {
            for node in self.first_node..self.nodes {
                write!(w, "{},{}", p, ens.grid().times()[node])?;
                for v in self.y(p, node) {
                    write!(w, ",{v}")?;
                }
                if node < steps {
                    for v in self.z(p, node) {
                        write!(w, ",{v}")?;
                    }
                    writeln!(w, ",{}", self.residual[node])?;
                } else {
                    for _ in 0..self.d * self.n {
                        write!(w, ",0")?;
                    }
                    writeln!(w, ",0")?;
                }
            }
        }
        Ok(())
    }

    /// Applies the fitted per-step maps to a different ensemble on the same
    /// grid: `Y_N = ξ`, `Y_i = Ê-map + f(y*, Z-map·m) ΔA_i`.
    pub fn evaluate_on<D: Driver + ?Sized>(
        &self,
        ens: &MartingaleEnsemble,
        xi: &TerminalFunctional,
        f: &D,
        basis: &RegressionBasis,
    ) -> Result<DiscreteBsdeSolution> {
        if ens.nodes() != self.nodes || ens.dim() != self.n {
            return Err(LabError::InvalidInput("ensemble does not match the fitted grid/dimension".into()));
        }
        let prep = basis.prepare(ens.grid(), self.n)?;
        let mut out = DiscreteBsdeSolution::empty(ens, self.d, self.first_node, self.implicit_y);
        terminal_values(ens, xi, out.y_node_mut(self.nodes - 1));
        for i in (self.first_node..self.nodes - 1).rev() {
            let map = self.maps[i].as_ref().expect("fitted step map");
            let (cond, z) = apply_map(ens, &prep, map, i, self.d);
            let (y, res) = driver_update(ens, f, i, self.d, &cond, &z, None, None, self.implicit_y)?;
            out.y_node_mut(i).copy_from_slice(&y);
            out.z_step_mut(i).copy_from_slice(&z);
            let w = ens.paths() * self.d;
            out.cond[i * w..(i + 1) * w].copy_from_slice(&cond);
            out.residual[i] = res;
        }
        out.maps = self.maps.clone();
        out.picard_iterations = 1;
        Ok(out)
    }

    pub(crate) fn empty(ens: &MartingaleEnsemble, d: usize, first_node: usize, implicit_y: bool) -> Self {
        let p = ens.paths();
        let nodes = ens.nodes();
        let n = ens.dim();
        Self {
            paths: p,
            nodes,
            d,
            n,
            first_node,
            y: vec![0.0; nodes * p * d],
            z: vec![0.0; (nodes - 1) * p * d * n],
            cond: vec![0.0; (nodes - 1) * p * d],
            picard_iterations: 0,
            residual: vec![0.0; nodes - 1],
            sweep_residuals: Vec::new(),
            diagnostics: Vec::new(),
            maps: vec![None; nodes - 1],
            implicit_y,
        }
    }
}

/// Solve BSDE(ξ, f) on the whole grid.
pub fn solve<D: Driver + ?Sized>(
    ens: &MartingaleEnsemble,
    xi: &TerminalFunctional,
    f: &D,
    basis: &RegressionBasis,
    opts: &SolveOptions,
) -> Result<DiscreteBsdeSolution> {
    solve_from(ens, xi, f, basis, opts, 0)
}

/// Solve only on nodes `first_node..=N`; earlier nodes are left at zero.
pub fn solve_from<D: Driver + ?Sized>(
    ens: &MartingaleEnsemble,
    xi: &TerminalFunctional,
    f: &D,
    basis: &RegressionBasis,
    opts: &SolveOptions,
    first_node: usize,
) -> Result<DiscreteBsdeSolution> {
    if !f.regularity().is_lipschitz() {
        return Err(LabError::InvalidInput(
            "driver is only locally Lipschitz; truncate it before solving".into(),
        ));
    }
    if xi.dim() != f.dim() {
        return Err(LabError::InvalidInput(format!(
            "terminal dimension {} differs from driver dimension {}",
            xi.dim(),
            f.dim()
        )));
    }
    if first_node >= ens.nodes() {
        return Err(LabError::InvalidInput(format!("first node {first_node} outside grid")));
    }
    let d = f.dim();
    let steps = ens.steps();
    let prep = basis.prepare(ens.grid(), ens.dim())?;
    let sweeps = opts.picard_iters.max(1);

    let mut sol = DiscreteBsdeSolution::empty(ens, d, first_node, opts.implicit_y);
    terminal_values(ens, xi, sol.y_node_mut(steps));
    check_finite(sol.y_node_mut(steps), steps)?;

    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    for sweep in 0..sweeps {
        let mut diagnostics = Vec::new();
        for i in (first_node..steps).rev() {
            let target = sol.y_node_mut(i + 1).to_vec();
            let (map, diag) = regress(ens, &prep, i, &target, d)?;
            let (cond, z) = apply_map(ens, &prep, &map, i, d);
            let (prev_y, prev_z) = match &prev {
                Some((py, pz)) => {
                    let wy = ens.paths() * d;
                    let wz = wy * ens.dim();
                    (Some(&py[i * wy..(i + 1) * wy]), Some(&pz[i * wz..(i + 1) * wz]))
                }
                None => (None, None),
            };
            let implicit = opts.implicit_y && prev.is_none();
            let (y, res) = driver_update(ens, f, i, d, &cond, &z, prev_y, prev_z, implicit)?;
            sol.y_node_mut(i).copy_from_slice(&y);
            sol.z_step_mut(i).copy_from_slice(&z);
            let w = ens.paths() * d;
            sol.cond[i * w..(i + 1) * w].copy_from_slice(&cond);
            sol.residual[i] = res;
            sol.maps[i] = Some(map);
            diagnostics.push(diag);
        }
        diagnostics.reverse();
        sol.diagnostics = diagnostics;
        sol.sweep_residuals.push(sol.residual[first_node..].iter().sum());
        sol.picard_iterations = sweep + 1;
        prev = Some((sol.y.clone(), sol.z.clone()));
    }
    Ok(sol)
}

fn terminal_values(ens: &MartingaleEnsemble, xi: &TerminalFunctional, out: &mut [f64]) {
    let d = xi.dim();
    let last = ens.steps();
    out.par_chunks_mut(d).enumerate().for_each(|(p, o)| xi.eval(&ens.point(p, last), o));
}

fn check_finite(v: &[f64], step: usize) -> Result<()> {
    if let Some(k) = v.iter().position(|x| !x.is_finite()) {
        return Err(LabError::Divergence { step, detail: format!("non-finite value at flat index {k}") });
    }
    Ok(())
}

/// Joint least squares of `target` on `[φ, φΔM^1, ..., φΔM^n]`.
fn regress(
    ens: &MartingaleEnsemble,
    prep: &PreparedBasis,
    step: usize,
    target: &[f64],
    d: usize,
) -> Result<(StepMap, RegressionDiagnostics)> {
    let sb = prep.fit_step(ens, step);
    let k = sb.len();
    let n = ens.dim();
    let cols = k * (1 + n);
    let paths = ens.paths();
    let raw_len = prep.raw_len();

    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..paths)
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut gram = vec![0.0; cols * cols];
            let mut rhs = vec![0.0; cols * d];
            let mut raw = Vec::with_capacity(raw_len);
            let mut row = vec![0.0; cols];
            for &p in chunk {
                prep.raw(&ens.point(p, step), &mut raw);
                sb.eval(&raw, &mut row[..k]);
                let (m0, m1) = (ens.value(p, step), ens.value(p, step + 1));
                for l in 0..n {
                    let dm = m1[l] - m0[l];
                    for a in 0..k {
                        row[(l + 1) * k + a] = row[a] * dm;
                    }
                }
                for a in 0..cols {
                    let ra = row[a];
                    if ra == 0.0 {
                        continue;
                    }
                    for b in a..cols {
                        gram[a * cols + b] += ra * row[b];
                    }
                    for j in 0..d {
                        rhs[a * d + j] += ra * target[p * d + j];
                    }
                }
            }
            (gram, rhs)
        })
        .collect();
    let mut gram = vec![0.0; cols * cols];
    let mut rhs = vec![0.0; cols * d];
    for (g, r) in &partials {
        for (a, b) in gram.iter_mut().zip(g) {
            *a += b;
        }
        for (a, b) in rhs.iter_mut().zip(r) {
            *a += b;
        }
    }
    let scale = 1.0 / paths as f64;
    let max_diag = (0..cols).map(|a| gram[a * cols + a]).fold(0.0, f64::max) * scale;
    let kept: Vec<usize> = (0..cols)
        .filter(|&a| gram[a * cols + a] * scale > 1e-16 * max_diag.max(f64::MIN_POSITIVE))
        .collect();
    let m = kept.len();
    let mut g = DMatrix::<f64>::zeros(m, m);
    for (ia, &a) in kept.iter().enumerate() {
        for (ib, &b) in kept.iter().enumerate() {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            g[(ia, ib)] = gram[lo * cols + hi] * scale;
        }
    }
    // Ridge relative to each column's own scale, so it does not favour the small ΔM columns.
    for ia in 0..m {
        g[(ia, ia)] *= 1.0 + prep.basis.ridge;
    }
    let eig = SymmetricEigen::new(g.clone()).eigenvalues;
    let lmax = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lmin = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(LabError::Regression {
            step,
            detail: format!("Gram condition number {condition:.3e} with ridge {}", prep.basis.ridge),
        });
    }
    let chol = g.cholesky().ok_or_else(|| LabError::Regression {
        step,
        detail: "Gram matrix not positive definite".into(),
    })?;
    let mut coef = vec![0.0; cols * d];
    for j in 0..d {
        let b = DVector::from_iterator(m, kept.iter().map(|&a| rhs[a * d + j] * scale));
        let x = chol.solve(&b);
        for (ia, &a) in kept.iter().enumerate() {
            coef[a * d + j] = x[ia];
        }
    }
    let beta = coef[..k * d].to_vec();
    let gamma = coef[k * d..].to_vec();
    Ok((
        StepMap { basis: sb, beta, gamma },
        RegressionDiagnostics { step, columns: cols, dropped: cols - m, condition },
    ))
}

/// `(Ê_i Y_{i+1}, Z_i)` for every path of `ens`.
fn apply_map(
    ens: &MartingaleEnsemble,
    prep: &PreparedBasis,
    map: &StepMap,
    step: usize,
    d: usize,
) -> (Vec<f64>, Vec<f64>) {
    let n = ens.dim();
    let paths = ens.paths();
    let mut cond = vec![0.0; paths * d];
    let mut z = vec![0.0; paths * d * n];
    cond.par_chunks_mut(d).zip(z.par_chunks_mut(d * n)).enumerate().for_each_init(
        || (Vec::new(), vec![0.0; map.basis.len()]),
        |(raw, phi), (p, (c, zz))| {
            prep.raw(&ens.point(p, step), raw);
            map.basis.eval(raw, phi);
            map.apply(phi, d, n, c, zz);
        },
    );
    (cond, z)
}

/// `Y_i = c + f(y*, Z m) ΔA_i`. With `prev_*` the driver is frozen at the
/// previous sweep. Returns `Y_i` and the mean one-step defect.
#[allow(clippy::too_many_arguments)]
fn driver_update<D: Driver + ?Sized>(
    ens: &MartingaleEnsemble,
    f: &D,
    step: usize,
    d: usize,
    cond: &[f64],
    z: &[f64],
    prev_y: Option<&[f64]>,
    prev_z: Option<&[f64]>,
    implicit: bool,
) -> Result<(Vec<f64>, f64)> {
    let n = ens.dim();
    let m = ens.vol(step).clone();
    let paths = ens.paths();
    let mut y = vec![0.0; paths * d];
    let defects: Vec<f64> = y
        .par_chunks_mut(d)
        .enumerate()
        .map(|(p, yp)| {
            let pt = ens.point(p, step);
            let da = ens.d_clock(p, step);
            let c = &cond[p * d..(p + 1) * d];
            let zp = &z[p * d * n..(p + 1) * d * n];
            let mut zm = vec![0.0; d * n];
            times_m(zp, &m, d, n, &mut zm);
            let mut fv = vec![0.0; d];
            match (prev_y, prev_z) {
                (Some(py), Some(pz)) => {
                    let mut pzm = vec![0.0; d * n];
                    times_m(&pz[p * d * n..(p + 1) * d * n], &m, d, n, &mut pzm);
                    f.eval(&pt, &py[p * d..(p + 1) * d], &pzm, &mut fv);
                    for j in 0..d {
                        yp[j] = c[j] + fv[j] * da;
                    }
                }
                _ => {
                    f.eval(&pt, c, &zm, &mut fv);
                    for j in 0..d {
                        yp[j] = c[j] + fv[j] * da;
                    }
                    if implicit && da > 0.0 {
                        for _ in 0..20 {
                            f.eval(&pt, yp, &zm, &mut fv);
                            let mut change = 0.0f64;
                            for j in 0..d {
                                let next = c[j] + fv[j] * da;
                                change = change.max((next - yp[j]).abs());
                                yp[j] = next;
                            }
                            if change <= 1e-10 {
                                break;
                            }
                        }
                    }
                }
            }
            f.eval(&pt, yp, &zm, &mut fv);
            (0..d).map(|j| (yp[j] - c[j] - fv[j] * da).powi(2)).sum::<f64>().sqrt()
        })
        .collect();
    check_finite(&y, step)?;
    let residual = defects.iter().sum::<f64>() / paths as f64;
    if !residual.is_finite() {
        return Err(LabError::Divergence { step, detail: "non-finite residual".into() });
    }
    Ok((y, residual))
}

/// `Z m` for `Z` row-major `d × n`.
pub(crate) fn times_m(z: &[f64], m: &DMatrix<f64>, d: usize, n: usize, out: &mut [f64]) {
    for j in 0..d {
        for l in 0..n {
            out[j * n + l] = (0..n).map(|k| z[j * n + k] * m[(k, l)]).sum();
        }
    }
}
