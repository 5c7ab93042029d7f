//! Driving martingales: time grids, the two built-in models, seeded path
//! ensembles with their quadratic-variation clock `A = tr[M,M]` and
//! volatility factor `m`, plus the path bump and coarse-partition utilities.

use std::f64::consts::FRAC_1_SQRT_2;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Barrier on `|W_t - W_{T-δ}|` for the stopped model; after the `√2`
/// scaling the martingale itself stops on the unit sphere.
pub const STOP_BARRIER: f64 = FRAC_1_SQRT_2;

/// Norm at which a stopped path counts as frozen on the unit sphere.
const STOP_NORM: f64 = 1.0 - 1e-12;

const BINARY_MAGIC: &[u8; 8] = b"BSDEENS1";

/// Strictly increasing instants `0 = t_0 < ... < t_N = T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(LabError::InvalidInput(format!(
                "time grid needs at least 2 points, got {}",
                times.len()
            )));
        }
        if times[0] != 0.0 {
            return Err(LabError::InvalidInput(format!(
                "time grid must start at 0, starts at {}",
                times[0]
            )));
        }
        if let Some(w) = times.windows(2).position(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
            return Err(LabError::InvalidInput(format!(
                "time grid not strictly increasing at index {}",
                w + 1
            )));
        }
        Ok(Self { times })
    }

    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || steps == 0 {
            return Err(LabError::InvalidInput(format!(
                "uniform grid needs T > 0 and at least one step (T = {horizon}, steps = {steps})"
            )));
        }
        let times = (0..=steps)
            .map(|i| if i == steps { horizon } else { horizon * i as f64 / steps as f64 })
            .collect();
        Self::new(times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Number of nodes (`N + 1`).
    pub fn nodes(&self) -> usize {
        self.times.len()
    }

    /// Number of steps (`N`).
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn dt(&self, step: usize) -> f64 {
        self.times[step + 1] - self.times[step]
    }

    /// Index of the node at time `t`, if `t` is a grid instant up to a
    /// relative tolerance.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let tol = 1e-10 * self.horizon();
        let idx = self.times.partition_point(|&s| s < t - tol);
        (idx < self.times.len() && (self.times[idx] - t).abs() <= tol).then_some(idx)
    }
}

/// The built-in driving martingales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MartingaleModel {
    /// `n`-dimensional standard Brownian motion: `m = I/√n`, `A_t = n t`.
    StandardBm { dim: usize },
    /// Two-dimensional `M_t = √2 (W_{t∧τ} - W_{T-δ})` on `[T-δ, T]`, zero before,
    /// stopped when `|W - W_{T-δ}|` reaches `1/√2`.
    StoppedScaledBm { horizon: f64, delta: f64 },
}

impl MartingaleModel {
    pub fn dim(&self) -> usize {
        match self {
            Self::StandardBm { dim } => *dim,
            Self::StoppedScaledBm { .. } => 2,
        }
    }

    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        match *self {
            Self::StandardBm { dim } => {
                if dim == 0 {
                    return Err(LabError::Config("Brownian dimension must be at least 1".into()));
                }
            }
            Self::StoppedScaledBm { horizon, delta } => {
                if !(delta > 0.0) {
                    return Err(LabError::Config(format!("activation window δ must be > 0, got {delta}")));
                }
                if delta > horizon {
                    return Err(LabError::Config(format!(
                        "activation window δ = {delta} exceeds horizon T = {horizon}"
                    )));
                }
                if (grid.horizon() - horizon).abs() > 1e-12 * horizon.max(1.0) {
                    return Err(LabError::Config(format!(
                        "model horizon {horizon} does not match grid horizon {}",
                        grid.horizon()
                    )));
                }
            }
        }
        Ok(())
    }

    /// `K`, the almost-sure bound on `A_T`.
    pub fn clock_bound(&self, grid: &TimeGrid) -> f64 {
        match *self {
            Self::StandardBm { dim } => dim as f64 * grid.horizon(),
            Self::StoppedScaledBm { delta, .. } => 4.0 * delta,
        }
    }

    /// The (deterministic) volatility factor `m`.
    pub fn volatility(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::identity(n, n) / (n as f64).sqrt()
    }

    /// `dA/dt` while the martingale is running.
    pub fn clock_rate(&self) -> f64 {
        match self {
            Self::StandardBm { dim } => *dim as f64,
            Self::StoppedScaledBm { .. } => 4.0,
        }
    }

    fn activation(&self) -> f64 {
        match *self {
            Self::StandardBm { .. } => 0.0,
            Self::StoppedScaledBm { horizon, delta } => horizon - delta,
        }
    }

    fn is_stopped_model(&self) -> bool {
        matches!(self, Self::StoppedScaledBm { .. })
    }

    /// Calendar time during step `i` in which the martingale can move.
    fn active_dt(&self, grid: &TimeGrid, step: usize) -> f64 {
        let t0 = grid.times()[step].max(self.activation());
        (grid.times()[step + 1] - t0).max(0.0)
    }

    /// Variance of each noise component over step `i` per unit Gaussian.
    fn noise_scale(&self, grid: &TimeGrid, step: usize) -> f64 {
        let dt = self.active_dt(grid, step);
        match self {
            Self::StandardBm { .. } => dt.sqrt(),
            Self::StoppedScaledBm { .. } => (2.0 * dt).sqrt(),
        }
    }
}

/// A read-only view of one path up to (and including) a node.
#[derive(Clone, Copy, Debug)]
pub struct PathPoint<'a> {
    pub path: usize,
    pub step: usize,
    pub time: f64,
    dim: usize,
    prefix: &'a [f64],
}

impl<'a> PathPoint<'a> {
    /// `prefix` holds nodes `0..=step`, `dim` values each.
    pub fn new(path: usize, step: usize, time: f64, dim: usize, prefix: &'a [f64]) -> Self {
        debug_assert_eq!(prefix.len(), (step + 1) * dim);
        Self { path, step, time, dim, prefix }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn current(&self) -> &'a [f64] {
        self.at(self.step)
    }

    pub fn at(&self, node: usize) -> &'a [f64] {
        &self.prefix[node * self.dim..(node + 1) * self.dim]
    }

    pub fn prefix(&self) -> &'a [f64] {
        self.prefix
    }
}

/// A sampled ensemble of `P` paths on a grid. Immutable once built.
#[derive(Clone, Debug)]
pub struct MartingaleEnsemble {
    model: MartingaleModel,
    grid: TimeGrid,
    paths: usize,
    seed: u64,
    /// `P × (N+1) × n`, row-major.
    values: Vec<f64>,
    /// `P × N` clock increments.
    d_clock: Vec<f64>,
    /// `P × (N+1)` cumulative clock.
    clock: Vec<f64>,
    vol: Vec<DMatrix<f64>>,
}

/// Sample `paths` trajectories of `model` on `grid`. Path `p` depends only on
/// `(seed, p)`, so ensembles are reproducible and independent of thread count.
pub fn simulate(
    model: &MartingaleModel,
    grid: &TimeGrid,
    paths: usize,
    seed: u64,
) -> Result<MartingaleEnsemble> {
    build_ensemble(model, grid, paths, seed, None)
}

fn build_ensemble(
    model: &MartingaleModel,
    grid: &TimeGrid,
    paths: usize,
    seed: u64,
    bump: Option<(usize, &[f64], f64)>,
) -> Result<MartingaleEnsemble> {
    if paths == 0 {
        return Err(LabError::InvalidInput("path count must be at least 1".into()));
    }
    model.validate(grid)?;
    let n = model.dim();
    let nodes = grid.nodes();
    let steps = grid.steps();
    let scales: Vec<f64> = (0..steps).map(|i| model.noise_scale(grid, i)).collect();

    let mut values = vec![0.0; paths * nodes * n];
    let mut d_clock = vec![0.0; paths * steps];
    values
        .par_chunks_mut(nodes * n)
        .zip(d_clock.par_chunks_mut(steps))
        .enumerate()
        .for_each(|(p, (vals, da))| {
            let mut rng = path_rng(seed, p);
            let mut noise = vec![0.0; steps * n];
            for x in noise.iter_mut() {
                *x = StandardNormal.sample(&mut rng);
            }
            fill_path(model, grid, &scales, &noise, bump, vals, da);
        });

    Ok(assemble(model.clone(), grid.clone(), paths, seed, values, d_clock))
}

fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

fn fill_path(
    model: &MartingaleModel,
    grid: &TimeGrid,
    scales: &[f64],
    noise: &[f64],
    bump: Option<(usize, &[f64], f64)>,
    vals: &mut [f64],
    da: &mut [f64],
) {
    let n = model.dim();
    let stopped_model = model.is_stopped_model();
    let rate = model.clock_rate();
    let mut cur = vec![0.0; n];
    let mut frozen = false;
    let apply_bump = |node: usize, cur: &mut [f64], frozen: &mut bool| {
        if let Some((u, e, h)) = bump {
            if node == u && h != 0.0 {
                for (c, ek) in cur.iter_mut().zip(e) {
                    *c += h * ek;
                }
                if stopped_model {
                    project_if_outside(cur, frozen);
                }
            }
        }
    };
    apply_bump(0, &mut cur, &mut frozen);
    vals[..n].copy_from_slice(&cur);
    for i in 0..grid.steps() {
        let active = model.active_dt(grid, i);
        if active > 0.0 && !frozen {
            for k in 0..n {
                cur[k] += scales[i] * noise[i * n + k];
            }
            da[i] = rate * active;
            if stopped_model {
                project_if_outside(&mut cur, &mut frozen);
            }
        } else {
            da[i] = 0.0;
        }
        // A bump is a shift of the path functional, it happens after the step's noise.
        if bump.is_some_and(|(u, _, _)| u == i + 1) {
            apply_bump(i + 1, &mut cur, &mut frozen);
        }
        vals[(i + 1) * n..(i + 2) * n].copy_from_slice(&cur);
    }
}

fn project_if_outside(cur: &mut [f64], frozen: &mut bool) {
    let norm = cur.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm >= STOP_NORM {
        for c in cur.iter_mut() {
            *c /= norm;
        }
        *frozen = true;
    }
}

fn assemble(
    model: MartingaleModel,
    grid: TimeGrid,
    paths: usize,
    seed: u64,
    values: Vec<f64>,
    d_clock: Vec<f64>,
) -> MartingaleEnsemble {
    let steps = grid.steps();
    let nodes = grid.nodes();
    let mut clock = vec![0.0; paths * nodes];
    for p in 0..paths {
        let mut acc = 0.0;
        for i in 0..steps {
            acc += d_clock[p * steps + i];
            clock[p * nodes + i + 1] = acc;
        }
    }
    let m = model.volatility();
    let vol = vec![m; steps];
    MartingaleEnsemble { model, grid, paths, seed, values, d_clock, clock, vol }
}

impl MartingaleEnsemble {
    pub fn model(&self) -> &MartingaleModel {
        &self.model
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn nodes(&self) -> usize {
        self.grid.nodes()
    }

    /// `K` for this ensemble's model and grid.
    pub fn clock_bound(&self) -> f64 {
        self.model.clock_bound(&self.grid)
    }

    /// Whole trajectory of path `p`, `(N+1) × n`.
    pub fn path_values(&self, p: usize) -> &[f64] {
        let len = self.nodes() * self.dim();
        &self.values[p * len..(p + 1) * len]
    }

    pub fn value(&self, p: usize, node: usize) -> &[f64] {
        let n = self.dim();
        let start = (p * self.nodes() + node) * n;
        &self.values[start..start + n]
    }

    pub fn increment(&self, p: usize, step: usize) -> Vec<f64> {
        let a = self.value(p, step);
        let b = self.value(p, step + 1);
        b.iter().zip(a).map(|(x, y)| x - y).collect()
    }

    pub fn d_clock(&self, p: usize, step: usize) -> f64 {
        self.d_clock[p * self.steps() + step]
    }

    /// Cumulative clock `A_{t_i}` on path `p`.
    pub fn clock(&self, p: usize, node: usize) -> f64 {
        self.clock[p * self.nodes() + node]
    }

    pub fn vol(&self, step: usize) -> &DMatrix<f64> {
        &self.vol[step]
    }

    pub fn point(&self, p: usize, node: usize) -> PathPoint<'_> {
        let n = self.dim();
        let path = self.path_values(p);
        PathPoint::new(p, node, self.grid.times()[node], n, &path[..(node + 1) * n])
    }

    /// Same noise, shifted by `h·e` from node `u` on. For the stopped model the
    /// stopping rule is re-applied to the shifted trajectory.
    pub fn bumped(&self, u_index: usize, e: &[f64], h: f64) -> Result<MartingaleEnsemble> {
        if u_index >= self.nodes() {
            return Err(LabError::InvalidInput(format!(
                "bump index {u_index} outside grid with {} nodes",
                self.nodes()
            )));
        }
        if e.len() != self.dim() {
            return Err(LabError::InvalidInput(format!(
                "bump direction has length {}, martingale dimension is {}",
                e.len(),
                self.dim()
            )));
        }
        if !self.model.is_stopped_model() {
            // Additive shift; no need to regenerate noise.
            let mut out = self.clone();
            let n = self.dim();
            let nodes = self.nodes();
            out.values.par_chunks_mut(nodes * n).for_each(|vals| {
                for node in u_index..nodes {
                    for k in 0..n {
                        vals[node * n + k] += h * e[k];
                    }
                }
            });
            return Ok(out);
        }
        build_ensemble(&self.model, &self.grid, self.paths, self.seed, Some((u_index, e, h)))
    }

    /// CSV with one row per path-time node: path id, time, `M` components, cumulative `A`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.dim();
        write!(w, "path,time")?;
        for k in 1..=n {
            write!(w, ",m{k}")?;
        }
        writeln!(w, ",clock")?;
        for p in 0..self.paths {
            for node in 0..self.nodes() {
                write!(w, "{},{}", p, self.grid.times()[node])?;
                for x in self.value(p, node) {
                    write!(w, ",{x}")?;
                }
                writeln!(w, ",{}", self.clock(p, node))?;
            }
        }
        Ok(())
    }

    /// Compact little-endian dump that [`MartingaleEnsemble::read_binary`] re-ingests.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BINARY_MAGIC)?;
        match self.model {
            MartingaleModel::StandardBm { dim } => {
                w.write_all(&[0u8])?;
                w.write_all(&(dim as u64).to_le_bytes())?;
            }
            MartingaleModel::StoppedScaledBm { horizon, delta } => {
                w.write_all(&[1u8])?;
                w.write_all(&horizon.to_le_bytes())?;
                w.write_all(&delta.to_le_bytes())?;
            }
        }
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.paths as u64).to_le_bytes())?;
        w.write_all(&(self.nodes() as u64).to_le_bytes())?;
        for t in self.grid.times() {
            w.write_all(&t.to_le_bytes())?;
        }
        for x in &self.values {
            w.write_all(&x.to_le_bytes())?;
        }
        for x in &self.d_clock {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(LabError::InvalidInput("not an ensemble dump (bad magic)".into()));
        }
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let model = match tag[0] {
            0 => MartingaleModel::StandardBm { dim: read_u64(&mut r)? as usize },
            1 => MartingaleModel::StoppedScaledBm { horizon: read_f64(&mut r)?, delta: read_f64(&mut r)? },
            t => return Err(LabError::InvalidInput(format!("unknown model tag {t}"))),
        };
        let seed = read_u64(&mut r)?;
        let paths = read_u64(&mut r)? as usize;
        let nodes = read_u64(&mut r)? as usize;
        let times = (0..nodes).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        let grid = TimeGrid::new(times)?;
        model.validate(&grid)?;
        let n = model.dim();
        let values = (0..paths * nodes * n).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        let d_clock = (0..paths * (nodes - 1)).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        Ok(assemble(model, grid, paths, seed, values, d_clock))
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Per-step clock increments and volatility factors of a single path
/// (`path` is `(N+1) × n`, row-major).
pub fn clock_and_volatility(
    model: &MartingaleModel,
    grid: &TimeGrid,
    path: &[f64],
) -> (Vec<f64>, Vec<DMatrix<f64>>) {
    let n = model.dim();
    let m = model.volatility();
    let rate = model.clock_rate();
    let d_clock = (0..grid.steps())
        .map(|i| {
            let active = model.active_dt(grid, i);
            let stopped = model.is_stopped_model() && {
                let x = &path[i * n..(i + 1) * n];
                x.iter().map(|v| v * v).sum::<f64>().sqrt() >= STOP_NORM
            };
            if stopped {
                0.0
            } else {
                rate * active
            }
        })
        .collect();
    (d_clock, vec![m; grid.steps()])
}

/// `path + h·e*·1_{[t_u, T]}` for a single `(N+1) × n` path.
pub fn bump(path: &[f64], dim: usize, u_index: usize, e: &[f64], h: f64) -> Vec<f64> {
    let mut out = path.to_vec();
    for node in u_index..path.len() / dim {
        for k in 0..dim {
            out[node * dim + k] += h * e[k];
        }
    }
    out
}

/// `L^{(k)} ∘ P^{(k)}` on the uniform partition `t_j = jT/k`: the
/// right-continuous step path whose value on `[t_j, t_{j+1})` is `γ_{t_j} − γ_0`.
pub fn grid_restrict(path: &[f64], dim: usize, grid: &TimeGrid, k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(LabError::Config("partition size must be at least 1".into()));
    }
    let horizon = grid.horizon();
    let partition: Vec<f64> = (0..=k).map(|j| horizon * j as f64 / k as f64).collect();
    grid_restrict_partition(path, dim, grid, &partition)
}

/// [`grid_restrict`] for an arbitrary partition `0 = s_0 ≤ ... ≤ s_k = T`
/// made of grid instants.
pub fn grid_restrict_partition(
    path: &[f64],
    dim: usize,
    grid: &TimeGrid,
    partition: &[f64],
) -> Result<Vec<f64>> {
    let idx = partition
        .iter()
        .map(|&s| {
            grid.index_of(s)
                .ok_or_else(|| LabError::Config(format!("partition instant {s} is not a grid point")))
        })
        .collect::<Result<Vec<_>>>()?;
    if idx.first() != Some(&0) || idx.last() != Some(&grid.steps()) {
        return Err(LabError::Config("partition must start at 0 and end at T".into()));
    }
    let origin = &path[..dim];
    let mut out = vec![0.0; path.len()];
    let mut j = 0;
    for node in 0..grid.nodes() {
        while j + 1 < idx.len() && idx[j + 1] <= node {
            j += 1;
        }
        let anchor = idx[j];
        for c in 0..dim {
            out[node * dim + c] = path[anchor * dim + c] - origin[c];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(vec![0.0]).is_err());
        assert!(TimeGrid::new(vec![0.0, 0.5, 0.4, 1.0]).is_err());
        assert!(TimeGrid::new(vec![0.1, 1.0]).is_err());
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        assert_eq!(g.times(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(g.index_of(0.5), Some(2));
        assert_eq!(g.index_of(0.3), None);
    }

    #[test]
    fn simulate_rejects_bad_inputs() {
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        let m = MartingaleModel::StandardBm { dim: 1 };
        assert!(matches!(simulate(&m, &g, 0, 1), Err(LabError::InvalidInput(_))));
        let stopped = MartingaleModel::StoppedScaledBm { horizon: 1.0, delta: 1.5 };
        assert!(matches!(simulate(&stopped, &g, 4, 1), Err(LabError::Config(_))));
    }

    #[test]
    fn starts_at_zero() {
        let g = TimeGrid::uniform(1.0, 10).unwrap();
        let ens = simulate(&MartingaleModel::StandardBm { dim: 2 }, &g, 50, 3).unwrap();
        for p in 0..50 {
            assert_eq!(ens.value(p, 0), &[0.0, 0.0]);
        }
    }

    #[test]
    fn path_stream_independent_of_path_count() {
        let g = TimeGrid::uniform(1.0, 16).unwrap();
        let m = MartingaleModel::StandardBm { dim: 2 };
        let small = simulate(&m, &g, 3, 11).unwrap();
        let large = simulate(&m, &g, 40, 11).unwrap();
        for p in 0..3 {
            assert_eq!(small.path_values(p), large.path_values(p));
        }
    }

    #[test]
    fn terminal_mean_is_zero() {
        let g = TimeGrid::uniform(1.0, 8).unwrap();
        let paths = 100_000;
        let ens = simulate(&MartingaleModel::StandardBm { dim: 1 }, &g, paths, 2024).unwrap();
        let mean = (0..paths).map(|p| ens.value(p, 8)[0]).sum::<f64>() / paths as f64;
        assert!(mean.abs() <= 3.0 / (paths as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn standard_clock_and_volatility() {
        let g = TimeGrid::uniform(1.0, 10).unwrap();
        let model = MartingaleModel::StandardBm { dim: 2 };
        let ens = simulate(&model, &g, 2, 5).unwrap();
        let (da, m) = clock_and_volatility(&model, &g, ens.path_values(0));
        for (a, mi) in da.iter().zip(&m) {
            assert!((a - 0.2).abs() < 1e-12);
            assert!((mi - DMatrix::identity(2, 2) / 2f64.sqrt()).norm() < 1e-15);
            assert!((mi.norm() - 1.0).abs() < 1e-12);
        }
        assert!((ens.clock(0, 10) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn stopped_paths_stay_in_unit_ball_and_freeze() {
        let g = TimeGrid::uniform(1.0, 200).unwrap();
        let model = MartingaleModel::StoppedScaledBm { horizon: 1.0, delta: 0.5 };
        let ens = simulate(&model, &g, 2000, 9).unwrap();
        let mut stopped_paths = 0;
        for p in 0..ens.paths() {
            let mut frozen_at = None;
            for node in 0..ens.nodes() {
                let x = ens.value(p, node);
                assert!(norm(x) <= 1.0 + 1e-12);
                if g.times()[node] <= 0.5 {
                    assert_eq!(x, &[0.0, 0.0]);
                }
                if frozen_at.is_none() && norm(x) >= STOP_NORM {
                    frozen_at = Some(node);
                }
                if let Some(f) = frozen_at {
                    assert_eq!(x, ens.value(p, f));
                }
            }
            if let Some(f) = frozen_at {
                stopped_paths += 1;
                for step in f..ens.steps() {
                    assert_eq!(ens.d_clock(p, step), 0.0);
                }
                assert!((ens.d_clock(p, f - 1) - 4.0 * g.dt(f - 1)).abs() < 1e-12);
            }
            assert!(ens.clock(p, ens.steps()) <= ens.clock_bound() + 1e-12);
            let (da, _) = clock_and_volatility(&model, &g, ens.path_values(p));
            for step in 0..ens.steps() {
                assert_eq!(da[step], ens.d_clock(p, step));
            }
        }
        assert!(stopped_paths > 0);
        assert!((ens.clock_bound() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn bump_locality() {
        let g = TimeGrid::uniform(1.0, 6).unwrap();
        let ens = simulate(&MartingaleModel::StandardBm { dim: 2 }, &g, 1, 1).unwrap();
        let path = ens.path_values(0);
        assert_eq!(bump(path, 2, 3, &[1.0, 0.0], 0.0), path);
        let up = bump(path, 2, 3, &[0.0, 1.0], 0.25);
        assert_eq!(bump(&up, 2, 3, &[0.0, 1.0], -0.25), path);
        let from_start = bump(path, 2, 0, &[1.0, 0.0], 0.5);
        for node in 0..7 {
            assert_eq!(from_start[2 * node], path[2 * node] + 0.5);
            assert_eq!(from_start[2 * node + 1], path[2 * node + 1]);
        }
        for node in 0..3 {
            assert_eq!(&up[2 * node..2 * node + 2], &path[2 * node..2 * node + 2]);
        }
    }

    #[test]
    fn ensemble_bump_recomputes_stopping() {
        let g = TimeGrid::uniform(1.0, 50).unwrap();
        let model = MartingaleModel::StoppedScaledBm { horizon: 1.0, delta: 1.0 };
        let ens = simulate(&model, &g, 200, 4).unwrap();
        let bumped = ens.bumped(10, &[1.0, 0.0], 0.3).unwrap();
        for p in 0..ens.paths() {
            assert_eq!(&bumped.path_values(p)[..20], &ens.path_values(p)[..20]);
            for node in 0..bumped.nodes() {
                assert!(norm(bumped.value(p, node)) <= 1.0 + 1e-12);
            }
        }
        let zero = ens.bumped(10, &[1.0, 0.0], 0.0).unwrap();
        assert_eq!(zero.values, ens.values);
    }

    #[test]
    fn grid_restrict_examples() {
        let g = TimeGrid::uniform(1.0, 8).unwrap();
        let constant = vec![2.5; 9];
        assert!(grid_restrict(&constant, 1, &g, 4).unwrap().iter().all(|&x| x == 0.0));

        let v = 1.7;
        let linear: Vec<f64> = g.times().iter().map(|t| v * t).collect();
        let restricted = grid_restrict(&linear, 1, &g, 4).unwrap();
        for j in 0..=4 {
            let node = 2 * j;
            assert!((restricted[node] - v * g.times()[node]).abs() < 1e-14);
        }
        // piecewise constant between partition points
        assert_eq!(restricted[1], restricted[0]);
        assert_eq!(restricted[3], restricted[2]);

        let steps: Vec<f64> = (0..9).map(|i| (i / 2) as f64).collect();
        assert_eq!(grid_restrict(&steps, 1, &g, 4).unwrap(), steps);

        assert!(matches!(grid_restrict(&linear, 1, &g, 3), Err(LabError::Config(_))));
    }

    #[test]
    fn binary_round_trip() {
        let g = TimeGrid::uniform(1.0, 5).unwrap();
        let model = MartingaleModel::StoppedScaledBm { horizon: 1.0, delta: 0.6 };
        let ens = simulate(&model, &g, 7, 21).unwrap();
        let mut buf = Vec::new();
        ens.write_binary(&mut buf).unwrap();
        let back = MartingaleEnsemble::read_binary(buf.as_slice()).unwrap();
        assert_eq!(back.values, ens.values);
        assert_eq!(back.clock, ens.clock);
        assert_eq!(back.model(), ens.model());
        assert!(MartingaleEnsemble::read_binary(&b"garbage!"[..]).is_err());
    }

    #[test]
    fn csv_layout() {
        let g = TimeGrid::uniform(1.0, 2).unwrap();
        let ens = simulate(&MartingaleModel::StandardBm { dim: 2 }, &g, 2, 1).unwrap();
        let mut buf = Vec::new();
        ens.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "path,time,m1,m2,clock");
        assert_eq!(lines.len(), 1 + 2 * 3);
        assert!(lines[1].starts_with("0,0,0,0,0"));
    }
}
