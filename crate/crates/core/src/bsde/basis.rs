//! Regression features for the conditional expectations.
//!
//! Raw features are the current state `M_t` and optional path features. They
//! are standardized per time step and expanded into products of probabilists'
//! Hermite polynomials of bounded total degree, which keeps the Gram matrices
//! far better conditioned than plain monomials.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::martingale::{MartingaleEnsemble, PathPoint, TimeGrid};

/// Paths per reduction chunk. Fixed so sums do not depend on the thread count.
pub(crate) const CHUNK: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PathFeature {
    /// `max_{s ≤ t} γ_s^c`.
    RunningMax { component: usize },
    /// `L^{(k)} P^{(k)} γ` at the current time: the path increment up to the
    /// last point of the uniform `k`-partition.
    CoarseRestricted { k: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressionBasis {
    pub degree: usize,
    #[serde(default)]
    pub features: Vec<PathFeature>,
    /// Tikhonov weight relative to each Gram diagonal entry.
    pub ridge: f64,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self { degree: 2, features: Vec::new(), ridge: 1e-10 }
    }
}

impl RegressionBasis {
    pub fn polynomial(degree: usize) -> Self {
        Self { degree, ..Self::default() }
    }

    pub fn with_feature(mut self, f: PathFeature) -> Self {
        self.features.push(f);
        self
    }

    pub fn with_ridge(mut self, ridge: f64) -> Self {
        self.ridge = ridge;
        self
    }

    pub(crate) fn prepare(&self, grid: &TimeGrid, dim: usize) -> Result<PreparedBasis> {
        if !(self.ridge >= 0.0) {
            return Err(LabError::InvalidInput(format!("ridge must be ≥ 0, got {}", self.ridge)));
        }
        let mut anchors = Vec::new();
        for f in &self.features {
            match *f {
                PathFeature::RunningMax { component } if component >= dim => {
                    return Err(LabError::InvalidInput(format!(
                        "running-max component {component} outside dimension {dim}"
                    )));
                }
                PathFeature::RunningMax { .. } => anchors.push(Vec::new()),
                PathFeature::CoarseRestricted { k } => {
                    if k == 0 {
                        return Err(LabError::Config("partition size must be at least 1".into()));
                    }
                    let idx = (0..=k)
                        .map(|j| {
                            let s = grid.horizon() * j as f64 / k as f64;
                            grid.index_of(s).ok_or_else(|| {
                                LabError::Config(format!("partition instant {s} is not a grid point"))
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let mut per_node = Vec::with_capacity(grid.nodes());
                    let mut j = 0;
                    for node in 0..grid.nodes() {
                        while j + 1 < idx.len() && idx[j + 1] <= node {
                            j += 1;
                        }
                        per_node.push(idx[j]);
                    }
                    anchors.push(per_node);
                }
            }
        }
        Ok(PreparedBasis { basis: self.clone(), dim, anchors })
    }
}

#[derive(Clone, Debug)]
pub(crate) struct PreparedBasis {
    pub basis: RegressionBasis,
    dim: usize,
    anchors: Vec<Vec<usize>>,
}

impl PreparedBasis {
    pub fn raw_len(&self) -> usize {
        self.dim
            + self
                .basis
                .features
                .iter()
                .map(|f| match f {
                    PathFeature::RunningMax { .. } => 1,
                    PathFeature::CoarseRestricted { .. } => self.dim,
                })
                .sum::<usize>()
    }

    pub fn raw(&self, pt: &PathPoint<'_>, out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(pt.current());
        for (f, anchor) in self.basis.features.iter().zip(&self.anchors) {
            match *f {
                PathFeature::RunningMax { component } => {
                    let m = (0..=pt.step).map(|j| pt.at(j)[component]).fold(f64::NEG_INFINITY, f64::max);
                    out.push(m);
                }
                PathFeature::CoarseRestricted { .. } => {
                    let a = pt.at(anchor[pt.step]);
                    let o = pt.at(0);
                    out.extend(a.iter().zip(o).map(|(x, y)| x - y));
                }
            }
        }
    }

    /// Standardization and Hermite expansion fitted on node `node` of `ens`.
    pub fn fit_step(&self, ens: &MartingaleEnsemble, node: usize) -> StepBasis {
        let r = self.raw_len();
        let p = ens.paths();
        // Moments about the first path's value: exact zero spread when all paths agree.
        let mut origin = Vec::with_capacity(r);
        self.raw(&ens.point(0, node), &mut origin);
        let partials: Vec<Vec<f64>> = (0..p)
            .collect::<Vec<_>>()
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut acc = vec![0.0; 2 * r];
                let mut raw = Vec::with_capacity(r);
                for &q in chunk {
                    self.raw(&ens.point(q, node), &mut raw);
                    for (k, x) in raw.iter().enumerate() {
                        let x = x - origin[k];
                        acc[k] += x;
                        acc[r + k] += x * x;
                    }
                }
                acc
            })
            .collect();
        let mut sums = vec![0.0; 2 * r];
        for part in &partials {
            for (s, v) in sums.iter_mut().zip(part) {
                *s += v;
            }
        }
        let mut kept = Vec::new();
        let mut mean = Vec::new();
        let mut scale = Vec::new();
        for k in 0..r {
            let shift = sums[k] / p as f64;
            let mu = origin[k] + shift;
            let var = (sums[r + k] / p as f64 - shift * shift).max(0.0);
            let sd = var.sqrt();
            if sd > 1e-10 * (1.0 + mu.abs()) {
                kept.push(k);
                mean.push(mu);
                scale.push(sd);
            }
        }
        StepBasis::new(kept, mean, scale, self.basis.degree)
    }
}

/// Per-step feature map: standardize the kept raw features, then evaluate
/// Hermite products `He_{a_1}(x_1) ⋯ He_{a_k}(x_k)` with `Σ a_j ≤ degree`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepBasis {
    pub kept: Vec<usize>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub degree: usize,
    exponents: Vec<Vec<usize>>,
}

impl StepBasis {
    fn new(kept: Vec<usize>, mean: Vec<f64>, scale: Vec<f64>, degree: usize) -> Self {
        let exponents = multi_indices(kept.len(), degree);
        Self { kept, mean, scale, degree, exponents }
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn eval(&self, raw: &[f64], out: &mut [f64]) {
        let k = self.kept.len();
        let deg = self.degree;
        let mut he = [0.0; 64];
        let mut heap;
        let table: &mut [f64] = if k * (deg + 1) <= he.len() {
            &mut he[..k * (deg + 1)]
        } else {
            heap = vec![0.0; k * (deg + 1)];
            &mut heap
        };
        for (j, &idx) in self.kept.iter().enumerate() {
            let x = (raw[idx] - self.mean[j]) / self.scale[j];
            let row = &mut table[j * (deg + 1)..(j + 1) * (deg + 1)];
            row[0] = 1.0;
            if deg >= 1 {
                row[1] = x;
            }
            for a in 1..deg {
                row[a + 1] = x * row[a] - a as f64 * row[a - 1];
            }
        }
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            let mut v = 1.0;
            for (j, &a) in e.iter().enumerate() {
                if a > 0 {
                    v *= table[j * (deg + 1) + a];
                }
            }
            *o = v;
        }
    }
}

/// All exponent vectors of length `k` with total degree ≤ `degree`, graded.
fn multi_indices(k: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; k]];
    for total in 1..=degree {
        let mut cur = vec![0; k];
        fill(&mut out, &mut cur, 0, total);
    }
    out
}

fn fill(out: &mut Vec<Vec<usize>>, cur: &mut Vec<usize>, pos: usize, left: usize) {
    if pos + 1 == cur.len() {
        cur[pos] = left;
        out.push(cur.clone());
        return;
    }
    if cur.is_empty() {
        return;
    }
    for a in (0..=left).rev() {
        cur[pos] = a;
        fill(out, cur, pos + 1, left - a);
    }
    cur[pos] = 0;
}
