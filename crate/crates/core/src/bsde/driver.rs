//! Drivers `f(s, γ, y, z)` and terminal functionals `ξ(γ)` together with
//! their declared regularity constants.
//!
//! `z` is always the product `Z m` and is passed row-major as a `d × n` slice.

use std::fmt;
use std::sync::Arc;

use crate::martingale::PathPoint;

/// A nondecreasing growth function `ρ` for locally Lipschitz drivers.
#[derive(Clone)]
pub struct Rho(Arc<dyn Fn(f64) -> f64 + Send + Sync>);

impl Rho {
    pub fn new(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }

    pub fn constant(c: f64) -> Self {
        Self::new(move |_| c)
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.0)(x)
    }

    /// Spot check of monotonicity on `[0, upto]`.
    pub fn is_nondecreasing(&self, upto: f64, samples: usize) -> bool {
        let mut prev = self.eval(0.0);
        (1..=samples).all(|i| {
            let v = self.eval(upto * i as f64 / samples as f64);
            let ok = v >= prev - 1e-12 * prev.abs().max(1.0);
            prev = v;
            ok
        })
    }
}

impl fmt::Debug for Rho {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Rho(ρ(0)={}, ρ(1)={})", self.eval(0.0), self.eval(1.0))
    }
}

#[derive(Clone, Debug)]
pub enum Regularity {
    Lipschitz { cy: f64, cz: f64 },
    LocallyLipschitzZ { cy: f64, rho: Rho },
    LocallyLipschitzBoth { rho: Rho },
}

impl Regularity {
    pub fn is_lipschitz(&self) -> bool {
        matches!(self, Regularity::Lipschitz { .. })
    }

    /// `(C_y, C_z)` for Lipschitz drivers.
    pub fn lipschitz_constants(&self) -> Option<(f64, f64)> {
        match *self {
            Regularity::Lipschitz { cy, cz } => Some((cy, cz)),
            _ => None,
        }
    }

    pub fn rho(&self) -> Option<&Rho> {
        match self {
            Regularity::Lipschitz { .. } => None,
            Regularity::LocallyLipschitzZ { rho, .. } | Regularity::LocallyLipschitzBoth { rho } => Some(rho),
        }
    }
}

pub trait Driver: Send + Sync {
    /// Dimension `d` of `Y`.
    fn dim(&self) -> usize;

    /// Writes `f(t, γ_{[0,t]}, y, z)` into `out`.
    fn eval(&self, pt: &PathPoint<'_>, y: &[f64], z: &[f64], out: &mut [f64]);

    fn regularity(&self) -> Regularity;

    /// `D_f`, the sup-norm Lipschitz constant in the path.
    fn df(&self) -> f64 {
        0.0
    }

    /// Bound on `sqrt(∫|f(s,0,0)|² dA)`, if known.
    fn cf(&self) -> Option<f64> {
        None
    }
}

type DriverFn = dyn Fn(&PathPoint<'_>, &[f64], &[f64], &mut [f64]) + Send + Sync;

/// A driver backed by a closure.
#[derive(Clone)]
pub struct FnDriver {
    d: usize,
    f: Arc<DriverFn>,
    regularity: Regularity,
    df: f64,
    cf: Option<f64>,
}

impl FnDriver {
    pub fn new(
        d: usize,
        regularity: Regularity,
        f: impl Fn(&PathPoint<'_>, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self { d, f: Arc::new(f), regularity, df: 0.0, cf: None }
    }

    pub fn with_df(mut self, df: f64) -> Self {
        self.df = df;
        self
    }

    pub fn with_cf(mut self, cf: f64) -> Self {
        self.cf = Some(cf);
        self
    }

    /// `f ≡ 0`.
    pub fn zero(d: usize) -> Self {
        Self::new(d, Regularity::Lipschitz { cy: 0.0, cz: 0.0 }, |_, _, _, out| out.fill(0.0)).with_cf(0.0)
    }
}

impl fmt::Debug for FnDriver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnDriver")
            .field("d", &self.d)
            .field("regularity", &self.regularity)
            .field("df", &self.df)
            .field("cf", &self.cf)
            .finish()
    }
}

impl Driver for FnDriver {
    fn dim(&self) -> usize {
        self.d
    }

    fn eval(&self, pt: &PathPoint<'_>, y: &[f64], z: &[f64], out: &mut [f64]) {
        (self.f)(pt, y, z, out)
    }

    fn regularity(&self) -> Regularity {
        self.regularity.clone()
    }

    fn df(&self) -> f64 {
        self.df
    }

    fn cf(&self) -> Option<f64> {
        self.cf
    }
}

impl<D: Driver + ?Sized> Driver for Arc<D> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn eval(&self, pt: &PathPoint<'_>, y: &[f64], z: &[f64], out: &mut [f64]) {
        (**self).eval(pt, y, z, out)
    }

    fn regularity(&self) -> Regularity {
        (**self).regularity()
    }

    fn df(&self) -> f64 {
        (**self).df()
    }

    fn cf(&self) -> Option<f64> {
        (**self).cf()
    }
}

/// Radial projection of `z` onto the closed ball of radius `r`.
pub fn clamp_to_ball(z: &[f64], r: f64, out: &mut [f64]) {
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    // Points already on the sphere up to rounding stay put, so clamping twice
    // changes nothing.
    let scale = if norm > r * (1.0 + 8.0 * f64::EPSILON) { r / norm } else { 1.0 };
    for (o, v) in out.iter_mut().zip(z) {
        *o = v * scale;
    }
}

/// `f(t, γ, y, R z / (|z| ∨ R))`, globally Lipschitz with `C_y = C_z = ρ(R)`.
#[derive(Clone)]
pub struct TruncatedDriver<D> {
    inner: D,
    radius: f64,
    lip: f64,
}

impl<D: Driver> TruncatedDriver<D> {
    pub fn radius(&self) -> f64 {
        self.radius
    }
}

/// Truncates a locally Lipschitz driver at radius `r`. A driver that is
/// already Lipschitz keeps its declared constants.
pub fn truncate_driver<D: Driver>(f: D, r: f64) -> TruncatedDriver<D> {
    assert!(r > 0.0, "truncation radius must be positive");
    let lip = match f.regularity() {
        Regularity::Lipschitz { cy, cz } => cy.max(cz),
        Regularity::LocallyLipschitzZ { cy, rho } => cy.max(rho.eval(r)),
        Regularity::LocallyLipschitzBoth { rho } => rho.eval(r),
    };
    TruncatedDriver { inner: f, radius: r, lip }
}

impl<D: Driver> Driver for TruncatedDriver<D> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn eval(&self, pt: &PathPoint<'_>, y: &[f64], z: &[f64], out: &mut [f64]) {
        let mut zc = [0.0; 16];
        if z.len() <= zc.len() {
            clamp_to_ball(z, self.radius, &mut zc[..z.len()]);
            self.inner.eval(pt, y, &zc[..z.len()], out);
        } else {
            let mut zc = vec![0.0; z.len()];
            clamp_to_ball(z, self.radius, &mut zc);
            self.inner.eval(pt, y, &zc, out);
        }
    }

    fn regularity(&self) -> Regularity {
        match self.inner.regularity() {
            Regularity::Lipschitz { cy, cz } => Regularity::Lipschitz { cy, cz },
            _ => Regularity::Lipschitz { cy: self.lip, cz: self.lip },
        }
    }

    fn df(&self) -> f64 {
        self.inner.df()
    }

    fn cf(&self) -> Option<f64> {
        self.inner.cf()
    }
}

type TerminalFn = dyn Fn(&PathPoint<'_>, &mut [f64]) + Send + Sync;

/// Terminal condition `ξ(γ)`; evaluated on the full grid path.
#[derive(Clone)]
pub struct TerminalFunctional {
    d: usize,
    f: Arc<TerminalFn>,
    /// Sup-norm Lipschitz constant `D_ξ`.
    pub d_xi: f64,
    /// Uniform bound `C_ξ`, if any.
    pub c_xi: Option<f64>,
}

impl TerminalFunctional {
    pub fn new(d: usize, d_xi: f64, f: impl Fn(&PathPoint<'_>, &mut [f64]) + Send + Sync + 'static) -> Self {
        Self { d, f: Arc::new(f), d_xi, c_xi: None }
    }

    pub fn with_bound(mut self, c_xi: f64) -> Self {
        self.c_xi = Some(c_xi);
        self
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn eval(&self, pt: &PathPoint<'_>, out: &mut [f64]) {
        (self.f)(pt, out)
    }

    /// `c` on every path.
    pub fn constant(value: Vec<f64>) -> Self {
        let c = value.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self::new(value.len(), 0.0, move |_, out| out.copy_from_slice(&value)).with_bound(c)
    }

    /// `ξ(γ) = a · γ_T`, scalar.
    pub fn linear(a: Vec<f64>) -> Self {
        let d_xi = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self::new(1, d_xi, move |pt, out| {
            out[0] = pt.current().iter().zip(&a).map(|(x, c)| x * c).sum();
        })
    }
}

impl fmt::Debug for TerminalFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TerminalFunctional")
            .field("d", &self.d)
            .field("d_xi", &self.d_xi)
            .field("c_xi", &self.c_xi)
            .finish()
    }
}
