//! Built-in Lipschitz problems with known constants and, where available,
//! closed-form solutions.

use std::sync::Arc;

use super::driver::{FnDriver, Regularity, TerminalFunctional};
use crate::martingale::MartingaleEnsemble;

/// Closed form of `Y` (scalar) and `Z` (row of length `n`) on a path node.
pub type ExactY = Arc<dyn Fn(&MartingaleEnsemble, usize, usize) -> f64 + Send + Sync>;
pub type ExactZ = Arc<dyn Fn(&MartingaleEnsemble, usize, usize) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
pub struct CatalogEntry {
    pub name: &'static str,
    pub xi: TerminalFunctional,
    pub driver: FnDriver,
    pub exact_y: Option<ExactY>,
    pub exact_z: Option<ExactZ>,
}

impl std::fmt::Debug for CatalogEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CatalogEntry")
            .field("name", &self.name)
            .field("xi", &self.xi)
            .field("driver", &self.driver)
            .finish()
    }
}

fn remaining_clock(ens: &MartingaleEnsemble, p: usize, node: usize) -> f64 {
    ens.clock(p, ens.steps()) - ens.clock(p, node)
}

/// `f ≡ 0`, `ξ = γ_T¹`: `Y = M¹`, `Z = e₁`.
pub fn linear_terminal(n: usize) -> CatalogEntry {
    let mut a = vec![0.0; n];
    a[0] = 1.0;
    CatalogEntry {
        name: "linear-terminal",
        xi: TerminalFunctional::linear(a),
        driver: FnDriver::zero(1),
        exact_y: Some(Arc::new(|ens, p, node| ens.value(p, node)[0])),
        exact_z: Some(Arc::new(|ens, _, _| {
            let mut e = vec![0.0; ens.dim()];
            e[0] = 1.0;
            e
        })),
    }
}

/// `f(y) = αy`, `ξ ≡ c`: `Y_t = c e^{α(A_T − A_t)}`, `Z = 0`.
pub fn exponential_growth(alpha: f64, c: f64) -> CatalogEntry {
    CatalogEntry {
        name: "exponential-growth",
        xi: TerminalFunctional::constant(vec![c]),
        driver: FnDriver::new(1, Regularity::Lipschitz { cy: alpha.abs(), cz: 0.0 }, move |_, y, _, o| {
            o[0] = alpha * y[0]
        })
        .with_cf(0.0),
        exact_y: Some(Arc::new(move |ens, p, node| c * (alpha * remaining_clock(ens, p, node)).exp())),
        exact_z: Some(Arc::new(|ens, _, _| vec![0.0; ens.dim()])),
    }
}

/// `f ≡ β`, `ξ ≡ c`: `Y_t = c + β(A_T − A_t)`, `Z = 0`. `k` is the clock bound.
pub fn constant_driver(beta: f64, c: f64, k: f64) -> CatalogEntry {
    CatalogEntry {
        name: "constant-driver",
        xi: TerminalFunctional::constant(vec![c]),
        driver: FnDriver::new(1, Regularity::Lipschitz { cy: 0.0, cz: 0.0 }, move |_, _, _, o| o[0] = beta)
            .with_cf(beta.abs() * k.sqrt()),
        exact_y: Some(Arc::new(move |ens, p, node| c + beta * remaining_clock(ens, p, node))),
        exact_z: Some(Arc::new(|ens, _, _| vec![0.0; ens.dim()])),
    }
}

/// `f ≡ 0`, `ξ = sin(γ_T¹)`. Under Brownian motion
/// `Y_t = e^{-(T−t)/2} sin(M¹_t)` and `Z = e^{-(T−t)/2} cos(M¹_t) e₁`.
pub fn sine_terminal() -> CatalogEntry {
    CatalogEntry {
        name: "sine-terminal",
        xi: TerminalFunctional::new(1, 1.0, |pt, o| o[0] = pt.current()[0].sin()).with_bound(1.0),
        driver: FnDriver::zero(1),
        exact_y: None,
        exact_z: None,
    }
}

/// `ξ = sin(γ_T¹)`, `f = −y/2 + 0.3 sin(z₁₁) + 0.2 cos(γ_s¹)`. Smooth in every
/// argument and path dependent through the current value.
pub fn smooth_coupled(k: f64) -> CatalogEntry {
    CatalogEntry {
        name: "smooth-coupled",
        xi: TerminalFunctional::new(1, 1.0, |pt, o| o[0] = pt.current()[0].sin()).with_bound(1.0),
        driver: FnDriver::new(1, Regularity::Lipschitz { cy: 0.5, cz: 0.3 }, |pt, y, z, o| {
            o[0] = -0.5 * y[0] + 0.3 * z[0].sin() + 0.2 * pt.current()[0].cos()
        })
        .with_df(0.2)
        .with_cf(0.2 * k.sqrt()),
        exact_y: None,
        exact_z: None,
    }
}

/// Every built-in Lipschitz example for an `n`-dimensional martingale with clock bound `k`.
pub fn builtin_lipschitz(n: usize, k: f64) -> Vec<CatalogEntry> {
    vec![
        linear_terminal(n),
        exponential_growth(0.5, 1.0),
        constant_driver(0.3, 1.0, k),
        sine_terminal(),
        smooth_coupled(k),
    ]
}
