//! A-priori bounds on `Y` and `Z`, and the smallness radius for
//! multidimensional locally Lipschitz drivers.

use serde::{Deserialize, Serialize};

use super::driver::Rho;

/// `sqrt(C_ξ² + C_f²) · exp(K(2C_y + C_z² + 1)/2)`.
pub fn y_bound(c_xi: f64, c_f: f64, k: f64, c_y: f64, c_z: f64) -> f64 {
    (c_xi * c_xi + c_f * c_f).sqrt() * (0.5 * k * (2.0 * c_y + c_z * c_z + 1.0)).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ZBoundKind {
    /// Any dimension `d`.
    Multi { d_xi: f64, d_f: f64, k: f64, c_y: f64, c_z: f64 },
    /// `d = 1`, driver Lipschitz in `y` only.
    OneDim { d_xi: f64, d_f: f64, k: f64, c_y: f64, n: usize },
}

pub fn z_bound(kind: ZBoundKind) -> f64 {
    match kind {
        ZBoundKind::Multi { d_xi, d_f, k, c_y, c_z } => {
            (d_xi * d_xi + d_f * d_f * k).sqrt() * (0.5 * k * (2.0 * c_y + c_z * c_z + 1.0)).exp()
        }
        ZBoundKind::OneDim { d_xi, d_f, k, c_y, n } => {
            let sn = (n as f64).sqrt();
            if c_y == 0.0 {
                sn * (d_xi + d_f * k)
            } else {
                // (D_ξ + D_f/C_y) e^{C_y K} − D_f/C_y, written to stay accurate for small C_y K.
                sn * (d_xi * (c_y * k).exp() + d_f * k * exprel(c_y * k))
            }
        }
    }
}

/// `(e^x − 1)/x`, with the removable singularity filled in.
fn exprel(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 + 0.5 * x
    } else {
        x.exp_m1() / x
    }
}

/// Left side of the smallness inequality at `R`.
pub fn smallness_lhs(d_xi: f64, d_f: f64, k: f64, rho: &Rho, r: f64) -> f64 {
    let q = rho.eval(r) + 1.0;
    (d_xi * d_xi + d_f * d_f * k).sqrt() * (0.5 * k * q * q).exp()
}

/// Smallest `R ∈ (0, r_max]` with `sqrt(D_ξ² + D_f²K) e^{K(ρ(R)+1)²/2} ≤ R`:
/// a uniform scan of `resolution` points, then bisection on the first bracket.
pub fn smallness_radius(d_xi: f64, d_f: f64, k: f64, rho: &Rho, r_max: f64, resolution: usize) -> Option<f64> {
    let ok = |r: f64| smallness_lhs(d_xi, d_f, k, rho, r) <= r;
    let resolution = resolution.max(1);
    let h = r_max / resolution as f64;
    let mut prev = 0.0;
    for i in 1..=resolution {
        let r = h * i as f64;
        if ok(r) {
            let (mut lo, mut hi) = (prev, r);
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
            return Some(hi);
        }
        prev = r;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn y_bound_cases() {
        assert_eq!(y_bound(3.0, 4.0, 0.0, 7.0, 9.0), 5.0);
        assert_eq!(y_bound(1.0, 0.0, 0.0, 0.0, 0.0), 1.0);
        let v = y_bound(1.0, 1.0, 1.0, 0.0, 0.0);
        assert!((v - 2f64.sqrt() * 0.5f64.exp()).abs() < 1e-15);
        assert!((v - 2.3316).abs() < 1e-4);
    }

    #[test]
    fn z_bound_degenerate_forms() {
        let n = 3;
        let (d_xi, d_f, k) = (0.7, 0.4, 2.5);
        let v = z_bound(ZBoundKind::OneDim { d_xi, d_f, k, c_y: 0.0, n });
        assert_eq!(v, 3f64.sqrt() * (d_xi + d_f * k));
        let v0 = z_bound(ZBoundKind::OneDim { d_xi, d_f, k: 0.0, c_y: 1.3, n });
        assert_eq!(v0, 3f64.sqrt() * d_xi);
        assert_eq!(z_bound(ZBoundKind::Multi { d_xi: 1.0, d_f: 0.0, k: 0.0, c_y: 5.0, c_z: 5.0 }), 1.0);
    }

    #[test]
    fn z_bound_one_dim_formula() {
        let (d_xi, d_f, k, c_y): (f64, f64, f64, f64) = (0.5, 0.3, 1.2, 0.8);
        let direct = 2f64.sqrt() * ((d_xi + d_f / c_y) * (c_y * k).exp() - d_f / c_y);
        let v = z_bound(ZBoundKind::OneDim { d_xi, d_f, k, c_y, n: 2 });
        assert!((v - direct).abs() < 1e-13);
        // continuity at C_y → 0
        let small = z_bound(ZBoundKind::OneDim { d_xi, d_f, k, c_y: 1e-12, n: 2 });
        let zero = z_bound(ZBoundKind::OneDim { d_xi, d_f, k, c_y: 0.0, n: 2 });
        assert!((small - zero).abs() < 1e-10);
    }

    #[test]
    fn smallness_radius_cases() {
        let zero = Rho::constant(0.0);
        let (d_xi, d_f, k): (f64, f64, f64) = (1.2, 0.5, 0.3);
        let expect = (d_xi * d_xi + d_f * d_f * k).sqrt() * (0.5 * k).exp();
        let r = smallness_radius(d_xi, d_f, k, &zero, 10.0, 1000).unwrap();
        assert!((r - expect).abs() < 1e-12, "{r} vs {expect}");

        let quad = Rho::new(|x| x + x * x / 2.0);
        let r = smallness_radius(1.0, 3.0, 0.0, &quad, 10.0, 1000).unwrap();
        assert!((r - 1.0).abs() < 1e-12);

        assert!(smallness_radius(1.0, 0.0, 8.0, &quad, 1e3, 100_000).is_none());

        // Small K admits a certificate just above D_ξ.
        let r = smallness_radius(1.0, 0.0, 1e-3, &quad, 10.0, 10_000).unwrap();
        assert!(r > 1.0 && r < 1.01);
        assert!(smallness_lhs(1.0, 0.0, 1e-3, &quad, r) <= r);
    }
}
