//! Backward solver, driver truncation, a-priori bounds, stability and comparison.

pub mod basis;
pub mod bounds;
pub mod catalog;
pub mod driver;
pub mod solver;
pub mod stability;

pub use basis::{PathFeature, RegressionBasis};
pub use bounds::{smallness_radius, y_bound, z_bound, ZBoundKind};
pub use driver::{truncate_driver, Driver, FnDriver, Regularity, Rho, TerminalFunctional, TruncatedDriver};
pub use solver::{solve, solve_from, DiscreteBsdeSolution, SolveOptions};
pub use stability::{check_comparison, stability_gap, ComparisonReport, StabilityReport};
