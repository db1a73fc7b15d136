//! Discrete nonlinear capacities relative to monotone fluxes.
//!
//! The engine discretizes the Dirichlet problem `u = s` on `E`, `u = 0`
//! outside `F`, `-div a(x, Du) = 0` in between, with P1 elements on a
//! uniform right-triangle mesh of a square. From the solved potential it
//! reports the capacity `C_A(E, F, s) = <A u, u>` by three independent
//! formulas, the capacitary distributions, and the structural inequalities
//! (order, subadditivity, sandwich bounds, s-laws) as randomized suites.
//!
//! Modules map onto the pipeline:
//!
//! - [`flux`]: the monotone maps `a(x, xi)` and a randomized condition checker
//! - [`mesh`]: triangulation, node sets, shape rasterization
//! - [`assembly`]: residual, pairings, Jacobian action
//! - [`solver`]: damped regularized Newton for the potential
//! - [`capacity`]: capacity formulas, distributions, s-sweeps
//! - [`oracle`]: closed-form and 1-D reference values
//! - [`properties`]: theorem-derived randomized suites

pub mod assembly;
pub mod capacity;
pub mod error;
pub mod flux;
pub mod io;
pub mod linalg;
pub mod mesh;
pub mod oracle;
pub mod properties;
pub mod solver;

pub use capacity::{compute_capacity, distributions, p_capacity, sweep_s, CapacityReport, NodeMeasure};
pub use error::{Error, Result};
pub use flux::{check_conditions, combine, s_transform, ConditionReport, Flux, FluxSpec};
pub use mesh::{Mesh, NodeSet, ShapeExpr};
pub use solver::{solve_dirichlet, Init, PotentialField, SolverOptions};
