//! Linear-quadratic dynamic games as affine variational inequalities.
//!
//! A constrained LQ game over a finite horizon is condensed into
//! `AVI(C, M, q)` and solved with a smoothed Fischer–Burmeister Newton
//! method, with projected forward–backward and Douglas–Rachford iterations
//! as first-order references.

pub mod baseline;
pub mod game;
pub mod linalg;
pub mod newton;
mod projection;
pub mod scenarios;
pub mod serde_util;
pub mod sim;
pub mod solver;
pub mod vi;

pub use baseline::{dr_solve, fb_solve, FirstOrderConfig};
pub use newton::{NewtonConfig, SmoothedKktState, SmoothedNewton};
pub use solver::{PreparedSolver, SolverConfig, SolverKind};
pub use vi::{AffineOperator, AviProblem, PolyhedralSet, SolveStatus, SolverReport, ViError};
