//! Numerical laboratory for one- and two-phase Alt–Caffarelli functionals:
//! discrete minimization, free-boundary extraction, and quantitative audits
//! of the extracted boundaries.

pub mod audit;
pub mod error;
pub mod classify;
pub mod field;
pub mod geometry;
pub mod io;
pub mod monotone;
pub mod problem;
pub mod run;
pub mod solver;

pub use error::{Error, Result};
pub use field::{Ball, Grid, Point, ScalarField};
pub use geometry::FreeBoundary;
pub use problem::{AlmostMinParams, Problem, ProblemSpec, WeightField};
pub use run::{Config, RunManifest};
pub use solver::{minimize, SolveConfig, SolveResult};
