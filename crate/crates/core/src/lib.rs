//! Sparse decomposition of non-negative multivariate signals into weighted
//! sums of anisotropic Gaussians.
//!
//! The main entry point is [`greedy::decompose`], a greedy scheme that adds
//! one Gaussian atom per outer iteration (seeded at the maximum of a
//! smoothed residual, shaped by local second moments) and then refines first
//! the new atom and then all atoms jointly with a box-constrained
//! limited-memory quasi-Newton solver. Supporting modules cover grid
//! geometry ([`grid`]), mixture evaluation with analytic derivatives
//! ([`eval`]), the optimizer ([`optim`]), mode-location analysis
//! ([`analysis`]) and conversions between point clouds and signals with an
//! EM baseline ([`bridge`]).

pub mod analysis;
pub mod bridge;
pub mod error;
pub mod eval;
pub mod greedy;
pub mod grid;
pub mod linalg;
pub mod mixture;
pub mod optim;

pub use error::{GmmError, Result};
pub use grid::{Grid, PointCloud, Signal};
pub use mixture::{GaussianComponent, Gmm};
