//! Physics-constrained neural surrogates for 2-D transient saturated
//! groundwater flow.
//!
//! The crate bundles everything needed to set up, train, and score a
//! surrogate against a simulated aquifer:
//!
//! - [`kle`]: heterogeneous log-conductivity fields via a truncated
//!   Karhunen-Loeve expansion with analytic eigenpairs and K-gradients.
//! - [`solver`]: an implicit finite-difference reference solver for the
//!   flow equation, including wells with drawdown-triggered switching.
//! - [`net`]: a fully-connected network with exact input derivatives
//!   (jets) and reverse-mode parameter gradients.
//! - [`loss`]: the composite training objective (data, PDE residual,
//!   boundary/initial conditions, penalty terms) and its gradient.
//! - [`train`]: Adam optimization, the training loop, and the
//!   layer-freezing transfer protocol.
//! - [`scenario`]: end-to-end experiment harness with evaluation metrics,
//!   data corruption models, and ensemble statistics.
//! - [`config`]: strict key-value documents used for scenario specs.

pub mod config;
pub mod error;
pub mod grid;
pub mod kle;
pub mod loss;
pub mod manifest;
pub mod net;
pub mod scenario;
pub mod solver;
pub mod train;

pub use error::{ErrorClass, GfError, Result};
pub use grid::Grid2D;

/// Crate version string, embedded in manifests and checkpoints.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
