//! Series estimation of a regression function when the covariate is
//! selectively missing and the selection may depend on the outcome.
//!
//! The pipeline has two stages. A constrained sieve minimum-distance
//! estimator recovers a selection probability `φ(y, x)` from the conditional
//! moment `E[Δ/φ(Y,X) | Y, W] = 1`, where `W` is an instrument excluded from
//! selection. The fractional probability weights
//! `ω(y, x) = P(Δ=1 | X*=x) / φ(y, x)` built from it reweight the complete
//! cases so that a weighted series regression of `Y` on B-splines of `X`
//! recovers `g(x) = E[Y | X* = x]`.
//!
//! Module map:
//!
//! * [`basis`]: clamped B-spline bases and tensor products.
//! * [`linalg`]: least squares, Gram matrices, SPD solves with a
//!   pseudo-inverse fallback.
//! * [`selection`]: the first-stage minimum-distance estimator.
//! * [`estimator`]: FPW weights, the FPW series fit and the linear baselines.
//! * [`inference`]: sieve variance, pointwise intervals and multiplier
//!   bootstrap uniform bands.
//! * [`simulation`]: data generating process and Monte Carlo studies.
//! * [`io`] and [`cli`]: CSV ingestion, result tables, the `fpw` binary.

pub mod basis;
pub mod cli;
pub mod error;
pub mod estimator;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod qp;
pub mod sample;
pub mod selection;
pub mod simulation;
pub mod stats;

pub use basis::{BasisSpec, KnotPlacement, SieveLayout, TensorSpec};
pub use error::{FpwError, Result};
pub use estimator::{FpwFit, LinearFit, LinearWeighting};
pub use inference::{Multiplier, UniformBand};
pub use sample::Sample;
pub use selection::{MdConfig, Optimizer, SelectionModel, SelectionProbability};
pub use simulation::{DgpConfig, Regression};
