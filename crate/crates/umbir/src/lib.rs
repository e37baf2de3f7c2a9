//! Reflectivity imaging through multi-layered media from multi-frequency
//! collimated-beam ultrasound measurements.
//!
//! The library models each recorded trace as `y = A x + D g + w`: a sparse
//! system matrix `A` built from refracted travel times, dispersion-filtered
//! pulse kernels, and collimation apodization; a direct-arrival basis `D`
//! with per-receiver coefficients `g`; and white Gaussian noise `w`. The MAP
//! estimate of `(x, g)` under a spatially varying QGGMRF prior is computed
//! by iterative coordinate descent. A multi-layer delay-and-sum (SAFT)
//! baseline, a forward-model data synthesizer, panoramic stitching, and
//! binary file formats round out the toolkit.
//!
//! Start with the runnable examples (`cargo run --release --example ...`)
//! or the `umbir` command-line front end.

pub mod error;
pub mod media;
pub mod prior;
pub mod pulse;
pub mod raypath;
pub mod saft;
pub mod solver;
pub mod synth;
pub mod system;

pub use error::{Error, Result};
