//! Gridless multi-source direction-of-arrival estimation on sparse linear
//! arrays from raw, pilot-free data snapshots.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: antenna index sets, steering vectors, difference/sum co-arrays.
//! - [`sigsim`]: DOA/power/symbol generation and noisy snapshot synthesis,
//!   plus the `SNAPDOA1` dataset file format.
//! - [`covariance`]: sample and noiseless spatial covariances, direct
//!   co-array augmentation to the virtual ULA.
//! - [`subspace`]: Hermitian Jacobi eigensolver, MUSIC, Root-MUSIC and
//!   principal-angle subspace distance.
//! - [`nn`]: a small reverse-mode tape over dense real matrices plus SGD with
//!   a one-cycle learning-rate schedule.
//! - [`snaptf`]: the permutation-invariant snapshot transformer estimator,
//!   its training loop and checkpoint format.
//! - [`bench`]: permutation-minimised MSE, SNR sweeps and generalisation
//!   studies emitted as CSV curves.
//! - [`beam`]: sensing-assisted MU-MIMO beam management Monte Carlo.

pub mod beam;
pub mod bench;
pub mod covariance;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod nn;
pub mod seed;
pub mod sigsim;
pub mod snaptf;
pub mod subspace;

pub use covariance::{Scm, ScmKind};
pub use error::{Error, Result};
pub use geometry::ArrayGeometry;
pub use linalg::CMatrix;
pub use sigsim::{Modulation, SnapshotBatch, SourceConfig};
pub use snaptf::{SnapTfConfig, SnapTfModel};
pub use subspace::{DoaEstimate, EigenSplit};

pub use num_complex::Complex64;
