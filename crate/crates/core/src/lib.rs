//! Estimation of intra-voxel incoherent motion (IVIM) parameters `(D, f, D*)`
//! from diffusion-weighted signal curves.
//!
//! * [`model`]: bi-exponential forward model and curve helpers
//! * [`simulate`]: seeded synthetic datasets with Rician noise
//! * [`fit`]: segmented and bounded nonlinear least-squares fits
//! * [`nn`]: compact MLP estimator with supervised, unsupervised and
//!   supervised + data-consistency training
//! * [`eval`]: NRMSE, correlation, sampling-factor sweeps and grid search
//! * [`io`]: CSV / JSON file formats shared by the CLI and bindings
//! * [`cli`]: the `ivim` command line tool

pub mod cli;
pub mod error;
pub mod eval;
pub mod fit;
pub mod io;
pub mod model;
pub mod nn;
pub mod rng;
pub mod simulate;

pub use error::{IvimError, Result};
pub use model::{BValueSchedule, IvimParams, SignalCurve};
