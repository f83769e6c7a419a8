//! Query-space activation steering on a minimal decoder-only transformer,
//! together with key-orthogonal projections (SKOP) that keep steering from
//! rerouting attention away from a head's high-attention focus tokens.
//!
//! Module map:
//!
//! - [`linalg`]: dense matrices, row softmax, Jacobi eigensolver, projectors.
//! - [`tensorfile`]: the `SKOPTEN1` little-endian tensor container.
//! - [`model`]: the toy transformer with recording and steering hooks.
//! - [`steering`]: mean-difference steering vectors and their application.
//! - [`calibration`]: focus/tail sets, key-difference moments, ranks, risk.
//! - [`metrics`]: focus-set mass deltas, tail curves, mode comparison.
//! - [`synth`]: a planted-cluster model and corpus for rerouting experiments.
//! - [`exec`]: sequential or rayon-backed batch execution.

pub mod calibration;
pub mod corpus;
pub mod error;
pub mod exec;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod steering;
pub mod synth;
pub mod tensorfile;

pub use error::{Error, FormatError, Result};
pub use exec::Execution;
pub use linalg::{EigenResult, Matrix};
pub use model::{HeadId, ModelConfig, ModelWeights};
