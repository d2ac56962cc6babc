//! Learned warm starts for Douglas-Rachford splitting on parametric convex QPs.
//!
//! The pipeline is: a [`zoo`] generator builds a [`qp::ParametricFamily`], a
//! [`predictor::PredictorModel`] maps a parameter θ to a warm start ẑ, and
//! [`dr`] runs Douglas-Rachford iterations from ẑ. Training differentiates the
//! fixed-point residual after `k` unrolled steps ([`unroll`]) back through the
//! network. [`bounds`] evaluates the generalization bounds and the cold /
//! nearest-neighbor baselines.

pub mod bounds;
pub mod dataset;
pub mod dr;
pub mod error;
pub mod linalg;
pub mod predictor;
pub mod qp;
pub mod unroll;
pub mod zoo;

pub use dr::{DrTrace, SolveSettings};
pub use error::{Error, Result};
pub use linalg::{DenseMatrix, LuFactorization};

pub use predictor::{PredictorModel, TrainConfig, TrainHistory};
pub use qp::{KktResiduals, LcpSystem, ParametricFamily, QpInstance};
pub use zoo::FamilySpec;
