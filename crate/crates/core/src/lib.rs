//! Numerical laboratory for width scaling of mixture-of-experts blocks.
//!
//! The core (linear algebra, model, optimizers, probes) is generic over the
//! floating-point type through [`Scalar`]; the aliases below fix it to `f64`,
//! which is what the experiment harness uses.

pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod params;
pub mod probes;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use linalg::{gaussian_matrix, ols_loglog_fit, rms_norm, ExponentFit};
pub use model::{GateKind, GateSpec, LayerMap, LayerRole, ScaleVector};
pub use params::{Optimizer, Parameterization, Regime};
pub use scalar::Scalar;

pub type Matrix = linalg::Matrix<f64>;
pub type SplitWeight = model::SplitWeight<f64>;
pub type MoEWeights = model::MoEWeights<f64>;
pub type ActivationCache = model::ActivationCache<f64>;
pub type GradientCache = model::GradientCache<f64>;
pub type AdamState = optim::AdamState<f64>;
