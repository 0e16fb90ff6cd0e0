//! Dense matrices, seeded Gaussian sampling, RMS norms and log-log fits.

mod fit;
mod matrix;

pub use fit::{ols_loglog_fit, ols_loglog_fit_dropping_zeros, ExponentFit};
pub use matrix::{gaussian_matrix, rms_norm, Matrix};
pub(crate) use matrix::rms_of;
