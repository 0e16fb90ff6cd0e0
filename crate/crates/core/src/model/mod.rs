//! The minimal mixture-of-experts block.
//!
//! ```text
//! h1 = W1 x,  psi = Q h1,  phi = gate(beta psi),
//! h2_i = W2_i h1,  h3_i = W3_i h2_i,  h3 = K^-alpha sum_{i active} phi_i h3_i,  f = W4 h3
//! ```
//!
//! Every weight is a [`SplitWeight`] (frozen init plus cumulative update) so
//! that probes can split any activation into init, propagating, effective and
//! cross pieces exactly.

mod backward;
mod forward;
mod gate;
mod scale;
mod weights;

pub use backward::{backward, GradientCache};
pub use forward::{dense_equivalent_forward, forward, ActivationCache, DIVERGENCE_LIMIT};
pub use gate::{GateKind, GateSpec};
pub use scale::{LayerMap, LayerRole, ScaleVector};
pub use weights::{build_weights, Activation, MoEWeights, SplitWeight};
