//! Per-layer scaling rules, width ladders and the Mixtral-style prescription.

mod mixtral;
mod rules;
mod trajectory;

pub use mixtral::{emit_mixtral_config, Prescription, PrescriptionRow};
pub use rules::{rules_for, sp_rules, LayerRule, Multipliers, Optimizer, Parameterization, Regime, RuleSet};
pub use trajectory::{scale_trajectory, RegimeTrajectory};
