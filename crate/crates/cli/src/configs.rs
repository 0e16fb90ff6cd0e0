//! Config documents for the commands that do not train a ladder. Training
//! commands read a full `RunConfig`.

use serde::{Deserialize, Serialize};

use moe_scaling::{Regime, ScaleVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GramConfig {
    pub m: usize,
    pub n: usize,
    /// Entry std; defaults to `n^-1/2`.
    #[serde(default)]
    pub sigma: Option<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossLayerConfig {
    pub scales: Vec<ScaleVector>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmitConfig {
    pub regime: Regime,
    pub scales: Vec<ScaleVector>,
    #[serde(default = "one")]
    pub depth: usize,
    pub base_lr: f64,
    pub base_eps: f64,
}

fn one() -> usize {
    1
}
