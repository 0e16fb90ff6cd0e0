use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Joint model dimensions at one rung of a width ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScaleVector {
    /// Embedding width.
    pub n: usize,
    /// Expert hidden width.
    pub n_e: usize,
    /// Number of experts.
    pub m: usize,
    /// Active experts per token.
    pub k: usize,
    /// Input dimension.
    pub d: usize,
}

impl ScaleVector {
    pub fn new(n: usize, n_e: usize, m: usize, k: usize, d: usize) -> Result<Self> {
        let s = Self { n, n_e, m, k, d };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n_e == 0 || self.m == 0 || self.k == 0 || self.d == 0 {
            return Err(Error::Config(format!("all dimensions must be positive: {self:?}")));
        }
        if self.k > self.m {
            return Err(Error::Config(format!("K={} exceeds M={}", self.k, self.m)));
        }
        Ok(())
    }
}

/// The five trainable layer roles of the block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerRole {
    Embed,
    Router,
    ExpertIn,
    ExpertOut,
    Readout,
}

impl LayerRole {
    pub const ALL: [LayerRole; 5] =
        [LayerRole::Embed, LayerRole::Router, LayerRole::ExpertIn, LayerRole::ExpertOut, LayerRole::Readout];

    pub fn name(self) -> &'static str {
        match self {
            LayerRole::Embed => "embed",
            LayerRole::Router => "router",
            LayerRole::ExpertIn => "expert_in",
            LayerRole::ExpertOut => "expert_out",
            LayerRole::Readout => "readout",
        }
    }
}

impl std::fmt::Display for LayerRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One value per layer role.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerMap<V> {
    pub embed: V,
    pub router: V,
    pub expert_in: V,
    pub expert_out: V,
    pub readout: V,
}

impl<V> LayerMap<V> {
    pub fn from_fn(mut f: impl FnMut(LayerRole) -> V) -> Self {
        Self {
            embed: f(LayerRole::Embed),
            router: f(LayerRole::Router),
            expert_in: f(LayerRole::ExpertIn),
            expert_out: f(LayerRole::ExpertOut),
            readout: f(LayerRole::Readout),
        }
    }
}

impl<V: Copy> LayerMap<V> {
    pub fn splat(v: V) -> Self {
        Self { embed: v, router: v, expert_in: v, expert_out: v, readout: v }
    }

    pub fn get(&self, role: LayerRole) -> V {
        match role {
            LayerRole::Embed => self.embed,
            LayerRole::Router => self.router,
            LayerRole::ExpertIn => self.expert_in,
            LayerRole::ExpertOut => self.expert_out,
            LayerRole::Readout => self.readout,
        }
    }

    pub fn set(&mut self, role: LayerRole, v: V) {
        match role {
            LayerRole::Embed => self.embed = v,
            LayerRole::Router => self.router = v,
            LayerRole::ExpertIn => self.expert_in = v,
            LayerRole::ExpertOut => self.expert_out = v,
            LayerRole::Readout => self.readout = v,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(LayerRole, V) -> U) -> LayerMap<U> {
        LayerMap {
            embed: f(LayerRole::Embed, self.embed),
            router: f(LayerRole::Router, self.router),
            expert_in: f(LayerRole::ExpertIn, self.expert_in),
            expert_out: f(LayerRole::ExpertOut, self.expert_out),
            readout: f(LayerRole::Readout, self.readout),
        }
    }
}

impl Default for LayerMap<f64> {
    fn default() -> Self {
        Self::splat(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_cannot_exceed_m() {
        assert!(ScaleVector::new(8, 4, 2, 3, 3).is_err());
        assert!(ScaleVector::new(8, 4, 2, 2, 3).is_ok());
        assert!(ScaleVector::new(0, 4, 2, 2, 3).is_err());
    }
}
