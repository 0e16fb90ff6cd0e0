use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::task::TaskSpec;
use crate::model::{GateSpec, LayerMap, ScaleVector};
use crate::params::{
    rules_for, scale_trajectory, sp_rules, Multipliers, Optimizer, Parameterization, Regime, RegimeTrajectory, RuleSet,
};

pub const DEFAULT_PROBE_STEPS: [usize; 10] = [0, 1, 2, 3, 5, 10, 20, 50, 100, 200];

/// Tunable knobs: global init, global lr and one lr per layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiplierKnobs {
    #[serde(default = "one")]
    pub global_init: f64,
    #[serde(default = "one")]
    pub global_lr: f64,
    #[serde(default = "ones")]
    pub layer_lr: LayerMap<f64>,
}

fn one() -> f64 {
    1.0
}

fn ones() -> LayerMap<f64> {
    LayerMap::splat(1.0)
}

impl Default for MultiplierKnobs {
    fn default() -> Self {
        Self { global_init: 1.0, global_lr: 1.0, layer_lr: ones() }
    }
}

impl MultiplierKnobs {
    pub fn to_multipliers(&self) -> Multipliers {
        Multipliers::from_knobs(self.global_init, self.global_lr, self.layer_lr)
    }
}

/// Geometric grid `start * factor^i`, `i < count`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometricGrid {
    pub start: f64,
    pub factor: f64,
    pub count: usize,
}

impl GeometricGrid {
    pub fn values(&self) -> Result<Vec<f64>> {
        if !(self.start > 0.0 && self.factor > 1.0 && self.count > 0 && self.start.is_finite() && self.factor.is_finite()) {
            return Err(Error::Config(format!("geometric grid needs start > 0, factor > 1, count > 0; got {self:?}")));
        }
        Ok((0..self.count).map(|i| self.start * self.factor.powi(i as i32)).collect())
    }
}

/// Values tried for each knob in a multiplier search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneGrid {
    pub global_init: Vec<f64>,
    pub global_lr: Vec<f64>,
    pub layer_lr: LayerMap<Vec<f64>>,
    /// Width multiplier of the tuning run.
    #[serde(default = "one")]
    pub width: f64,
}

/// One campaign, read from a JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub regime: Regime,
    pub parameterization: Parameterization,
    #[serde(default = "sgd")]
    pub optimizer: Optimizer,
    #[serde(default = "GateSpec::sigmoid")]
    pub gate: GateSpec,
    /// Scale at width multiplier 1; the regime's standard base when absent.
    #[serde(default)]
    pub base_scale: Option<ScaleVector>,
    /// `K = round(fraction * M)` at every width; soft routing when absent.
    #[serde(default)]
    pub top_k_fraction: Option<f64>,
    pub width_multipliers: Vec<f64>,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_betas")]
    pub adam_betas: (f64, f64),
    /// Width exponent `c` of the SP learning rate `lr * N^-c`.
    #[serde(default)]
    pub sp_lr_exponent: f64,
    #[serde(default)]
    pub multipliers: MultiplierKnobs,
    pub task: TaskSpec,
    #[serde(default = "default_probe_steps")]
    pub probe_steps: Vec<usize>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_r2_floor")]
    pub r2_floor: f64,
    /// The t2+ summary pools only t2+ probes at or after this step.
    #[serde(default)]
    pub t2_from: usize,
    #[serde(default)]
    pub lr_grid: Option<GeometricGrid>,
    #[serde(default)]
    pub tune_grid: Option<TuneGrid>,
}

fn sgd() -> Optimizer {
    Optimizer::Sgd
}

fn default_eps() -> f64 {
    1e-8
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.95)
}

fn default_probe_steps() -> Vec<usize> {
    DEFAULT_PROBE_STEPS.to_vec()
}

fn default_tolerance() -> f64 {
    0.15
}

fn default_r2_floor() -> f64 {
    0.8
}

impl RunConfig {
    /// Defaults for a coordinate check of `(regime, param)` with SGD.
    pub fn coord_check(regime: Regime, parameterization: Parameterization) -> Self {
        let task = TaskSpec::gaussian_teacher(16);
        Self {
            regime,
            parameterization,
            optimizer: Optimizer::Sgd,
            gate: GateSpec::sigmoid(),
            base_scale: None,
            top_k_fraction: None,
            width_multipliers: vec![0.5, 1.0, 2.0, 4.0, 8.0],
            seeds: vec![0, 1, 2, 3],
            steps: 200,
            batch: 32,
            lr: 0.1,
            eps: default_eps(),
            adam_betas: default_betas(),
            sp_lr_exponent: 0.0,
            multipliers: MultiplierKnobs::default(),
            task,
            probe_steps: default_probe_steps(),
            tolerance: default_tolerance(),
            r2_floor: default_r2_floor(),
            t2_from: 0,
            lr_grid: None,
            tune_grid: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn trajectory(&self) -> Result<RegimeTrajectory> {
        let base = self.base_scale.unwrap_or_else(|| RegimeTrajectory::standard(self.regime, self.task.input_dim).base);
        if base.d != self.task.input_dim {
            return Err(Error::Config(format!("base scale D = {} but task input_dim = {}", base.d, self.task.input_dim)));
        }
        RegimeTrajectory::new(self.regime, base)
    }

    /// Scale at width multiplier `mult`, with `K` set by the top-k fraction.
    pub fn scale_at(&self, mult: f64) -> Result<ScaleVector> {
        let mut s = scale_trajectory(&self.trajectory()?, mult)?;
        s.k = match self.top_k_fraction {
            Some(f) => ((f * s.m as f64).round() as usize).clamp(1, s.m),
            None => s.m,
        };
        Ok(s)
    }

    pub fn gate_at(&self, scale: &ScaleVector) -> GateSpec {
        GateSpec { topk: self.top_k_fraction.map(|_| scale.k), ..self.gate }
    }

    pub fn rules_at(&self, scale: &ScaleVector) -> Result<RuleSet> {
        let rules = match self.parameterization {
            Parameterization::Sp => sp_rules(self.regime, self.optimizer, scale, self.lr, self.eps, self.sp_lr_exponent)?,
            p => rules_for(self.regime, p, self.optimizer, scale, self.lr, self.eps)?,
        };
        rules.with_multipliers(self.multipliers.to_multipliers())
    }

    /// Probe steps within the run, sorted and deduplicated.
    pub fn schedule(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.probe_steps.iter().copied().filter(|&t| t <= self.steps).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.task.validate()?;
        if self.width_multipliers.is_empty() || self.width_multipliers.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return bad("width_multipliers must be a nonempty list of positive numbers".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.steps < 3 {
            return bad(format!("steps must be at least 3, got {}", self.steps));
        }
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite() && self.eps > 0.0 && self.eps.is_finite()) {
            return bad(format!("lr {} and eps {} must be positive", self.lr, self.eps));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("adam betas ({b1}, {b2}) must lie in [0,1)"));
        }
        if self.gate.topk.is_some() {
            return bad("set top_k_fraction instead of gate.topk so that K follows the width ladder".into());
        }
        if let Some(f) = self.top_k_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("top_k_fraction must lie in (0, 1], got {f}"));
            }
        }
        if !self.schedule().iter().any(|&t| t >= self.t2_from.max(2)) {
            return bad(format!("no probe step at or after t2_from = {}", self.t2_from));
        }
        if !(self.tolerance >= 0.0 && (0.0..=1.0).contains(&self.r2_floor)) {
            return bad(format!("tolerance {} / r2_floor {} out of range", self.tolerance, self.r2_floor));
        }
        self.multipliers.to_multipliers().validate()?;
        for &w in &self.width_multipliers {
            let s = self.scale_at(w)?;
            self.gate_at(&s).validate(s.m)?;
        }
        Ok(())
    }

    /// Exponent fits need at least three widths and two seeds.
    pub fn validate_for_fit(&self) -> Result<()> {
        self.validate()?;
        let mut ns: Vec<usize> = self.width_multipliers.iter().map(|&w| self.scale_at(w).map(|s| s.n)).collect::<Result<_>>()?;
        ns.sort_unstable();
        ns.dedup();
        if ns.len() < 3 {
            return Err(Error::Config(format!("exponent fits need at least 3 distinct widths, got {}", ns.len())));
        }
        if self.seeds.len() < 2 {
            return Err(Error::Config(format!("exponent fits need at least 2 seeds, got {}", self.seeds.len())));
        }
        Ok(())
    }
}
