use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_weights, LayerMap, LayerRole, MoEWeights, ScaleVector};
use crate::scalar::Scalar;

/// Co-scaling regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    /// `N, N_e` grow; `M, K` fixed.
    #[serde(alias = "i")]
    I,
    /// `N, M, K` grow; `N_e` fixed.
    #[serde(alias = "ii")]
    II,
    /// Everything grows proportionally.
    #[serde(alias = "iii")]
    III,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    /// Standard parameterization: fan-in init, one global learning rate.
    Sp,
    /// Maximal-update parameterization.
    Mup,
    /// Maximally scale-stable parameterization.
    Mssp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

macro_rules! named_enum {
    ($ty:ident, $what:literal, { $($v:ident => $s:literal),+ $(,)? }) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $($ty::$v => $s),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $(x if x == $s.to_ascii_lowercase() => Ok($ty::$v),)+
                    _ => Err(Error::Unsupported(format!(concat!("unknown ", $what, " '{}'"), s))),
                }
            }
        }
    };
}

named_enum!(Regime, "regime", { I => "I", II => "II", III => "III" });
named_enum!(Parameterization, "parameterization", { Sp => "sp", Mup => "mup", Mssp => "mssp" });
named_enum!(Optimizer, "optimizer", { Sgd => "sgd", Adam => "adam" });

/// Evaluated hyperparameters of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerRule {
    pub layer: LayerRole,
    pub init_std: f64,
    pub sgd_lr: f64,
    pub adam_lr: f64,
    /// Absolute Adam epsilon for this layer.
    pub adam_eps: f64,
}

/// Tuning knobs applied on top of the scaling rules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    #[serde(default)]
    pub init: LayerMap<f64>,
    #[serde(default)]
    pub lr: LayerMap<f64>,
}

impl Default for Multipliers {
    fn default() -> Self {
        Self { init: LayerMap::splat(1.0), lr: LayerMap::splat(1.0) }
    }
}

impl Multipliers {
    /// The six-knob form: global init, global lr, and one lr knob per layer.
    pub fn from_knobs(global_init: f64, global_lr: f64, layer_lr: LayerMap<f64>) -> Self {
        Self { init: LayerMap::splat(global_init), lr: layer_lr.map(|_, v| v * global_lr) }
    }

    pub fn validate(&self) -> Result<()> {
        for role in LayerRole::ALL {
            for (what, v) in [("init", self.init.get(role)), ("lr", self.lr.get(role))] {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::Config(format!("{what} multiplier for {role} must be finite and nonnegative, got {v}")));
                }
            }
        }
        Ok(())
    }
}

/// Concrete per-layer rules for one (regime, parameterization, optimizer) at one scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSet {
    pub regime: Regime,
    pub parameterization: Parameterization,
    pub optimizer: Optimizer,
    pub scale: ScaleVector,
    pub rules: LayerMap<LayerRule>,
    pub shared_experts: bool,
    pub readout_zero: bool,
    pub base_lr: f64,
    pub base_eps: f64,
    pub multipliers: Multipliers,
}

impl RuleSet {
    pub fn rule(&self, role: LayerRole) -> &LayerRule {
        match role {
            LayerRole::Embed => &self.rules.embed,
            LayerRole::Router => &self.rules.router,
            LayerRole::ExpertIn => &self.rules.expert_in,
            LayerRole::ExpertOut => &self.rules.expert_out,
            LayerRole::Readout => &self.rules.readout,
        }
    }

    /// Init std including its multiplier.
    pub fn init_std(&self, role: LayerRole) -> f64 {
        self.rule(role).init_std * self.multipliers.init.get(role)
    }

    /// Learning rate of the configured optimizer including its multiplier.
    pub fn lr(&self, role: LayerRole) -> f64 {
        let r = self.rule(role);
        let base = match self.optimizer {
            Optimizer::Sgd => r.sgd_lr,
            Optimizer::Adam => r.adam_lr,
        };
        base * self.multipliers.lr.get(role)
    }

    pub fn eps(&self, role: LayerRole) -> f64 {
        self.rule(role).adam_eps
    }

    pub fn init_stds(&self) -> LayerMap<f64> {
        LayerMap::from_fn(|r| self.init_std(r))
    }

    pub fn with_multipliers(mut self, multipliers: Multipliers) -> Result<Self> {
        multipliers.validate()?;
        self.multipliers = multipliers;
        Ok(self)
    }

    pub fn with_optimizer(mut self, optimizer: Optimizer) -> Self {
        self.optimizer = optimizer;
        self
    }

    /// Fresh weights drawn with these rules.
    pub fn build_weights<T: Scalar>(&self, seed: u64) -> Result<MoEWeights<T>> {
        build_weights(&self.scale, &self.init_stds(), self.shared_experts, self.readout_zero, seed)
    }
}

fn check_base(eta: f64, eps: f64) -> Result<()> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::Config(format!("base learning rate must be positive, got {eta}")));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("base epsilon must be positive, got {eps}")));
    }
    Ok(())
}

/// Per-layer factors in role order: embed, router, expert_in, expert_out, readout.
type Row = [f64; 5];

fn assemble(std: Row, sgd: Row, adam: Row, eps: Row, eta: f64, base_eps: f64) -> LayerMap<LayerRule> {
    let idx = |r: LayerRole| LayerRole::ALL.iter().position(|x| *x == r).unwrap_or(0);
    LayerMap::from_fn(|layer| {
        let i = idx(layer);
        LayerRule { layer, init_std: std[i], sgd_lr: eta * sgd[i], adam_lr: eta * adam[i], adam_eps: base_eps * eps[i] }
    })
}

/// Scaling rules for `(regime, param, optimizer)` evaluated at `scale`.
///
/// SP uses a global learning rate with width exponent 0; see [`sp_rules`] for other exponents.
pub fn rules_for(
    regime: Regime,
    param: Parameterization,
    optimizer: Optimizer,
    scale: &ScaleVector,
    eta: f64,
    eps: f64,
) -> Result<RuleSet> {
    if param == Parameterization::Sp {
        return sp_rules(regime, optimizer, scale, eta, eps, 0.0);
    }
    check_base(eta, eps)?;
    scale.validate()?;
    let n = scale.n as f64;
    let ne = scale.n_e as f64;
    let m = scale.m as f64;
    let d = scale.d as f64;
    let mssp = param == Parameterization::Mssp;

    let (std, sgd, adam, epsf) = match regime {
        Regime::I => (
            [d.powf(-0.5), if mssp { 0.0 } else { 1.0 / n }, n.powf(-0.5), ne.powf(-0.5), 1.0 / n],
            [n, 1.0 / n, 1.0, 1.0, 1.0 / n],
            [1.0, 1.0 / n, 1.0 / n, 1.0 / ne, 1.0 / n],
            [1.0 / n, 1.0, 1.0 / n, 1.0 / n, 1.0],
        ),
        Regime::II => (
            [d.powf(-0.5), n.powf(-0.5), n.powf(-0.5), if mssp { (m / ne).sqrt() } else { ne.powf(-0.5) }, 1.0 / n],
            [n, m / n, m / n, m * n, 1.0 / n],
            [1.0, 1.0 / n, 1.0 / n, 1.0 / ne, 1.0 / n],
            [1.0 / n, 1.0 / m, 1.0 / m, 1.0 / (n * m), 1.0],
        ),
        Regime::III => (
            [d.powf(-0.5), n.powf(-0.5), n.powf(-0.5), ne.powf(-0.5), 1.0 / n],
            [n, 1.0, m, m, 1.0 / n],
            [1.0, 1.0 / n, 1.0 / n, 1.0 / n, 1.0 / n],
            [1.0 / n, 1.0 / m, 1.0 / (n * m), 1.0 / (n * m), 1.0],
        ),
    };
    Ok(RuleSet {
        regime,
        parameterization: param,
        optimizer,
        scale: *scale,
        rules: assemble(std, sgd, adam, epsf, eta, eps),
        shared_experts: mssp && regime == Regime::III,
        readout_zero: mssp && regime != Regime::I,
        base_lr: eta,
        base_eps: eps,
        multipliers: Multipliers::default(),
    })
}

/// Standard parameterization: `1/sqrt(fan_in)` init everywhere, global learning
/// rate `eta * N^-c`, global epsilon.
pub fn sp_rules(regime: Regime, optimizer: Optimizer, scale: &ScaleVector, eta: f64, eps: f64, c: f64) -> Result<RuleSet> {
    check_base(eta, eps)?;
    scale.validate()?;
    if !c.is_finite() {
        return Err(Error::Config(format!("SP lr exponent must be finite, got {c}")));
    }
    let n = scale.n as f64;
    let lr = n.powf(-c);
    let std = [(scale.d as f64).powf(-0.5), n.powf(-0.5), n.powf(-0.5), (scale.n_e as f64).powf(-0.5), n.powf(-0.5)];
    Ok(RuleSet {
        regime,
        parameterization: Parameterization::Sp,
        optimizer,
        scale: *scale,
        rules: assemble(std, [lr; 5], [lr; 5], [1.0; 5], eta, eps),
        shared_experts: false,
        readout_zero: false,
        base_lr: eta,
        base_eps: eps,
        multipliers: Multipliers::default(),
    })
}
