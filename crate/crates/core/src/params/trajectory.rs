use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ScaleVector;
use crate::params::Regime;

/// A base scale plus the regime deciding which dimensions grow with width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeTrajectory {
    pub regime: Regime,
    pub base: ScaleVector,
}

impl RegimeTrajectory {
    pub fn new(regime: Regime, base: ScaleVector) -> Result<Self> {
        base.validate()?;
        Ok(Self { regime, base })
    }

    /// Base scales of the MLP experiments: `N = N_e = 128, M = 8` in I and III,
    /// `N = 128, M = N/16, N_e = 16` in II. Soft routing (`K = M`).
    pub fn standard(regime: Regime, d: usize) -> Self {
        let base = match regime {
            Regime::I | Regime::III => ScaleVector { n: 128, n_e: 128, m: 8, k: 8, d },
            Regime::II => ScaleVector { n: 128, n_e: 16, m: 8, k: 8, d },
        };
        Self { regime, base }
    }

    /// `M / N`.
    pub fn kappa(&self) -> f64 {
        self.base.m as f64 / self.base.n as f64
    }

    /// `N_e / N`.
    pub fn iota(&self) -> f64 {
        self.base.n_e as f64 / self.base.n as f64
    }
}

fn grow(v: usize, n: f64) -> usize {
    ((v as f64 * n).round() as usize).max(1)
}

/// Scale at width multiplier `n`. `D` never scales.
pub fn scale_trajectory(traj: &RegimeTrajectory, n: f64) -> Result<ScaleVector> {
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::Config(format!("width multiplier must be positive, got {n}")));
    }
    let b = traj.base;
    let (grow_n_e, grow_m) = match traj.regime {
        Regime::I => (true, false),
        Regime::II => (false, true),
        Regime::III => (true, true),
    };
    let n_e = if grow_n_e { grow(b.n_e, n) } else { b.n_e };
    let (m, k) = if grow_m { (grow(b.m, n), grow(b.k, n)) } else { (b.m, b.k) };
    ScaleVector::new(grow(b.n, n), n_e, m, k.min(m), b.d)
}
