//! Router logit scale across widths under soft softmax routing in Regime I.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::coord::run_cells;
use crate::linalg::ols_loglog_fit;
use crate::model::GateKind;
use crate::params::{Parameterization, Regime};
use crate::probes::TermId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiStepFit {
    pub step: usize,
    /// `None` when every width has exactly zero logits.
    pub slope: Option<f64>,
    pub r_squared: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterCollapseReport {
    /// Seed-mean `RMS(psi)` per `(width, step)`.
    pub psi: Vec<(usize, usize, f64)>,
    pub fits: Vec<PsiStepFit>,
    /// Every run starts from exactly zero logits.
    pub initial_psi_zero: bool,
    /// Slope at the last probed step lies below `-0.25`.
    pub decaying: bool,
}

impl RouterCollapseReport {
    pub fn last_fit(&self) -> Option<&PsiStepFit> {
        self.fits.last()
    }
}

/// Threshold on the logit-scale exponent for calling the router collapsed.
pub const COLLAPSE_SLOPE: f64 = -0.25;

/// Trains the ladder and fits the width exponent of `RMS(psi)` at every probed step.
pub fn router_collapse_check(config: &RunConfig, jobs: usize) -> Result<RouterCollapseReport> {
    if config.regime != Regime::I || config.gate.kind != GateKind::Softmax || config.top_k_fraction.is_some() {
        return Err(Error::Config("router collapse check needs Regime I with soft softmax routing".into()));
    }
    if config.parameterization == Parameterization::Sp {
        return Err(Error::Config("router collapse check covers muP and MSSP only".into()));
    }
    config.validate_for_fit()?;
    let runs = run_cells(config, jobs)?;
    let mut acc: std::collections::BTreeMap<(usize, usize), (f64, usize)> = Default::default();
    let mut initial_psi_zero = true;
    for r in &runs {
        for p in &r.probes {
            let v = p.terms.get(&TermId::Psi).copied().unwrap_or(f64::NAN);
            if p.step == 0 && v != 0.0 {
                initial_psi_zero = false;
            }
            let e = acc.entry((r.scale.n, p.step)).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    let psi: Vec<(usize, usize, f64)> = acc.into_iter().map(|((n, s), (sum, c))| (n, s, sum / c as f64)).collect();
    let mut steps: Vec<usize> = psi.iter().map(|p| p.1).collect();
    steps.sort_unstable();
    steps.dedup();
    let fits: Vec<PsiStepFit> = steps
        .into_iter()
        .map(|step| {
            let pts: Vec<(f64, f64)> = psi.iter().filter(|p| p.1 == step).map(|p| (p.0 as f64, p.2)).collect();
            match ols_loglog_fit(&pts) {
                Ok(f) => PsiStepFit { step, slope: Some(f.slope), r_squared: Some(f.r_squared) },
                Err(_) => PsiStepFit { step, slope: None, r_squared: None },
            }
        })
        .collect();
    let decaying = fits.last().and_then(|f| f.slope).is_some_and(|s| s < COLLAPSE_SLOPE);
    Ok(RouterCollapseReport { psi, fits, initial_psi_zero, decaying })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::task::TaskSpec;
    use crate::model::{GateSpec, ScaleVector};

    fn tiny(param: Parameterization) -> RunConfig {
        let mut cfg = RunConfig::coord_check(Regime::I, param);
        cfg.gate = GateSpec::softmax();
        cfg.task = TaskSpec { dataset_size: 64, ..TaskSpec::gaussian_teacher(4) };
        cfg.base_scale = Some(ScaleVector::new(8, 8, 3, 3, 4).unwrap());
        cfg.width_multipliers = vec![1.0, 2.0, 4.0];
        cfg.seeds = vec![0, 1];
        cfg.steps = 3;
        cfg.batch = 4;
        cfg
    }

    #[test]
    fn zero_router_init_and_lr_keep_logits_zero() {
        let mut cfg = tiny(Parameterization::Mssp);
        cfg.multipliers.layer_lr.router = 0.0;
        let r = router_collapse_check(&cfg, 1).unwrap();
        assert!(r.initial_psi_zero);
        assert!(r.psi.iter().all(|p| p.2 == 0.0));
        assert!(r.fits.iter().all(|f| f.slope.is_none()));
        assert!(!r.decaying);
    }

    #[test]
    fn other_regimes_and_gates_are_rejected() {
        let mut cfg = tiny(Parameterization::Mup);
        cfg.gate = GateSpec::sigmoid();
        assert!(router_collapse_check(&cfg, 1).is_err());
        let mut cfg = tiny(Parameterization::Mup);
        cfg.regime = Regime::II;
        assert!(router_collapse_check(&cfg, 1).is_err());
    }
}
