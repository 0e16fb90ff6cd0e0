use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::task::Dataset;
use crate::linalg::Matrix;
use crate::model::{backward, forward, GateSpec, MoEWeights, ScaleVector};
use crate::optim::{adam_step, sgd_step, AdamState};
use crate::params::{Optimizer, RuleSet};
use crate::probes::{base_forward, collect_series, probe_all, TermMap, TermSeries};
use crate::rng::{derive_seed, tag};

/// Number of weight movements behind a probe: none, one, or two and more.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TimeClass {
    #[serde(rename = "t0")]
    T0,
    #[serde(rename = "t1")]
    T1,
    #[serde(rename = "t2+")]
    T2Plus,
}

impl TimeClass {
    pub const ALL: [TimeClass; 3] = [TimeClass::T0, TimeClass::T1, TimeClass::T2Plus];

    pub fn from_movements(moves: usize) -> Self {
        match moves {
            0 => TimeClass::T0,
            1 => TimeClass::T1,
            _ => TimeClass::T2Plus,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TimeClass::T0 => "t0",
            TimeClass::T1 => "t1",
            TimeClass::T2Plus => "t2+",
        }
    }
}

impl fmt::Display for TimeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TimeClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TimeClass::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| Error::Config(format!("unknown time class '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRecord {
    pub step: usize,
    pub class: TimeClass,
    pub terms: TermMap,
}

/// Outcome of one (width, seed) training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub width_multiplier: f64,
    pub scale: ScaleVector,
    pub seed: u64,
    /// Minibatch loss before each update.
    pub losses: Vec<f64>,
    pub probes: Vec<ProbeRecord>,
    /// Step at which a non-finite or oversized value appeared.
    pub diverged_at: Option<usize>,
    /// Loss on the probe batch after the last update; infinite after divergence.
    pub final_loss: f64,
}

impl RunRecord {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    pub fn series(&self) -> Vec<TermSeries> {
        let probes: Vec<(usize, TermMap)> = self.probes.iter().map(|p| (p.step, p.terms.clone())).collect();
        let mut out = collect_series(self.scale.n, self.seed, &probes);
        for s in &mut out {
            s.diverged = self.diverged();
        }
        out
    }
}

/// Mean squared error and `chi = dL/df = 2 (f - y) / B`.
pub fn mse_and_chi(f: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
    let b = f.len() as f64;
    let loss = f.iter().zip(y).map(|(a, t)| (a - t) * (a - t)).sum::<f64>() / b;
    let chi = f.iter().zip(y).map(|(a, t)| 2.0 * (a - t) / b).collect();
    (loss, chi)
}

/// Every probed term on the fixed probe batch.
pub fn probe_terms(w: &MoEWeights<f64>, x: &Matrix<f64>, gate: &GateSpec) -> Result<TermMap> {
    let cache = forward(w, x, gate)?;
    let cache0 = base_forward(w, x, gate)?;
    let grads = backward(w, &cache, &vec![1.0; cache.batch()], gate)?;
    probe_all(w, &cache, &cache0, &grads, gate)
}

/// Seed of the weight draw for a cell; independent across widths and seeds.
pub fn init_seed(seed: u64, n: usize) -> u64 {
    derive_seed(seed, &[tag("init"), n as u64])
}

/// Seed of the dataset; shared by every width so ladders see the same data.
pub fn data_seed(seed: u64) -> u64 {
    derive_seed(seed, &[tag("data")])
}

/// Options that change what a run records, not what it computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub probes: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { probes: true }
    }
}

/// Trains one cell. Divergence ends the run with a flag; probe identity
/// failures are returned as errors.
pub fn run_training(config: &RunConfig, width_multiplier: f64, seed: u64) -> Result<RunRecord> {
    run_training_with(config, width_multiplier, seed, RunOptions::default())
}

pub fn run_training_with(config: &RunConfig, width_multiplier: f64, seed: u64, opts: RunOptions) -> Result<RunRecord> {
    let scale = config.scale_at(width_multiplier)?;
    let rules = config.rules_at(&scale)?;
    let gate = config.gate_at(&scale);
    let w = rules.build_weights::<f64>(init_seed(seed, scale.n))?;
    let data = Dataset::generate(&config.task, data_seed(seed))?;
    train(config, &rules, &gate, w, &data, width_multiplier, seed, opts)
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::Diverged { .. })
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: &RunConfig,
    rules: &RuleSet,
    gate: &GateSpec,
    mut w: MoEWeights<f64>,
    data: &Dataset,
    width_multiplier: f64,
    seed: u64,
    opts: RunOptions,
) -> Result<RunRecord> {
    let schedule = config.schedule();
    let (px, py) = data.probe_batch(config.batch);
    let mut adam = AdamState::with_betas(&w, config.adam_betas.0, config.adam_betas.1);
    let mut rec = RunRecord {
        width_multiplier,
        scale: rules.scale,
        seed,
        losses: Vec::with_capacity(config.steps),
        probes: Vec::new(),
        diverged_at: None,
        final_loss: f64::INFINITY,
    };
    let mut moves = 0usize;
    let mut moved_once = false;

    for t in 0..=config.steps {
        if opts.probes && schedule.binary_search(&t).is_ok() {
            match probe_terms(&w, &px, gate) {
                Ok(terms) => rec.probes.push(ProbeRecord { step: t, class: TimeClass::from_movements(moves), terms }),
                Err(e) if is_divergence(&e) => {
                    rec.diverged_at = Some(t);
                    return Ok(rec);
                }
                Err(e) => return Err(e),
            }
        }
        if t == config.steps {
            break;
        }
        let (x, y) = data.batch(t, config.batch);
        let step = (|| -> Result<(f64, bool)> {
            let cache = forward(&w, &x, gate)?;
            let (loss, chi) = mse_and_chi(cache.outputs(), &y);
            let g = backward(&w, &cache, &chi, gate)?;
            let moved = w
                .tensors()
                .iter()
                .zip(g.weight_grads())
                .any(|((role, _), gr)| rules.lr(*role) != 0.0 && !gr.is_zero());
            match rules.optimizer {
                Optimizer::Sgd => sgd_step(&mut w, &g, rules)?,
                Optimizer::Adam => adam_step(&mut w, &g, rules, &mut adam)?,
            }
            Ok((loss, moved))
        })();
        match step {
            Ok((loss, moved)) if loss.is_finite() => {
                rec.losses.push(loss);
                // Adam keeps moving on stale moments once it has moved
                let moved = moved || (rules.optimizer == Optimizer::Adam && moved_once);
                if moved {
                    moves += 1;
                    moved_once = true;
                }
            }
            Ok(_) => {
                rec.diverged_at = Some(t);
                return Ok(rec);
            }
            Err(e) if is_divergence(&e) => {
                rec.diverged_at = Some(t);
                return Ok(rec);
            }
            Err(e) => return Err(e),
        }
    }
    match forward(&w, &px, gate) {
        Ok(c) => {
            let (loss, _) = mse_and_chi(c.outputs(), &py);
            rec.final_loss = loss;
        }
        Err(e) if is_divergence(&e) => rec.diverged_at = Some(config.steps),
        Err(e) => return Err(e),
    }
    if !rec.final_loss.is_finite() {
        rec.diverged_at.get_or_insert(config.steps);
        rec.final_loss = f64::INFINITY;
    }
    Ok(rec)
}
