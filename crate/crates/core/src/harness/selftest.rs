//! Oracle suite behind the `selftest` command: central finite differences
//! against the analytic backward, decomposition identities along real
//! training runs, and the Adam epsilon/gradient-scale identity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::run::{mse_and_chi, run_training};
use crate::harness::task::{Dataset, TaskSpec};
use crate::linalg::{gaussian_matrix, Matrix};
use crate::model::{backward, build_weights, forward, GateSpec, LayerMap, LayerRole, MoEWeights, ScaleVector};
use crate::optim::{adam_step, sgd_step, AdamState};
use crate::params::{rules_for, Optimizer, Parameterization, Regime};
use crate::rng::{derive_seed, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub metric: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, metric: f64, tolerance: f64) -> Self {
        Self { name: name.into(), metric, tolerance, pass: metric <= tolerance }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelftestReport {
    pub checks: Vec<CheckOutcome>,
}

impl SelftestReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

const FD_STEP: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-5;
pub const ADAM_TOLERANCE: f64 = 1e-12;
pub const RANK_ONE_TOLERANCE: f64 = 1e-12;

fn objective(w: &MoEWeights<f64>, x: &Matrix<f64>, chi: &[f64], gate: &GateSpec) -> Result<f64> {
    Ok(forward(w, x, gate)?.outputs().iter().zip(chi).map(|(f, c)| f * c).sum())
}

/// Largest relative gap between the analytic gradient of `sum_b chi_b f_b` and
/// its central finite difference, over every entry of every tensor. Weights
/// carry random nonzero deltas so both halves of each split are exercised.
pub fn finite_difference_check(scale: &ScaleVector, gate: &GateSpec, seed: u64) -> Result<f64> {
    gate.validate(scale.m)?;
    let mut w: MoEWeights<f64> = build_weights(scale, &LayerMap::splat(0.7), false, false, seed)?;
    for (k, (_, t)) in w.tensors_mut().into_iter().enumerate() {
        let (r, c) = t.shape();
        *t.delta_mut() = gaussian_matrix(r, c, 0.3, derive_seed(seed, &[tag("fd-delta"), k as u64]))?;
    }
    let x = gaussian_matrix::<f64>(scale.d, 3, 1.0, derive_seed(seed, &[tag("fd-x")]))?;
    let chi = [0.7, -1.1, 0.4];
    let cache = forward(&w, &x, gate)?;
    let grads = backward(&w, &cache, &chi, gate)?;
    let mut worst = 0.0f64;
    for (k, g) in grads.weight_grads().into_iter().enumerate() {
        let floor = g.max_abs().max(1e-8);
        for idx in 0..g.len() {
            let eval = |h: f64| -> Result<f64> {
                let mut p = w.clone();
                p.tensors_mut()[k].1.delta_mut().as_mut_slice()[idx] += h;
                objective(&p, &x, &chi, gate)
            };
            let fd = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
            let an = g.as_slice()[idx];
            worst = worst.max((fd - an).abs() / fd.abs().max(floor));
        }
    }
    Ok(worst)
}

fn tiny_config(regime: Regime, param: Parameterization, optimizer: Optimizer, gate: GateSpec, top_k: Option<f64>) -> RunConfig {
    let mut cfg = RunConfig::coord_check(regime, param);
    cfg.optimizer = optimizer;
    cfg.gate = gate;
    cfg.top_k_fraction = top_k;
    cfg.task = TaskSpec { dataset_size: 64, ..TaskSpec::gaussian_teacher(4) };
    cfg.base_scale = Some(ScaleVector::new(8, 4, 4, 4, 4).expect("static scale"));
    cfg.width_multipliers = vec![1.0];
    cfg.seeds = vec![0];
    cfg.steps = 6;
    cfg.batch = 5;
    cfg.lr = 0.05;
    cfg.eps = 1e-6;
    cfg.probe_steps = (0..=6).collect();
    cfg
}

/// Trains a small model and probes every step; every decomposition checks
/// its own identity, so success means all of them held. Returns probes taken.
pub fn identity_check(
    regime: Regime,
    param: Parameterization,
    optimizer: Optimizer,
    gate: GateSpec,
    top_k: Option<f64>,
    seed: u64,
) -> Result<usize> {
    let cfg = tiny_config(regime, param, optimizer, gate, top_k);
    let rec = run_training(&cfg, 1.0, seed)?;
    if rec.diverged() {
        return Err(Error::Diverged { tensor: "identity check run".into() });
    }
    Ok(rec.probes.len())
}

/// Runs Adam twice for `steps` steps from the same weights and batches: once on
/// the loss gradient `g` with epsilon `eps`, once on `c g` with epsilon `c eps`.
/// Returns the largest relative gap between the two weight trajectories.
pub fn adam_faithfulness_check(c: f64, steps: usize, seed: u64) -> Result<f64> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Config(format!("gradient scale must be positive, got {c}")));
    }
    let scale = ScaleVector::new(16, 8, 4, 4, 4)?;
    let gate = GateSpec::sigmoid();
    let (lr, eps) = (1e-2, 1e-4);
    let plain = rules_for(Regime::II, Parameterization::Mup, Optimizer::Adam, &scale, lr, eps)?;
    let scaled = rules_for(Regime::II, Parameterization::Mup, Optimizer::Adam, &scale, lr, eps * c)?;
    let data = Dataset::generate(&TaskSpec { dataset_size: 128, ..TaskSpec::gaussian_teacher(4) }, seed)?;
    let mut wa: MoEWeights<f64> = plain.build_weights(seed)?;
    let mut wb = wa.clone();
    let (mut sa, mut sb) = (AdamState::new(&wa), AdamState::new(&wb));
    let mut worst = 0.0f64;
    for t in 0..steps {
        let (x, y) = data.batch(t, 8);
        let ca = forward(&wa, &x, &gate)?;
        let ga = backward(&wa, &ca, &mse_and_chi(ca.outputs(), &y).1, &gate)?;
        let cb = forward(&wb, &x, &gate)?;
        let chi_b: Vec<f64> = mse_and_chi(cb.outputs(), &y).1.iter().map(|v| v * c).collect();
        let gb = backward(&wb, &cb, &chi_b, &gate)?;
        adam_step(&mut wa, &ga, &plain, &mut sa)?;
        adam_step(&mut wb, &gb, &scaled, &mut sb)?;
        for ((_, a), (_, b)) in wa.tensors().into_iter().zip(wb.tensors()) {
            let floor = a.delta().max_abs().max(f64::MIN_POSITIVE);
            worst = worst.max(a.delta().sub(b.delta()).max_abs() / floor);
        }
    }
    Ok(worst)
}

/// Trains the Regime II ladder base at batch size one with SGD until the
/// expert output layers first move, then compares each `Delta W3_i` with the
/// outer product `-lr3 chi omega_i W4^T h2_i^T` built from the same step's
/// forward pass. Returns the largest entry gap relative to the largest entry
/// of the predicted update, together with the step at which it happened.
pub fn rank_one_update_check(param: Parameterization, seed: u64) -> Result<(usize, f64)> {
    let mut cfg = RunConfig::coord_check(Regime::II, param);
    cfg.base_scale = Some(ScaleVector::new(16, 8, 4, 4, 4)?);
    cfg.task = TaskSpec { dataset_size: 16, ..TaskSpec::gaussian_teacher(4) };
    let scale = cfg.scale_at(1.0)?;
    let rules = cfg.rules_at(&scale)?;
    let gate = cfg.gate_at(&scale);
    let lr3 = rules.lr(LayerRole::ExpertOut);
    let data = Dataset::generate(&cfg.task, seed)?;
    let mut w: MoEWeights<f64> = rules.build_weights(seed)?;
    for t in 0..8 {
        let (x, y) = data.batch(t, 1);
        let cache = forward(&w, &x, &gate)?;
        let chi = mse_and_chi(cache.outputs(), &y).1;
        let g = backward(&w, &cache, &chi, &gate)?;
        let before = w.clone();
        sgd_step(&mut w, &g, &rules)?;
        let moves: Vec<_> = w.w3.iter().zip(&before.w3).map(|(a, b)| a.delta().sub(b.delta())).collect();
        if moves.iter().all(|d| d.max_abs() == 0.0) {
            continue;
        }
        let w4t = before.w4.effective().transpose();
        let (mut gap, mut size) = (0.0f64, 0.0f64);
        for (i, actual) in moves.iter().enumerate() {
            let pred = w4t.matmul(&cache.h2[i].transpose()).scale(-lr3 * chi[0] * cache.omega[(i, 0)]);
            gap = gap.max(actual.sub(&pred).max_abs());
            size = size.max(pred.max_abs());
        }
        return Ok((t, gap / size));
    }
    Err(Error::Config("expert output layers never moved within eight steps".into()))
}

/// The full oracle suite on small instances.
pub fn run_selftest() -> Result<SelftestReport> {
    let mut checks = Vec::new();
    let fd_scale = ScaleVector::new(6, 3, 3, 3, 3)?;
    let gates = [
        ("sigmoid", GateSpec::sigmoid()),
        ("softmax", GateSpec::softmax()),
        ("sigmoid top-2", GateSpec::sigmoid().with_topk(2)),
        ("softmax top-2", GateSpec::softmax().with_topk(2)),
    ];
    for (i, (name, gate)) in gates.iter().enumerate() {
        let err = finite_difference_check(&fd_scale, gate, 100 + i as u64)?;
        checks.push(CheckOutcome::new(format!("finite differences, {name}"), err, FD_TOLERANCE));
    }
    for regime in [Regime::I, Regime::II, Regime::III] {
        for param in [Parameterization::Mup, Parameterization::Mssp] {
            for optimizer in [Optimizer::Sgd, Optimizer::Adam] {
                for (gname, gate, top_k) in
                    [("sigmoid", GateSpec::sigmoid(), None), ("softmax top-k", GateSpec::softmax(), Some(0.5))]
                {
                    let name = format!("identities, {regime} {param} {optimizer} {gname}");
                    let metric = match identity_check(regime, param, optimizer, gate, top_k, 7) {
                        Ok(_) => 0.0,
                        Err(Error::Identity { rel_err, .. }) => rel_err,
                        Err(e) => return Err(e),
                    };
                    checks.push(CheckOutcome::new(name, metric, crate::probes::IDENTITY_TOL));
                }
            }
        }
    }
    for c in [1e-3, 7.0, 1024.0] {
        let err = adam_faithfulness_check(c, 10, 3)?;
        checks.push(CheckOutcome::new(format!("adam faithfulness, c = {c}"), err, ADAM_TOLERANCE));
    }
    for param in [Parameterization::Mup, Parameterization::Mssp] {
        let (step, err) = rank_one_update_check(param, 11)?;
        checks.push(CheckOutcome::new(format!("rank-one w3 update, {param} (step {step})"), err, RANK_ONE_TOLERANCE));
    }
    Ok(SelftestReport { checks })
}
