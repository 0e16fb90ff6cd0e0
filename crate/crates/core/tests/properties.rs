use std::sync::OnceLock;

use proptest::prelude::*;

use moe_scaling::harness::{analyze, run_cells, run_training, PredictionCatalog, RunConfig, RunRecord, TaskSpec};
use moe_scaling::linalg::Matrix;
use moe_scaling::model::{backward, build_weights, dense_equivalent_forward, forward, MoEWeights};
use moe_scaling::optim::{adam_step, sgd_step, AdamState};
use moe_scaling::params::{emit_mixtral_config, rules_for, scale_trajectory, RegimeTrajectory};
use moe_scaling::{
    gaussian_matrix, ols_loglog_fit, rms_norm, GateSpec, LayerMap, LayerRole, Optimizer, Parameterization, Regime, ScaleVector,
};

fn small_scale() -> impl Strategy<Value = ScaleVector> {
    (2usize..10, 1usize..6, 1usize..6, 1usize..5).prop_map(|(n, n_e, m, d)| ScaleVector::new(n, n_e, m, m, d).unwrap())
}

fn any_gate() -> impl Strategy<Value = GateSpec> {
    prop_oneof![Just(GateSpec::sigmoid()), Just(GateSpec::softmax()), (0.1f64..3.0).prop_map(|b| GateSpec::softmax().with_beta(b))]
}

fn random_weights(s: &ScaleVector, seed: u64) -> MoEWeights<f64> {
    let mut w: MoEWeights<f64> = build_weights(s, &LayerMap::splat(0.8), false, false, seed).unwrap();
    for (k, (_, t)) in w.tensors_mut().into_iter().enumerate() {
        let (r, c) = t.shape();
        *t.delta_mut() = gaussian_matrix(r, c, 0.2, seed ^ (k as u64 + 1) << 20).unwrap();
    }
    w
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loglog_fit_recovers_exact_power_laws(p in -3.0f64..3.0, c in 0.01f64..100.0, n0 in 2.0f64..50.0, k in 3usize..7) {
        let pts: Vec<(f64, f64)> = (0..k).map(|i| {
            let w = n0 * 2f64.powi(i as i32);
            (w, c * w.powf(p))
        }).collect();
        let fit = ols_loglog_fit(&pts).unwrap();
        prop_assert!((fit.slope - p).abs() <= 1e-12, "{} vs {p}", fit.slope);
        prop_assert!((fit.r_squared - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn rms_is_absolutely_homogeneous(r in 1usize..6, cols in 1usize..6, c in -1e3f64..1e3, seed: u64) {
        let v = gaussian_matrix::<f64>(r, cols, 1.0, seed).unwrap();
        let lhs = rms_norm(&v.scale(c)).unwrap();
        let rhs = c.abs() * rms_norm(&v).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1e-300));
    }

    #[test]
    fn gaussian_matrix_is_bit_reproducible(r in 1usize..8, cols in 1usize..8, std in 0.0f64..5.0, seed: u64) {
        let a = gaussian_matrix::<f64>(r, cols, std, seed).unwrap();
        let b = gaussian_matrix::<f64>(r, cols, std, seed).unwrap();
        prop_assert_eq!(a.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn gates_are_normalized_or_bounded(logits in prop::collection::vec(-30.0f64..30.0, 1..9), beta in 0.1f64..4.0) {
        let m = logits.len();
        let all: Vec<usize> = (0..m).collect();
        let soft = GateSpec::softmax().with_beta(beta).gates(&logits, &all);
        prop_assert!((soft.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        // keep beta*logit where the logistic is not rounded to 1
        let tame: Vec<f64> = logits.iter().map(|l| l / 4.0).collect();
        let sig = GateSpec::sigmoid().with_beta(beta).gates(&tame, &all);
        prop_assert!(sig.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn top_k_activates_exactly_k_and_starves_the_rest(s in small_scale(), kf in 0.0f64..1.0, softmax: bool, seed in 0u64..1000) {
        let k = 1 + ((s.m - 1) as f64 * kf) as usize;
        let gate = if softmax { GateSpec::softmax() } else { GateSpec::sigmoid() }.with_topk(k);
        let w = random_weights(&s, seed);
        let x = gaussian_matrix::<f64>(s.d, 1, 1.0, seed + 7).unwrap();
        let cache = forward(&w, &x, &gate).unwrap();
        prop_assert_eq!(cache.active[0].len(), k);
        let g = backward(&w, &cache, &[1.0], &gate).unwrap();
        for i in 0..s.m {
            if cache.active[0].binary_search(&i).is_err() {
                prop_assert_eq!(cache.phi[(i, 0)], 0.0);
                prop_assert!(g.g_w2[i].is_zero() && g.g_w3[i].is_zero());
            }
        }
    }

    #[test]
    fn single_expert_block_is_a_dense_chain(n in 1usize..10, n_e in 1usize..6, d in 1usize..5, seed in 0u64..1000) {
        let s = ScaleVector::new(n, n_e, 1, 1, d).unwrap();
        let w = random_weights(&s, seed);
        let x = gaussian_matrix::<f64>(d, 1, 1.0, seed + 1).unwrap();
        // sigmoid weights the lone expert by phi; softmax over one expert gives exactly 1
        let f = forward(&w, &x, &GateSpec::softmax()).unwrap().outputs()[0];
        let dense = dense_equivalent_forward(&w, x.as_slice()).unwrap();
        prop_assert!((f - dense).abs() <= 1e-12 * dense.abs().max(1.0));
    }

    #[test]
    fn shared_init_experts_agree_at_init(mult in 0usize..3, seed in 0u64..1000) {
        let traj = RegimeTrajectory::new(Regime::III, ScaleVector { n: 16, n_e: 8, m: 4, k: 4, d: 4 }).unwrap();
        let s = scale_trajectory(&traj, [1.0, 2.0, 0.5][mult]).unwrap();
        let rules = rules_for(Regime::III, Parameterization::Mssp, Optimizer::Sgd, &s, 0.1, 1e-8).unwrap();
        prop_assert!(rules.shared_experts);
        let w: MoEWeights<f64> = rules.build_weights(seed).unwrap();
        let x = gaussian_matrix::<f64>(4, 3, 1.0, seed).unwrap();
        let cache = forward(&w, &x, &GateSpec::softmax()).unwrap();
        for i in 1..s.m {
            prop_assert_eq!(&cache.h2[i], &cache.h2[0]);
        }
        // sum of softmax gates is one, so aggregation returns the common expert output
        let gap = cache.h3.sub(&cache.h3i[0]).max_abs();
        prop_assert!(gap <= 1e-12 * cache.h3i[0].max_abs().max(1e-300));
    }

    #[test]
    fn mup_and_mssp_differ_only_in_regime_entries(regime_i in 0usize..3, opt_adam: bool) {
        let regime = [Regime::I, Regime::II, Regime::III][regime_i];
        let opt = if opt_adam { Optimizer::Adam } else { Optimizer::Sgd };
        let s = RegimeTrajectory::standard(regime, 16).base;
        let a = rules_for(regime, Parameterization::Mup, opt, &s, 0.1, 1e-8).unwrap();
        let b = rules_for(regime, Parameterization::Mssp, opt, &s, 0.1, 1e-8).unwrap();
        for role in LayerRole::ALL {
            let (ra, rb) = (a.rule(role), b.rule(role));
            prop_assert_eq!(ra.sgd_lr.to_bits(), rb.sgd_lr.to_bits());
            prop_assert_eq!(ra.adam_lr.to_bits(), rb.adam_lr.to_bits());
            prop_assert_eq!(ra.adam_eps.to_bits(), rb.adam_eps.to_bits());
            let listed = matches!((regime, role), (Regime::I, LayerRole::Router) | (Regime::II, LayerRole::ExpertOut));
            if !listed {
                prop_assert_eq!(ra.init_std.to_bits(), rb.init_std.to_bits(), "{} {}", regime, role);
            }
        }
        prop_assert_eq!(a.shared_experts != b.shared_experts, regime == Regime::III);
    }

    #[test]
    fn rules_follow_power_laws_along_the_ladder(regime_i in 0usize..3, param_i in 0usize..2, opt_adam: bool, i in 0i32..3, j in 0i32..3) {
        let regime = [Regime::I, Regime::II, Regime::III][regime_i];
        let param = [Parameterization::Mup, Parameterization::Mssp][param_i];
        let opt = if opt_adam { Optimizer::Adam } else { Optimizer::Sgd };
        let traj = RegimeTrajectory::standard(regime, 16);
        let at = |e: i32| {
            let s = scale_trajectory(&traj, 2f64.powi(e)).unwrap();
            rules_for(regime, param, opt, &s, 0.1, 1e-8).unwrap()
        };
        let (r0, ri, rj, rij) = (at(0), at(i), at(j), at(i + j));
        for role in LayerRole::ALL {
            let f = |r: &moe_scaling::params::RuleSet| {
                let x = r.rule(role);
                [x.init_std, x.sgd_lr, x.adam_lr, x.adam_eps]
            };
            for q in 0..4 {
                let (a0, ai, aj, aij) = (f(&r0)[q], f(&ri)[q], f(&rj)[q], f(&rij)[q]);
                if a0 == 0.0 {
                    prop_assert!(ai == 0.0 && aj == 0.0 && aij == 0.0);
                    continue;
                }
                // ratios of a power law are multiplicative: g(2^(i+j)) = g(2^i) g(2^j)
                let lhs = aij / a0;
                let rhs = (ai / a0) * (aj / a0);
                prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs(), "{regime} {param} {role} field {q}: {lhs} vs {rhs}");
            }
        }
        if regime == Regime::II && param == Parameterization::Mssp {
            let g = ri.rule(LayerRole::ExpertOut).init_std / r0.rule(LayerRole::ExpertOut).init_std;
            prop_assert!((g - 2f64.powf(i as f64 / 2.0)).abs() <= 1e-12 * g);
        }
    }

    #[test]
    fn emitter_is_pure(n in 1usize..4096, n_e in 1usize..512, m in 1usize..128, depth in 1usize..48, regime_i in 0usize..3) {
        let regime = [Regime::I, Regime::II, Regime::III][regime_i];
        let s = ScaleVector::new(n, n_e, m, m, 32).unwrap();
        prop_assert_eq!(emit_mixtral_config(regime, &s, depth, 1e-3, 1e-8).unwrap(), emit_mixtral_config(regime, &s, depth, 1e-3, 1e-8).unwrap());
    }

    #[test]
    fn optimizers_never_touch_base_and_zero_lr_freezes(s in small_scale(), gate in any_gate(), adam: bool, frozen in 0usize..5, seed in 0u64..1000) {
        let opt = if adam { Optimizer::Adam } else { Optimizer::Sgd };
        let role = LayerRole::ALL[frozen];
        let mut lr = LayerMap::splat(1.0);
        lr.set(role, 0.0);
        let rules = rules_for(Regime::I, Parameterization::Mup, opt, &s, 0.05, 1e-6)
            .unwrap()
            .with_multipliers(moe_scaling::params::Multipliers::from_knobs(1.0, 1.0, lr))
            .unwrap();
        let mut w = random_weights(&s, seed);
        let start = w.clone();
        let mut state = AdamState::new(&w);
        for t in 0..3 {
            let x = gaussian_matrix::<f64>(s.d, 2, 1.0, seed + t).unwrap();
            let cache = forward(&w, &x, &gate).unwrap();
            let g = backward(&w, &cache, &[0.3, -0.8], &gate).unwrap();
            if adam { adam_step(&mut w, &g, &rules, &mut state).unwrap() } else { sgd_step(&mut w, &g, &rules).unwrap() }
        }
        for ((r, a), (_, b)) in w.tensors().into_iter().zip(start.tensors()) {
            prop_assert_eq!(a.base(), b.base());
            if r == role {
                prop_assert_eq!(a.delta(), b.delta());
            }
        }
    }

    #[test]
    fn sgd_update_is_exactly_minus_lr_grad(s in small_scale(), gate in any_gate(), seed in 0u64..1000) {
        let rules = rules_for(Regime::II, Parameterization::Mssp, Optimizer::Sgd, &s, 0.07, 1e-8).unwrap();
        let mut w = random_weights(&s, seed);
        let before = w.clone();
        let x = gaussian_matrix::<f64>(s.d, 2, 1.0, seed + 3).unwrap();
        let cache = forward(&w, &x, &gate).unwrap();
        let g = backward(&w, &cache, &[1.1, 0.4], &gate).unwrap();
        sgd_step(&mut w, &g, &rules).unwrap();
        for (((role, a), (_, b)), gr) in w.tensors().into_iter().zip(before.tensors()).zip(g.weight_grads()) {
            let mut want: Matrix<f64> = b.delta().clone();
            want.axpy(-rules.lr(role), gr);
            prop_assert_eq!(a.delta(), &want);
        }
    }
}

fn tiny(param: Parameterization) -> RunConfig {
    let mut cfg = RunConfig::coord_check(Regime::II, param);
    cfg.base_scale = Some(ScaleVector::new(8, 4, 4, 4, 4).unwrap());
    cfg.task = TaskSpec { dataset_size: 32, ..TaskSpec::gaussian_teacher(4) };
    cfg.width_multipliers = vec![1.0, 2.0, 4.0];
    cfg.seeds = vec![0, 1];
    cfg.steps = 6;
    cfg.batch = 4;
    cfg.probe_steps = vec![0, 1, 2, 4, 6];
    cfg
}

fn tiny_runs() -> &'static Vec<RunRecord> {
    static RUNS: OnceLock<Vec<RunRecord>> = OnceLock::new();
    RUNS.get_or_init(|| run_cells(&tiny(Parameterization::Mup), 1).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn verdicts_are_monotone_in_tolerance(t1 in 0.0f64..2.0, extra in 0.0f64..2.0) {
        let catalog = PredictionCatalog::standard();
        let mut cfg = tiny(Parameterization::Mup);
        cfg.tolerance = t1;
        let tight = analyze(&cfg, &catalog, tiny_runs()).unwrap();
        cfg.tolerance = t1 + extra;
        let loose = analyze(&cfg, &catalog, tiny_runs()).unwrap();
        for (a, b) in tight.verdicts.iter().zip(&loose.verdicts) {
            prop_assert_eq!((a.term, a.class), (b.term, b.class));
            prop_assert!(!a.pass || b.pass, "{} {} flipped", a.term, a.class);
        }
    }

    #[test]
    fn training_is_bit_deterministic(seed in 0u64..50, mssp: bool) {
        let cfg = tiny(if mssp { Parameterization::Mssp } else { Parameterization::Mup });
        let a = run_training(&cfg, 2.0, seed).unwrap();
        let b = run_training(&cfg, 2.0, seed).unwrap();
        let bits = |r: &RunRecord| r.series().iter().flat_map(|s| s.values.iter().map(|v| v.to_bits())).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
        prop_assert_eq!(a.losses, b.losses);
    }
}

#[test]
fn divergence_halts_and_keeps_earlier_probes() {
    let mut cfg = tiny(Parameterization::Mup);
    cfg.lr = 1e7;
    cfg.steps = 20;
    cfg.probe_steps = (0..=20).collect();
    let r = run_training(&cfg, 1.0, 0).unwrap();
    let at = r.diverged_at.expect("huge lr diverges");
    assert!(r.final_loss.is_infinite());
    assert!(!r.probes.is_empty());
    for p in &r.probes {
        assert!(p.step < at || (p.step == at && p.terms.values().all(|v| v.is_finite())));
        assert!(p.terms.values().all(|v| v.is_finite()));
    }
}
