//! Layerwise SGD and Adam acting on the update half of every split weight.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{GradientCache, MoEWeights};
use crate::params::RuleSet;
use crate::scalar::Scalar;

fn paired<'a, T: Scalar>(w: &MoEWeights<T>, g: &'a GradientCache<T>) -> Result<Vec<&'a Matrix<T>>> {
    let grads = g.weight_grads();
    let names = w.tensor_names();
    if grads.len() != names.len() {
        return Err(Error::ShapeMismatch { op: "optimizer", detail: format!("{} gradients for {} tensors", grads.len(), names.len()) });
    }
    for ((name, (_, t)), gr) in names.iter().zip(w.tensors()).zip(&grads) {
        if t.shape() != gr.shape() {
            return Err(Error::ShapeMismatch { op: "optimizer", detail: format!("{name}: weight {:?} vs gradient {:?}", t.shape(), gr.shape()) });
        }
        if !gr.all_finite() {
            return Err(Error::Diverged { tensor: format!("grad {name}") });
        }
    }
    Ok(grads)
}

/// `delta -= lr_layer * grad` for every tensor.
pub fn sgd_step<T: Scalar>(w: &mut MoEWeights<T>, g: &GradientCache<T>, rules: &RuleSet) -> Result<()> {
    let grads = paired(w, g)?;
    for ((role, t), gr) in w.tensors_mut().into_iter().zip(grads) {
        let lr = rules.lr(role);
        if lr != 0.0 {
            t.delta_mut().axpy(T::of(-lr), gr);
        }
    }
    Ok(())
}

/// Adam moments for every tensor, in [`MoEWeights::tensors`] order.
///
/// Moments are kept for the gradient divided by the layer's epsilon, so the
/// internal epsilon is one.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(w: &MoEWeights<T>) -> Self {
        Self::with_betas(w, 0.9, 0.95)
    }

    pub fn with_betas(w: &MoEWeights<T>, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Matrix<T>> = w.tensors().iter().map(|(_, t)| Matrix::zeros(t.shape().0, t.shape().1)).collect();
        Self { m: zeros.clone(), v: zeros, t: 0, beta1, beta2 }
    }
}

/// One bias-corrected Adam step with per-layer learning rate and epsilon.
///
/// The layer epsilon `e` is realized by feeding `g / e` to an Adam with unit
/// epsilon, which equals `m_hat / (sqrt(v_hat) + e)` in exact arithmetic.
pub fn adam_step<T: Scalar>(w: &mut MoEWeights<T>, g: &GradientCache<T>, rules: &RuleSet, state: &mut AdamState<T>) -> Result<()> {
    let grads = paired(w, g)?;
    if state.m.len() != grads.len() || state.m.iter().zip(&grads).any(|(m, g)| m.shape() != g.shape()) {
        return Err(Error::ShapeMismatch { op: "adam_step", detail: "state does not match weights".into() });
    }
    if !((0.0..1.0).contains(&state.beta1) && (0.0..1.0).contains(&state.beta2)) {
        return Err(Error::Config(format!("Adam betas ({}, {}) must lie in [0,1)", state.beta1, state.beta2)));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let c1 = T::one() / (T::one() - T::of(state.beta1.powi(t)));
    let c2 = T::one() / (T::one() - T::of(state.beta2.powi(t)));
    for (k, ((role, tensor), gr)) in w.tensors_mut().into_iter().zip(grads).enumerate() {
        let eps = rules.eps(role);
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Config(format!("Adam epsilon for {role} must be positive, got {eps}")));
        }
        let inv_eps = T::one() / T::of(eps);
        let lr = T::of(rules.lr(role));
        let m = state.m[k].as_mut_slice();
        let v = state.v[k].as_mut_slice();
        let delta = tensor.delta_mut().as_mut_slice();
        for (((d, mi), vi), &gi) in delta.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(gr.as_slice()) {
            let gs = gi * inv_eps;
            *mi = b1 * *mi + (T::one() - b1) * gs;
            *vi = b2 * *vi + (T::one() - b2) * gs * gs;
            let upd = (*mi * c1) / ((*vi * c2).sqrt() + T::one());
            *d = *d - lr * upd;
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint Frobenius norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(g: &mut GradientCache<T>, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::Config(format!("clip norm must be positive, got {max_norm}")));
    }
    let norm = g.weight_grads().iter().map(|m| m.sum_sq().as_f64()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for m in g.weight_grads_mut() {
            m.scale_in_place(s);
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gaussian_matrix;
    use crate::model::{backward, forward, GateSpec, ScaleVector};
    use crate::params::{rules_for, Optimizer, Parameterization, Regime};

    fn setup(opt: Optimizer) -> (MoEWeights<f64>, GradientCache<f64>, RuleSet) {
        let s = ScaleVector::new(6, 3, 3, 3, 4).unwrap();
        let rules = rules_for(Regime::II, Parameterization::Mup, opt, &s, 0.05, 1e-3).unwrap();
        let w: MoEWeights<f64> = rules.build_weights(9).unwrap();
        let x = gaussian_matrix(4, 5, 1.0, 1).unwrap();
        let gate = GateSpec::sigmoid();
        let c = forward(&w, &x, &gate).unwrap();
        let g = backward(&w, &c, &[0.3, -0.2, 0.1, 0.5, -0.7], &gate).unwrap();
        (w, g, rules)
    }

    fn zero_grads(g: &GradientCache<f64>) -> GradientCache<f64> {
        let mut z = g.clone();
        for m in z.weight_grads_mut() {
            m.scale_in_place(0.0);
        }
        z
    }

    #[test]
    fn sgd_matches_naive_per_tensor_update() {
        let (mut w, g, rules) = setup(Optimizer::Sgd);
        let before = w.clone();
        sgd_step(&mut w, &g, &rules).unwrap();
        for (((role, a), (_, b)), gr) in before.tensors().into_iter().zip(w.tensors()).zip(g.weight_grads()) {
            assert_eq!(a.base(), b.base());
            let lr = rules.lr(role);
            for (i, (&d, &gv)) in b.delta().as_slice().iter().zip(gr.as_slice()).enumerate() {
                let want = a.delta().as_slice()[i] - lr * gv;
                assert!((d - want).abs() <= 1e-12 * want.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        for opt in [Optimizer::Sgd, Optimizer::Adam] {
            let (mut w, g, rules) = setup(opt);
            let z = zero_grads(&g);
            let before = w.clone();
            let mut st = AdamState::new(&w);
            match opt {
                Optimizer::Sgd => sgd_step(&mut w, &z, &rules).unwrap(),
                Optimizer::Adam => adam_step(&mut w, &z, &rules, &mut st).unwrap(),
            }
            assert_eq!(w, before);
            assert!(st.m.iter().chain(&st.v).all(|m| m.is_zero()));
        }
    }

    #[test]
    fn zero_layer_lr_freezes_layer() {
        let (mut w, g, rules) = setup(Optimizer::Sgd);
        let mut mult = rules.multipliers;
        mult.lr.router = 0.0;
        let rules = rules.with_multipliers(mult).unwrap();
        sgd_step(&mut w, &g, &rules).unwrap();
        assert!(w.q.delta().is_zero());
        assert!(!w.w1.delta().is_zero());
    }

    #[test]
    fn non_finite_gradient_names_layer() {
        let (mut w, mut g, rules) = setup(Optimizer::Sgd);
        g.g_w3[1][(0, 0)] = f64::INFINITY;
        match sgd_step(&mut w, &g, &rules) {
            Err(Error::Diverged { tensor }) => assert_eq!(tensor, "grad w3[1]"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn adam_matches_textbook_reference_over_five_steps() {
        let (mut w, g, rules) = setup(Optimizer::Adam);
        let mut st = AdamState::new(&w);
        let mut ref_delta: Vec<Vec<f64>> = w.tensors().iter().map(|(_, t)| t.delta().as_slice().to_vec()).collect();
        let mut ref_m = ref_delta.iter().map(|v| vec![0.0; v.len()]).collect::<Vec<_>>();
        let mut ref_v = ref_m.clone();
        let roles: Vec<_> = w.tensors().iter().map(|(r, _)| *r).collect();
        for step in 1..=5 {
            // vary the gradient per step
            let mut gs = g.clone();
            for m in gs.weight_grads_mut() {
                m.scale_in_place(1.0 + 0.3 * step as f64);
            }
            adam_step(&mut w, &gs, &rules, &mut st).unwrap();
            for (k, gr) in gs.weight_grads().iter().enumerate() {
                let (lr, eps) = (rules.lr(roles[k]), rules.eps(roles[k]));
                for (i, &gi) in gr.as_slice().iter().enumerate() {
                    ref_m[k][i] = 0.9 * ref_m[k][i] + 0.1 * gi;
                    ref_v[k][i] = 0.95 * ref_v[k][i] + 0.05 * gi * gi;
                    let mh = ref_m[k][i] / (1.0 - 0.9f64.powi(step));
                    let vh = ref_v[k][i] / (1.0 - 0.95f64.powi(step));
                    ref_delta[k][i] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
        for (k, (_, t)) in w.tensors().iter().enumerate() {
            for (a, b) in t.delta().as_slice().iter().zip(&ref_delta[k]) {
                assert!((a - b).abs() <= 1e-10 * b.abs().max(1e-12), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn adam_without_momentum_is_sign_like() {
        let (mut w, g, rules) = setup(Optimizer::Adam);
        let mut st = AdamState::with_betas(&w, 0.0, 0.0);
        adam_step(&mut w, &g, &rules, &mut st).unwrap();
        for (((role, t), gr), _) in w.tensors().into_iter().zip(g.weight_grads()).zip(0..) {
            let (lr, eps) = (rules.lr(role), rules.eps(role));
            for (&d, &gi) in t.delta().as_slice().iter().zip(gr.as_slice()) {
                let want = -lr * gi / (gi.abs() + eps);
                assert!((d - want).abs() <= 1e-12 * lr);
            }
        }
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let (_, mut g, _) = setup(Optimizer::Sgd);
        let before = clip_global_norm(&mut g, 1e-3).unwrap();
        assert!(before > 1e-3);
        let after: f64 = g.weight_grads().iter().map(|m| m.sum_sq().as_f64()).sum::<f64>().sqrt();
        assert!((after - 1e-3).abs() < 1e-12);
        assert!(clip_global_norm(&mut g, 0.0).is_err());
    }
}
