use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::{ols_loglog_fit, ExponentFit, Matrix};
use crate::model::{ActivationCache, LayerRole, MoEWeights};
use crate::scalar::Scalar;

/// The six norms entering the alignment ratios of one layer at one width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentObservation {
    pub fan_in: usize,
    /// `RMS(dW x)`
    pub eff: f64,
    pub delta_w: f64,
    pub x: f64,
    /// `RMS(W0 dx)`
    pub prop: f64,
    pub base_w: f64,
    pub delta_x: f64,
}

impl AlignmentObservation {
    /// `RMS(dW x) / (RMS(dW) RMS(x))`; `None` when a denominator vanishes.
    pub fn p_ratio(&self) -> Option<f64> {
        ratio(self.eff, self.delta_w * self.x)
    }

    /// `RMS(W0 dx) / (RMS(W0) RMS(dx))`; `None` when a denominator vanishes.
    pub fn q_ratio(&self) -> Option<f64> {
        ratio(self.prop, self.base_w * self.delta_x)
    }
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0 && num > 0.0 && num.is_finite() && den.is_finite()).then(|| num / den)
}

fn stack_rms<T: Scalar>(ms: &[&Matrix<T>]) -> f64 {
    let total: usize = ms.iter().map(|m| m.len()).sum();
    let ss: f64 = ms.iter().map(|m| m.sum_sq().as_f64()).sum();
    if total == 0 {
        0.0
    } else {
        (ss / total as f64).sqrt()
    }
}

/// Observation for a single map with input `x` now and `x0` at the base weights.
pub fn observe<T: Scalar>(base: &Matrix<T>, delta: &Matrix<T>, x: &Matrix<T>, x0: &Matrix<T>) -> Result<AlignmentObservation> {
    observe_stacked(&[base], &[delta], &[x], &[x0])
}

/// Observation for a family of maps `W_i x_i` whose outputs are pooled.
pub fn observe_stacked<T: Scalar>(
    base: &[&Matrix<T>],
    delta: &[&Matrix<T>],
    x: &[&Matrix<T>],
    x0: &[&Matrix<T>],
) -> Result<AlignmentObservation> {
    let k = base.len();
    if k == 0 || delta.len() != k || x.len() != k || x0.len() != k {
        return Err(Error::EmptyInput("observe_stacked"));
    }
    let fan_in = base[0].cols();
    let mut eff = Vec::with_capacity(k);
    let mut prop = Vec::with_capacity(k);
    let mut dx = Vec::with_capacity(k);
    for i in 0..k {
        if base[i].cols() != fan_in || x[i].shape() != x0[i].shape() {
            return Err(Error::ShapeMismatch { op: "observe_stacked", detail: format!("member {i}") });
        }
        let d = x[i].sub(x0[i]);
        eff.push(delta[i].matmul(x[i]));
        prop.push(base[i].matmul(&d));
        dx.push(d);
    }
    Ok(AlignmentObservation {
        fan_in,
        eff: stack_rms(&eff.iter().collect::<Vec<_>>()),
        delta_w: stack_rms(delta),
        x: stack_rms(x),
        prop: stack_rms(&prop.iter().collect::<Vec<_>>()),
        base_w: stack_rms(base),
        delta_x: stack_rms(&dx.iter().collect::<Vec<_>>()),
    })
}

/// Observation for one layer of the block from the current pass and the
/// base-weight pass on the same input. Expert layers pool over experts.
pub fn observe_layer<T: Scalar>(
    role: LayerRole,
    w: &MoEWeights<T>,
    cache: &ActivationCache<T>,
    cache0: &ActivationCache<T>,
) -> Result<AlignmentObservation> {
    let m = w.num_experts();
    match role {
        LayerRole::Embed => observe(w.w1.base(), w.w1.delta(), &cache.x, &cache0.x),
        LayerRole::Router => observe(w.q.base(), w.q.delta(), &cache.h1, &cache0.h1),
        LayerRole::ExpertIn => observe_stacked(
            &w.w2.iter().map(|s| s.base()).collect::<Vec<_>>(),
            &w.w2.iter().map(|s| s.delta()).collect::<Vec<_>>(),
            &vec![&cache.h1; m],
            &vec![&cache0.h1; m],
        ),
        LayerRole::ExpertOut => observe_stacked(
            &w.w3.iter().map(|s| s.base()).collect::<Vec<_>>(),
            &w.w3.iter().map(|s| s.delta()).collect::<Vec<_>>(),
            &cache.h2.iter().collect::<Vec<_>>(),
            &cache0.h2.iter().collect::<Vec<_>>(),
        ),
        LayerRole::Readout => observe(w.w4.base(), w.w4.delta(), &cache.h3, &cache0.h3),
    }
}

/// Fits `p` and `q` as log-log slopes of the alignment ratios against fan-in.
/// Several observations at one fan-in (seeds) are pooled by geometric mean.
pub fn measure_alignment_exponent(obs: &[AlignmentObservation]) -> Result<(ExponentFit, ExponentFit)> {
    let fit = |pick: fn(&AlignmentObservation) -> Option<f64>, what: &str| -> Result<ExponentFit> {
        let mut by_width: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for o in obs {
            let r = pick(o).ok_or_else(|| Error::FitUndefined(format!("{what} ratio undefined at fan-in {}", o.fan_in)))?;
            by_width.entry(o.fan_in).or_default().push(r.ln());
        }
        if by_width.len() < 3 {
            return Err(Error::FitUndefined(format!("{what} needs at least 3 widths, got {}", by_width.len())));
        }
        let pts: Vec<(f64, f64)> =
            by_width.iter().map(|(&n, logs)| (n as f64, (logs.iter().sum::<f64>() / logs.len() as f64).exp())).collect();
        ols_loglog_fit(&pts)
    };
    Ok((fit(AlignmentObservation::p_ratio, "p")?, fit(AlignmentObservation::q_ratio, "q")?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gaussian_matrix;

    const WIDTHS: [usize; 4] = [128, 256, 512, 1024];

    #[test]
    fn rank_one_update_aligned_with_input_gives_p_one() {
        let mut obs = Vec::new();
        for &n in &WIDTHS {
            let x = gaussian_matrix::<f64>(n, 1, 1.0, n as u64).unwrap();
            let u = gaussian_matrix::<f64>(n, 1, 1.0, 7 + n as u64).unwrap();
            let dw = Matrix::outer(u.as_slice(), x.as_slice());
            let w0 = gaussian_matrix::<f64>(n, n, 1.0, 3 + n as u64).unwrap();
            let x0 = gaussian_matrix::<f64>(n, 1, 1.0, 11 + n as u64).unwrap().add(&x);
            obs.push(observe(&w0, &dw, &x, &x0).unwrap());
        }
        let (p, _) = measure_alignment_exponent(&obs).unwrap();
        assert!((p.slope - 1.0).abs() < 0.1, "p = {}", p.slope);
    }

    #[test]
    fn iid_base_against_independent_shift_gives_q_half() {
        let mut obs = Vec::new();
        for &n in &WIDTHS {
            for seed in 0..8u64 {
                let s = seed * 1000 + n as u64;
                let w0 = gaussian_matrix::<f64>(n, n, 1.0, s).unwrap();
                let dw = gaussian_matrix::<f64>(n, n, 1.0, s + 1).unwrap();
                let x = gaussian_matrix::<f64>(n, 1, 1.0, s + 2).unwrap();
                let dx = gaussian_matrix::<f64>(n, 1, 1.0, s + 3).unwrap();
                obs.push(observe(&w0, &dw, &x, &x.sub(&dx)).unwrap());
            }
        }
        let (p, q) = measure_alignment_exponent(&obs).unwrap();
        assert!((q.slope - 0.5).abs() < 0.1, "q = {}", q.slope);
        assert!((p.slope - 0.5).abs() < 0.1, "p = {}", p.slope);
    }

    #[test]
    fn constant_ratios_give_zero_exponent() {
        let obs: Vec<_> = WIDTHS
            .iter()
            .map(|&n| AlignmentObservation { fan_in: n, eff: 2.0, delta_w: 1.0, x: 1.0, prop: 3.0, base_w: 1.5, delta_x: 2.0 })
            .collect();
        let (p, q) = measure_alignment_exponent(&obs).unwrap();
        assert!(p.slope.abs() < 1e-12 && q.slope.abs() < 1e-12);
    }

    #[test]
    fn too_few_widths_or_zero_shift_is_an_error() {
        let o = AlignmentObservation { fan_in: 8, eff: 1.0, delta_w: 1.0, x: 1.0, prop: 1.0, base_w: 1.0, delta_x: 1.0 };
        let two = [o, AlignmentObservation { fan_in: 16, ..o }];
        assert!(matches!(measure_alignment_exponent(&two), Err(Error::FitUndefined(_))));
        let mut three = vec![o, AlignmentObservation { fan_in: 16, ..o }, AlignmentObservation { fan_in: 32, ..o }];
        three[1].delta_x = 0.0;
        assert!(matches!(measure_alignment_exponent(&three), Err(Error::FitUndefined(_))));
    }
}
