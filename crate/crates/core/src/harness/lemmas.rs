//! Monte-Carlo checks of the random-matrix facts behind the exponent tables:
//! Gram concentration of a single Gaussian matrix and the cross-expert sum of
//! products `G = (1/M) sum_i (W2_i)^T (W3_i)^T`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, ols_loglog_fit, ExponentFit, Matrix};
use crate::model::ScaleVector;
use crate::rng::{derive_seed, tag};

/// Mean diagonal and off-diagonal spread of one Gram form, pooled over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GramStats {
    pub mean_diag: f64,
    pub predicted_diag: f64,
    /// RMS of the off-diagonal entries.
    pub offdiag_std: f64,
    pub predicted_offdiag: f64,
}

impl GramStats {
    /// Observed over predicted; `1` when both vanish.
    pub fn diag_ratio(&self) -> f64 {
        ratio(self.mean_diag, self.predicted_diag)
    }

    pub fn offdiag_ratio(&self) -> f64 {
        ratio(self.offdiag_std, self.predicted_offdiag)
    }
}

fn ratio(obs: f64, pred: f64) -> f64 {
    if pred == 0.0 {
        if obs == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        obs / pred
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramReport {
    pub m: usize,
    pub n: usize,
    pub sigma: f64,
    pub seeds: usize,
    /// `W^T W` (`n x n`): diagonal `m sigma^2`, off-diagonal `sigma^2 sqrt(m)`.
    pub inner: GramStats,
    /// `W W^T` (`m x m`): diagonal `n sigma^2`, off-diagonal `sigma^2 sqrt(n)`.
    pub outer: GramStats,
    pub diag_tolerance: f64,
    pub offdiag_tolerance: f64,
    pub pass: bool,
}

fn accumulate(g: &Matrix<f64>, diag: &mut (f64, usize), off: &mut (f64, usize)) {
    for r in 0..g.rows() {
        for c in 0..g.cols() {
            let v = g[(r, c)];
            if r == c {
                diag.0 += v;
                diag.1 += 1;
            } else {
                off.0 += v * v;
                off.1 += 1;
            }
        }
    }
}

/// Samples `W` (`m x n`, iid `N(0, sigma^2)`) once per seed and compares both
/// Gram forms with their predicted diagonal mean and off-diagonal spread.
/// Passes when the diagonal is within 5% and the off-diagonal within 15%.
pub fn gram_concentration_check(m: usize, n: usize, sigma: f64, seeds: &[u64]) -> Result<GramReport> {
    if m < 2 || n < 2 {
        return Err(Error::Config(format!("gram check needs m, n >= 2, got {m} x {n}")));
    }
    if seeds.is_empty() || !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config("gram check needs seeds and a finite sigma >= 0".into()));
    }
    let mut acc = [((0.0, 0), (0.0, 0)), ((0.0, 0), (0.0, 0))];
    for &seed in seeds {
        let w = gaussian_matrix::<f64>(m, n, sigma, derive_seed(seed, &[tag("gram"), m as u64, n as u64]))?;
        let (d, o) = &mut acc[0];
        accumulate(&w.t_matmul(&w), d, o);
        let (d, o) = &mut acc[1];
        accumulate(&w.matmul_t(&w), d, o);
    }
    let s2 = sigma * sigma;
    let stats = |((ds, dc), (os, oc)): ((f64, usize), (f64, usize)), trace_dim: usize| GramStats {
        mean_diag: ds / dc as f64,
        predicted_diag: trace_dim as f64 * s2,
        offdiag_std: (os / oc as f64).sqrt(),
        predicted_offdiag: s2 * (trace_dim as f64).sqrt(),
    };
    let inner = stats(acc[0], m);
    let outer = stats(acc[1], n);
    let (dt, ot) = (0.05, 0.15);
    let ok = |s: &GramStats| (s.diag_ratio() - 1.0).abs() <= dt && (s.offdiag_ratio() - 1.0).abs() <= ot;
    let pass = ok(&inner) && ok(&outer);
    Ok(GramReport { m, n, sigma, seeds: seeds.len(), inner, outer, diag_tolerance: dt, offdiag_tolerance: ot, pass })
}

/// One rung of the cross-layer ladder, pooled over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossLayerPoint {
    pub n: usize,
    pub n_e: usize,
    pub m: usize,
    pub entry_rms: f64,
    /// `N_e sigma_2^2 sigma_3^2 / M = 1/(N M)`
    pub predicted_entry_var: f64,
    pub gv_rms: f64,
    pub v_rms: f64,
}

impl CrossLayerPoint {
    pub fn var_ratio(&self) -> f64 {
        self.entry_rms * self.entry_rms / self.predicted_entry_var
    }

    /// `RMS(Gv) / RMS(v)`
    pub fn gain(&self) -> f64 {
        self.gv_rms / self.v_rms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossLayerReport {
    pub points: Vec<CrossLayerPoint>,
    /// Exponent of `RMS(Gv)/RMS(v)` against `N`; `None` below three widths.
    pub gain_fit: Option<ExponentFit>,
    /// Exponent of the entry RMS against `N`.
    pub entry_fit: Option<ExponentFit>,
}

impl CrossLayerReport {
    pub fn max_var_error(&self) -> f64 {
        self.points.iter().map(|p| (p.var_ratio() - 1.0).abs()).fold(0.0, f64::max)
    }
}

/// The sum `G` itself, built from `M` independent pairs with `W2 ~ N(0, 1/N)`
/// and `W3 ~ N(0, 1/N_e)`.
pub fn cross_layer_sum(scale: &ScaleVector, seed: u64) -> Result<Matrix<f64>> {
    let (n, ne, m) = (scale.n, scale.n_e, scale.m);
    // stacking turns the sum into one product: [W2_1^T .. W2_M^T] [W3_1^T; ..; W3_M^T]
    let mut left = Matrix::zeros(n, m * ne);
    let mut right = Matrix::zeros(m * ne, n);
    for i in 0..m {
        let w2 = gaussian_matrix::<f64>(ne, n, (n as f64).powf(-0.5), derive_seed(seed, &[tag("w2"), i as u64]))?;
        let w3 = gaussian_matrix::<f64>(n, ne, (ne as f64).powf(-0.5), derive_seed(seed, &[tag("w3"), i as u64]))?;
        for k in 0..ne {
            for a in 0..n {
                left[(a, i * ne + k)] = w2[(k, a)];
                right[(i * ne + k, a)] = w3[(a, k)];
            }
        }
    }
    Ok(left.matmul(&right).scale(1.0 / m as f64))
}

/// Builds `G` at every scale of the ladder and measures its entry variance
/// against `1/(N M)` and the gain `RMS(Gv)/RMS(v)` for `v ~ N(0, I)`.
pub fn cross_layer_sum_check(scales: &[ScaleVector], seeds: &[u64]) -> Result<CrossLayerReport> {
    if scales.is_empty() || seeds.is_empty() {
        return Err(Error::Config("cross-layer check needs scales and seeds".into()));
    }
    let mut points = Vec::with_capacity(scales.len());
    for s in scales {
        s.validate()?;
        let (mut gg, mut gv, mut vv) = (0.0, 0.0, 0.0);
        for &seed in seeds {
            let cell = derive_seed(seed, &[tag("cross-layer"), s.n as u64, s.n_e as u64, s.m as u64]);
            let g = cross_layer_sum(s, cell)?;
            let v = gaussian_matrix::<f64>(s.n, 1, 1.0, derive_seed(cell, &[tag("v")]))?;
            gg += g.sum_sq();
            gv += g.matmul(&v).sum_sq();
            vv += v.sum_sq();
        }
        let k = seeds.len() as f64;
        let n = s.n as f64;
        points.push(CrossLayerPoint {
            n: s.n,
            n_e: s.n_e,
            m: s.m,
            entry_rms: (gg / (k * n * n)).sqrt(),
            predicted_entry_var: 1.0 / (n * s.m as f64),
            gv_rms: (gv / (k * n)).sqrt(),
            v_rms: (vv / (k * n)).sqrt(),
        });
    }
    let mut widths: Vec<usize> = points.iter().map(|p| p.n).collect();
    widths.sort_unstable();
    widths.dedup();
    let fit = |f: fn(&CrossLayerPoint) -> f64| {
        (widths.len() >= 3).then(|| ols_loglog_fit(&points.iter().map(|p| (p.n as f64, f(p))).collect::<Vec<_>>())).transpose()
    };
    Ok(CrossLayerReport { gain_fit: fit(CrossLayerPoint::gain)?, entry_fit: fit(|p| p.entry_rms)?, points })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_gives_an_all_zero_gram() {
        let r = gram_concentration_check(8, 5, 0.0, &[0, 1]).unwrap();
        assert_eq!(r.inner.mean_diag, 0.0);
        assert_eq!(r.outer.offdiag_std, 0.0);
        assert!(r.pass);
    }

    #[test]
    fn gram_matches_lemma_at_256() {
        let seeds: Vec<u64> = (0..16).collect();
        let r = gram_concentration_check(256, 256, 1.0 / 16.0, &seeds).unwrap();
        assert!((r.inner.diag_ratio() - 1.0).abs() < 0.05, "{r:?}");
        assert!((r.inner.offdiag_ratio() - 1.0).abs() < 0.15, "{r:?}");
        assert!(r.pass);
    }

    #[test]
    fn rectangular_gram_uses_the_trace_dimension() {
        let r = gram_concentration_check(64, 16, 0.5, &[3, 4, 5, 6]).unwrap();
        assert_eq!(r.inner.predicted_diag, 16.0);
        assert_eq!(r.outer.predicted_diag, 4.0);
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn tiny_shapes_are_rejected() {
        assert!(gram_concentration_check(1, 4, 1.0, &[0]).is_err());
    }

    #[test]
    fn single_expert_sum_is_the_plain_product() {
        let s = ScaleVector::new(6, 3, 1, 1, 2).unwrap();
        let g = cross_layer_sum(&s, 9).unwrap();
        let w2 = gaussian_matrix::<f64>(3, 6, 6f64.powf(-0.5), derive_seed(9, &[tag("w2"), 0])).unwrap();
        let w3 = gaussian_matrix::<f64>(6, 3, 3f64.powf(-0.5), derive_seed(9, &[tag("w3"), 0])).unwrap();
        let direct = w2.t_matmul(&w3.transpose());
        assert!(g.sub(&direct).max_abs() < 1e-14);
    }

    #[test]
    fn entry_variance_matches_closed_form() {
        let scales: Vec<_> = [32usize, 64, 128].iter().map(|&n| ScaleVector::new(n, n, n / 8, n / 8, 4).unwrap()).collect();
        let r = cross_layer_sum_check(&scales, &[0, 1, 2, 3]).unwrap();
        assert!(r.max_var_error() < 0.1, "{:?}", r.points);
        let fit = r.gain_fit.unwrap();
        assert!((fit.slope + 0.5).abs() < 0.1, "{fit:?}");
    }
}
