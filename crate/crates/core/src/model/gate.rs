use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    Sigmoid,
    Softmax,
}

/// Router gating: `phi = sigma(beta * psi)` over the active set, aggregated
/// with multiplier `K^-agg_exponent` where `K` is the top-k size (or `M` for
/// soft routing).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateSpec {
    pub kind: GateKind,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub topk: Option<usize>,
    /// Defaults to 1 for sigmoid (the explicit `1/M` average) and 0 for softmax.
    #[serde(default)]
    pub agg_exponent: Option<f64>,
}

fn default_beta() -> f64 {
    1.0
}

impl GateSpec {
    pub fn sigmoid() -> Self {
        Self { kind: GateKind::Sigmoid, beta: 1.0, topk: None, agg_exponent: None }
    }

    pub fn softmax() -> Self {
        Self { kind: GateKind::Softmax, beta: 1.0, topk: None, agg_exponent: None }
    }

    pub fn with_topk(mut self, k: usize) -> Self {
        self.topk = Some(k);
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn agg_exponent(&self) -> f64 {
        self.agg_exponent.unwrap_or(match self.kind {
            GateKind::Sigmoid => 1.0,
            GateKind::Softmax => 0.0,
        })
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("gate beta must be positive, got {}", self.beta)));
        }
        let a = self.agg_exponent();
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::Config(format!("aggregation exponent {a} outside [0,1]")));
        }
        if let Some(k) = self.topk {
            if k == 0 || k > m {
                return Err(Error::Config(format!("top-k {k} must lie in 1..={m}")));
            }
        }
        Ok(())
    }

    /// Number of experts that participate per token.
    pub fn active_count(&self, m: usize) -> usize {
        self.topk.unwrap_or(m)
    }

    /// Aggregation multiplier `K^-alpha`.
    pub fn agg_scale(&self, m: usize) -> f64 {
        (self.active_count(m) as f64).powf(-self.agg_exponent())
    }

    /// Indices of the active experts for one logit column, ascending.
    ///
    /// Top-k keeps the `k` largest logits; ties go to the lower expert index.
    pub fn select<T: Scalar>(&self, logits: &[T]) -> Vec<usize> {
        match self.topk {
            None => (0..logits.len()).collect(),
            Some(k) => {
                let mut idx: Vec<usize> = (0..logits.len()).collect();
                idx.sort_by(|&a, &b| {
                    logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
                });
                idx.truncate(k);
                idx.sort_unstable();
                idx
            }
        }
    }

    /// Gate values for one column; inactive experts get zero.
    pub fn gates<T: Scalar>(&self, logits: &[T], active: &[usize]) -> Vec<T> {
        let beta = T::of(self.beta);
        let mut phi = vec![T::zero(); logits.len()];
        match self.kind {
            GateKind::Sigmoid => {
                for &i in active {
                    phi[i] = sigmoid(beta * logits[i]);
                }
            }
            GateKind::Softmax => {
                let mx = active.iter().fold(T::neg_infinity(), |m, &i| m.max(beta * logits[i]));
                let mut z = T::zero();
                for &i in active {
                    let e = (beta * logits[i] - mx).exp();
                    phi[i] = e;
                    z = z + e;
                }
                for &i in active {
                    phi[i] = phi[i] / z;
                }
            }
        }
        phi
    }

    /// Pulls a gradient with respect to the gates back to the logits
    /// (`J^T v`). Non-selected logits receive zero.
    pub fn vjp<T: Scalar>(&self, phi: &[T], active: &[usize], dphi: &[T]) -> Vec<T> {
        let beta = T::of(self.beta);
        let mut out = vec![T::zero(); phi.len()];
        match self.kind {
            GateKind::Sigmoid => {
                for &i in active {
                    out[i] = beta * phi[i] * (T::one() - phi[i]) * dphi[i];
                }
            }
            GateKind::Softmax => {
                let s: T = active.iter().map(|&i| phi[i] * dphi[i]).sum();
                for &i in active {
                    out[i] = beta * phi[i] * (dphi[i] - s);
                }
            }
        }
        out
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
