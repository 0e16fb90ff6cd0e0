use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, Matrix};
use crate::model::scale::{LayerMap, LayerRole, ScaleVector};
use crate::rng::{derive_seed, tag};
use crate::scalar::Scalar;

/// A trainable tensor stored as frozen initialization plus cumulative update.
///
/// The base is only reachable by shared reference, so optimizers can move the
/// delta alone and the effective weight is always `base + delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitWeight<T> {
    base: Matrix<T>,
    delta: Matrix<T>,
}

impl<T: Scalar> SplitWeight<T> {
    pub fn new(base: Matrix<T>) -> Self {
        let delta = Matrix::zeros(base.rows(), base.cols());
        Self { base, delta }
    }

    pub fn base(&self) -> &Matrix<T> {
        &self.base
    }

    pub fn delta(&self) -> &Matrix<T> {
        &self.delta
    }

    pub fn delta_mut(&mut self) -> &mut Matrix<T> {
        &mut self.delta
    }

    pub fn effective(&self) -> Matrix<T> {
        self.base.add(&self.delta)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.base.shape()
    }
}

/// Elementwise nonlinearity applied to the expert hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// The linear block analysed by the exponent catalog.
    #[default]
    Identity,
    /// tanh-approximated GeLU.
    Gelu,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Gelu => {
                let (c, a) = gelu_consts::<T>();
                let half = T::of(0.5);
                half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
            }
        }
    }

    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Gelu => {
                let (c, a) = gelu_consts::<T>();
                let half = T::of(0.5);
                let u = c * (x + a * x * x * x);
                let t = u.tanh();
                let du = c * (T::one() + T::of(3.0) * a * x * x);
                half * (T::one() + t) + half * x * (T::one() - t * t) * du
            }
        }
    }
}

fn gelu_consts<T: Scalar>() -> (T, T) {
    (T::of((2.0 / std::f64::consts::PI).sqrt()), T::of(0.044_715))
}

/// All trainable tensors of the block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoEWeights<T> {
    /// Embedding, `N x D`.
    pub w1: SplitWeight<T>,
    /// Router, `M x N`.
    pub q: SplitWeight<T>,
    /// Expert input layers, `N_e x N` each.
    pub w2: Vec<SplitWeight<T>>,
    /// Expert output layers, `N x N_e` each.
    pub w3: Vec<SplitWeight<T>>,
    /// Readout, `1 x N`.
    pub w4: SplitWeight<T>,
    pub shared_experts: bool,
    #[serde(default)]
    pub activation: Activation,
}

impl<T: Scalar> MoEWeights<T> {
    pub fn scale(&self) -> ScaleVector {
        let (n, d) = self.w1.shape();
        let (m, _) = self.q.shape();
        let n_e = self.w2.first().map(|w| w.shape().0).unwrap_or(0);
        ScaleVector { n, n_e, m, k: m, d }
    }

    pub fn num_experts(&self) -> usize {
        self.w2.len()
    }

    /// Every split weight with its role, experts in index order.
    pub fn tensors(&self) -> Vec<(LayerRole, &SplitWeight<T>)> {
        let mut out = vec![(LayerRole::Embed, &self.w1), (LayerRole::Router, &self.q)];
        out.extend(self.w2.iter().map(|w| (LayerRole::ExpertIn, w)));
        out.extend(self.w3.iter().map(|w| (LayerRole::ExpertOut, w)));
        out.push((LayerRole::Readout, &self.w4));
        out
    }

    /// Copy whose deltas are all zero, so the effective weights are the initialization.
    pub fn base_only(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.tensors_mut() {
            t.delta_mut().scale_in_place(T::zero());
        }
        out
    }

    /// Short names matching the order of [`tensors`](Self::tensors).
    pub fn tensor_names(&self) -> Vec<String> {
        let m = self.num_experts();
        let mut out = vec!["w1".to_string(), "q".to_string()];
        out.extend((0..m).map(|i| format!("w2[{i}]")));
        out.extend((0..m).map(|i| format!("w3[{i}]")));
        out.push("w4".to_string());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(LayerRole, &mut SplitWeight<T>)> {
        let mut out = vec![(LayerRole::Embed, &mut self.w1), (LayerRole::Router, &mut self.q)];
        out.extend(self.w2.iter_mut().map(|w| (LayerRole::ExpertIn, w)));
        out.extend(self.w3.iter_mut().map(|w| (LayerRole::ExpertOut, w)));
        out.push((LayerRole::Readout, &mut self.w4));
        out
    }

    /// Checks internal shape consistency.
    pub fn validate(&self) -> Result<()> {
        let (n, d) = self.w1.shape();
        let m = self.q.shape().0;
        let bad = |what: String| Err(Error::ShapeMismatch { op: "MoEWeights", detail: what });
        if self.q.shape().1 != n {
            return bad(format!("router {:?} vs N={n}", self.q.shape()));
        }
        if self.w2.len() != m || self.w3.len() != m || m == 0 {
            return bad(format!("{} / {} expert layers for M={m}", self.w2.len(), self.w3.len()));
        }
        let n_e = self.w2[0].shape().0;
        for (a, b) in self.w2.iter().zip(&self.w3) {
            if a.shape() != (n_e, n) || b.shape() != (n, n_e) {
                return bad(format!("expert shapes {:?} / {:?}", a.shape(), b.shape()));
            }
        }
        if self.w4.shape() != (1, n) || d == 0 {
            return bad(format!("readout {:?}", self.w4.shape()));
        }
        Ok(())
    }
}

/// Samples the base weights; every delta starts at zero.
///
/// With `shared_experts` a single expert pair is drawn and copied to all
/// experts. With `readout_zero` the readout base is the zero matrix regardless
/// of its std.
pub fn build_weights<T: Scalar>(
    scale: &ScaleVector,
    init_stds: &LayerMap<f64>,
    shared_experts: bool,
    readout_zero: bool,
    seed: u64,
) -> Result<MoEWeights<T>> {
    scale.validate()?;
    for role in LayerRole::ALL {
        let s = init_stds.get(role);
        if !(s >= 0.0 && s.is_finite()) {
            return Err(Error::Config(format!("init std for {role} must be finite and nonnegative, got {s}")));
        }
    }
    let ScaleVector { n, n_e, m, d, .. } = *scale;
    let draw = |rows, cols, role: LayerRole, idx: u64| {
        gaussian_matrix::<T>(rows, cols, init_stds.get(role), derive_seed(seed, &[tag(role.name()), idx]))
    };
    let w1 = SplitWeight::new(draw(n, d, LayerRole::Embed, 0)?);
    let q = SplitWeight::new(draw(m, n, LayerRole::Router, 0)?);
    let mut w2 = Vec::with_capacity(m);
    let mut w3 = Vec::with_capacity(m);
    for i in 0..m {
        let idx = if shared_experts { 0 } else { i as u64 };
        w2.push(SplitWeight::new(draw(n_e, n, LayerRole::ExpertIn, idx)?));
        w3.push(SplitWeight::new(draw(n, n_e, LayerRole::ExpertOut, idx)?));
    }
    let w4 = if readout_zero {
        SplitWeight::new(Matrix::zeros(1, n))
    } else {
        SplitWeight::new(draw(1, n, LayerRole::Readout, 0)?)
    };
    Ok(MoEWeights { w1, q, w2, w3, w4, shared_experts, activation: Activation::Identity })
}
