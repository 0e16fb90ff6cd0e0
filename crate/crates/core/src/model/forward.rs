use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::gate::GateSpec;
use crate::model::weights::{Activation, MoEWeights};
use crate::scalar::Scalar;

/// Entries beyond this magnitude count as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Every intermediate of one forward pass over a batch (one sample per column).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache<T> {
    /// `D x B`
    pub x: Matrix<T>,
    /// `N x B`
    pub h1: Matrix<T>,
    /// Router logits, `M x B`.
    pub psi: Matrix<T>,
    /// Gates, `M x B`; zero outside the active set.
    pub phi: Matrix<T>,
    /// Aggregation weights `agg_scale * phi`, `M x B`.
    pub omega: Matrix<T>,
    /// Active experts per column, ascending.
    pub active: Vec<Vec<usize>>,
    /// Expert pre-activations `W2_i h1`; only kept when the activation is not the identity.
    pub z2: Option<Vec<Matrix<T>>>,
    /// Expert hidden states, `N_e x B` each.
    pub h2: Vec<Matrix<T>>,
    /// Per-expert outputs `W3_i h2_i`, `N x B` each.
    pub h3i: Vec<Matrix<T>>,
    /// Aggregated output, `N x B`.
    pub h3: Matrix<T>,
    /// Scalar outputs, `1 x B`.
    pub f: Matrix<T>,
    pub agg_scale: T,
}

impl<T: Scalar> ActivationCache<T> {
    pub fn batch(&self) -> usize {
        self.x.cols()
    }

    pub fn outputs(&self) -> &[T] {
        self.f.as_slice()
    }
}

fn check<T: Scalar>(name: &str, m: &Matrix<T>) -> Result<()> {
    if !m.all_finite() || m.max_abs().as_f64() > DIVERGENCE_LIMIT {
        return Err(Error::Diverged { tensor: name.to_string() });
    }
    Ok(())
}

/// Evaluates the block on a batch of inputs `x` (`D x B`).
///
/// `h1 = W1 x`, `psi = Q h1`, `phi = gate(beta psi)`, `h2_i = act(W2_i h1)`,
/// `h3_i = W3_i h2_i`, `h3 = sum_i omega_i h3_i`, `f = W4 h3`. All experts are
/// evaluated; inactive ones carry zero aggregation weight.
pub fn forward<T: Scalar>(w: &MoEWeights<T>, x: &Matrix<T>, gate: &GateSpec) -> Result<ActivationCache<T>> {
    let (n, d) = w.w1.shape();
    let m = w.num_experts();
    if x.rows() != d || x.cols() == 0 {
        return Err(Error::ShapeMismatch { op: "forward", detail: format!("input {:?}, expected {d} rows", x.shape()) });
    }
    gate.validate(m)?;
    let b = x.cols();
    check("x", x)?;

    let h1 = w.w1.effective().matmul(x);
    check("h1", &h1)?;
    let psi = w.q.effective().matmul(&h1);
    check("psi", &psi)?;

    let agg = T::of(gate.agg_scale(m));
    let mut phi = Matrix::zeros(m, b);
    let mut active = Vec::with_capacity(b);
    for col in 0..b {
        let logits = psi.col_to_vec(col);
        let act = gate.select(&logits);
        let g = gate.gates(&logits, &act);
        for (i, v) in g.into_iter().enumerate() {
            phi[(i, col)] = v;
        }
        active.push(act);
    }
    check("phi", &phi)?;
    let omega = phi.scale(agg);

    let mut z2s = Vec::with_capacity(m);
    let mut h2 = Vec::with_capacity(m);
    let mut h3i = Vec::with_capacity(m);
    let mut h3 = Matrix::zeros(n, b);
    for i in 0..m {
        let z = w.w2[i].effective().matmul(&h1);
        let h = match w.activation {
            Activation::Identity => z.clone(),
            a => z.map(|v| a.apply(v)),
        };
        check("h2", &h)?;
        let o = w.w3[i].effective().matmul(&h);
        check("h3i", &o)?;
        h3.add_assign(&o.scale_columns(omega.row(i)));
        if w.activation != Activation::Identity {
            z2s.push(z);
        }
        h2.push(h);
        h3i.push(o);
    }
    check("h3", &h3)?;
    let f = w.w4.effective().matmul(&h3);
    check("f", &f)?;

    Ok(ActivationCache {
        x: x.clone(),
        h1,
        psi,
        phi,
        omega,
        active,
        z2: (w.activation != Activation::Identity).then_some(z2s),
        h2,
        h3i,
        h3,
        f,
        agg_scale: agg,
    })
}

/// Plain chain `W4 W3 W2 W1 x` for a single-expert model with the gate fixed to one.
pub fn dense_equivalent_forward<T: Scalar>(w: &MoEWeights<T>, x: &[T]) -> Result<T> {
    if w.num_experts() != 1 {
        return Err(Error::Config(format!("dense equivalent needs M=1, got M={}", w.num_experts())));
    }
    let d = w.w1.shape().1;
    if x.len() != d {
        return Err(Error::ShapeMismatch { op: "dense_equivalent_forward", detail: format!("input length {} vs D={d}", x.len()) });
    }
    let xv = Matrix::column(x.to_vec());
    let h1 = w.w1.effective().matmul(&xv);
    let z = w.w2[0].effective().matmul(&h1);
    let h2 = z.map(|v| w.activation.apply(v));
    let h3 = w.w3[0].effective().matmul(&h2);
    Ok(w.w4.effective().matmul(&h3)[(0, 0)])
}
