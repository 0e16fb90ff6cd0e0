use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::forward::ActivationCache;
use crate::model::gate::GateSpec;
use crate::model::weights::MoEWeights;
use crate::scalar::Scalar;

/// Exact gradients of `sum_b chi_b f_b` and the per-sample hidden gradients of `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCache<T> {
    /// `dL/df` per sample.
    pub chi: Vec<T>,
    pub g_w1: Matrix<T>,
    pub g_q: Matrix<T>,
    pub g_w2: Vec<Matrix<T>>,
    pub g_w3: Vec<Matrix<T>>,
    pub g_w4: Matrix<T>,
    /// `df/dh3 = W4^T`, `N x 1` (identical for every sample).
    pub df_dh3: Matrix<T>,
    /// `df/dh3_i = omega_i W4^T`, `N x B` each.
    pub df_dh3i: Vec<Matrix<T>>,
    /// Gradient with respect to the expert hidden state `h2_i`, `N_e x B` each.
    pub df_dh2: Vec<Matrix<T>>,
    /// `df/dphi`, `M x B`; zero outside the active set.
    pub df_dphi: Matrix<T>,
    /// `df/dpsi`, `M x B`.
    pub df_dpsi: Matrix<T>,
    /// Expert-pathway part of `df/dh1`, `N x B`.
    pub df_dh1_exp: Matrix<T>,
    /// Router-pathway part of `df/dh1`, `N x B`.
    pub df_dh1_router: Matrix<T>,
}

impl<T: Scalar> GradientCache<T> {
    pub fn df_dh1(&self) -> Matrix<T> {
        self.df_dh1_exp.add(&self.df_dh1_router)
    }

    /// Weight gradients in the order of [`MoEWeights::tensors`].
    pub fn weight_grads(&self) -> Vec<&Matrix<T>> {
        let mut out = vec![&self.g_w1, &self.g_q];
        out.extend(self.g_w2.iter());
        out.extend(self.g_w3.iter());
        out.push(&self.g_w4);
        out
    }

    pub fn weight_grads_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = vec![&mut self.g_w1, &mut self.g_q];
        out.extend(self.g_w2.iter_mut());
        out.extend(self.g_w3.iter_mut());
        out.push(&mut self.g_w4);
        out
    }
}

/// Analytic backward pass through the block for the cache produced by
/// [`forward`](crate::model::forward) on the same weights.
///
/// Under top-k only selected experts receive gradient; the hard selection is
/// treated as constant, so non-selected logits get zero gradient.
pub fn backward<T: Scalar>(
    w: &MoEWeights<T>,
    cache: &ActivationCache<T>,
    chi: &[T],
    gate: &GateSpec,
) -> Result<GradientCache<T>> {
    let (n, d) = w.w1.shape();
    let m = w.num_experts();
    let b = cache.batch();
    let mismatch = |detail: String| Err(Error::ShapeMismatch { op: "backward", detail });
    if cache.x.rows() != d || cache.h1.rows() != n || cache.psi.rows() != m || cache.h2.len() != m || cache.h3i.len() != m {
        return mismatch("cache does not belong to these weights".into());
    }
    if chi.len() != b {
        return mismatch(format!("{} chi values for batch {b}", chi.len()));
    }
    if cache.h2[0].rows() != w.w2[0].shape().0 {
        return mismatch("expert width differs from cache".into());
    }

    let w4 = w.w4.effective();
    let w4t = w4.transpose();
    let q = w.q.effective();

    let mut df_dh3i = Vec::with_capacity(m);
    let mut df_dh2 = Vec::with_capacity(m);
    let mut df_dphi = Matrix::zeros(m, b);
    let mut df_dh1_exp = Matrix::zeros(n, b);
    let mut g_w2 = Vec::with_capacity(m);
    let mut g_w3 = Vec::with_capacity(m);

    for i in 0..m {
        let omega = cache.omega.row(i);
        let w3 = w.w3[i].effective();
        // W3_i^T W4^T, shared by every sample
        let u = w3.t_matmul(&w4t);
        let dh3i = Matrix::outer(w4t.as_slice(), omega);
        let dh2 = Matrix::outer(u.as_slice(), omega);
        let dz2 = match &cache.z2 {
            None => dh2.clone(),
            Some(z) => {
                let act = w.activation;
                let dz = z[i].map(|v| act.derivative(v));
                dh2.hadamard(&dz)
            }
        };
        df_dh1_exp.add_assign(&w.w2[i].effective().t_matmul(&dz2));

        // <h3_i, W4> per sample, masked to the active set
        let proj = cache.h3i[i].dot_columns(w4.as_slice());
        for col in 0..b {
            if cache.active[col].binary_search(&i).is_ok() {
                df_dphi[(i, col)] = cache.agg_scale * proj[col];
            }
        }

        g_w3.push(dh3i.scale_columns(chi).matmul_t(&cache.h2[i]));
        g_w2.push(dz2.scale_columns(chi).matmul_t(&cache.h1));
        df_dh3i.push(dh3i);
        df_dh2.push(dh2);
    }

    let mut df_dpsi = Matrix::zeros(m, b);
    for col in 0..b {
        let phi = cache.phi.col_to_vec(col);
        let dphi = df_dphi.col_to_vec(col);
        let g = gate.vjp(&phi, &cache.active[col], &dphi);
        for (i, v) in g.into_iter().enumerate() {
            df_dpsi[(i, col)] = v;
        }
    }
    let df_dh1_router = q.t_matmul(&df_dpsi);
    let g_q = df_dpsi.scale_columns(chi).matmul_t(&cache.h1);
    let df_dh1 = df_dh1_exp.add(&df_dh1_router);
    let g_w1 = df_dh1.scale_columns(chi).matmul_t(&cache.x);
    let chi_row = Matrix::from_vec(1, b, chi.to_vec())?;
    let g_w4 = chi_row.matmul_t(&cache.h3);

    Ok(GradientCache {
        chi: chi.to_vec(),
        g_w1,
        g_q,
        g_w2,
        g_w3,
        g_w4,
        df_dh3: w4t,
        df_dh3i,
        df_dh2,
        df_dphi,
        df_dpsi,
        df_dh1_exp,
        df_dh1_router,
    })
}
