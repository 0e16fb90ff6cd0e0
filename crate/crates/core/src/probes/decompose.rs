use crate::error::{Error, Result};
use crate::linalg::{rms_of, Matrix};
use crate::model::{forward, Activation, ActivationCache, GateSpec, GradientCache, MoEWeights};
use crate::probes::terms::{TermId, TermMap};
use crate::scalar::Scalar;

/// Relative tolerance of every decomposition identity.
pub const IDENTITY_TOL: f64 = 1e-10;

fn rms<T: Scalar>(m: &Matrix<T>) -> f64 {
    rms_of(m.as_slice())
}

/// RMS over the concatenation of several equally shaped matrices.
fn rms_stack<T: Scalar>(ms: &[Matrix<T>]) -> f64 {
    let total: usize = ms.iter().map(|m| m.len()).sum();
    if total == 0 {
        return 0.0;
    }
    let ss: f64 = ms.iter().map(|m| rms(m).powi(2) * m.len() as f64).sum();
    (ss / total as f64).sqrt()
}

/// RMS of the stack `{ v_i omega_i^T }` without materializing it.
fn outer_stack_rms<T: Scalar>(vs: &[Matrix<T>], omega: &Matrix<T>) -> f64 {
    let mut ss = 0.0;
    let mut count = 0usize;
    for (i, v) in vs.iter().enumerate() {
        let row = omega.row(i);
        ss += (rms(v).powi(2) * v.len() as f64) * (rms_of(row).powi(2) * row.len() as f64);
        count += v.len() * row.len();
    }
    if count == 0 {
        0.0
    } else {
        (ss / count as f64).sqrt()
    }
}

/// Fails with [`Error::Identity`] unless `pieces` sum to `full` within
/// [`IDENTITY_TOL`] relative to the largest of their RMS norms.
pub fn check_identity<T: Scalar>(quantity: &str, full: &Matrix<T>, pieces: &[&Matrix<T>]) -> Result<()> {
    check_identity_against(quantity, full, pieces, 0.0)
}

/// [`check_identity`] with `reference` as an extra floor on the normalizing scale.
pub fn check_identity_against<T: Scalar>(quantity: &str, full: &Matrix<T>, pieces: &[&Matrix<T>], reference: f64) -> Result<()> {
    let mut sum = Matrix::zeros(full.rows(), full.cols());
    let mut scale = rms(full).max(reference);
    for p in pieces {
        if p.shape() != full.shape() {
            return Err(Error::ShapeMismatch { op: "check_identity", detail: format!("{quantity}: piece {:?} vs {:?}", p.shape(), full.shape()) });
        }
        sum.add_assign(p);
        scale = scale.max(rms(p));
    }
    let err = rms(&sum.sub(full));
    let rel = if scale == 0.0 { err } else { err / scale };
    if !(rel <= IDENTITY_TOL) {
        return Err(Error::Identity { quantity: quantity.to_string(), rel_err: rel });
    }
    Ok(())
}

/// Forward pass with every delta dropped, on the same input.
pub fn base_forward<T: Scalar>(w: &MoEWeights<T>, x: &Matrix<T>, gate: &GateSpec) -> Result<ActivationCache<T>> {
    forward(&w.base_only(), x, gate)
}

fn require_linear<T: Scalar>(w: &MoEWeights<T>) -> Result<()> {
    if w.activation != Activation::Identity {
        return Err(Error::Unsupported("decompositions need identity expert activations".into()));
    }
    Ok(())
}

fn require_same_input<T: Scalar>(cache: &ActivationCache<T>, cache0: &ActivationCache<T>) -> Result<()> {
    if cache.x != cache0.x {
        return Err(Error::ShapeMismatch { op: "decomposition", detail: "caches were computed on different inputs".into() });
    }
    Ok(())
}

/// Layers with an init / propagating / effective / cross split of `h = W x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActLayer {
    H1,
    Psi,
    H2,
    H3i,
    /// The aggregate; its pieces are `A1`, `A21 + A22`, `A3`, `D`.
    H3,
    F,
}

/// `W0 x0`, `W0 dx`, `dW x0`, `dW dx`; one matrix per expert for expert layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSplit<T> {
    pub init: Vec<Matrix<T>>,
    pub prop: Vec<Matrix<T>>,
    pub eff: Vec<Matrix<T>>,
    pub cross: Vec<Matrix<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRms {
    pub total: f64,
    pub init: f64,
    pub prop: f64,
    pub eff: f64,
    pub cross: f64,
}

impl<T: Scalar> LayerSplit<T> {
    fn single(init: Matrix<T>, prop: Matrix<T>, eff: Matrix<T>, cross: Matrix<T>) -> Self {
        Self { init: vec![init], prop: vec![prop], eff: vec![eff], cross: vec![cross] }
    }

    fn rms(&self, total: f64) -> SplitRms {
        SplitRms { total, init: rms_stack(&self.init), prop: rms_stack(&self.prop), eff: rms_stack(&self.eff), cross: rms_stack(&self.cross) }
    }
}

/// Every forward piece at one probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardSplit<T> {
    pub h1: LayerSplit<T>,
    pub psi: LayerSplit<T>,
    pub h2: LayerSplit<T>,
    pub h3i: LayerSplit<T>,
    pub a1: Matrix<T>,
    pub a21: Matrix<T>,
    pub a22: Matrix<T>,
    pub a3: Matrix<T>,
    pub d: Matrix<T>,
    pub f: LayerSplit<T>,
}

/// Splits every forward quantity of `cache` against the base-weight pass
/// `cache0` on the same input and verifies each identity.
///
/// `A22` applies `dW2` to the current `h1`, so it also carries `W0^3 dW^2 dh^1`
/// and the five aggregation terms sum to `h3` exactly.
pub fn forward_split<T: Scalar>(w: &MoEWeights<T>, cache: &ActivationCache<T>, cache0: &ActivationCache<T>) -> Result<ForwardSplit<T>> {
    require_linear(w)?;
    require_same_input(cache, cache0)?;
    let x = &cache.x;
    let m = w.num_experts();
    let (n, b) = (cache.h1.rows(), cache.batch());
    if cache.h2.len() != m || cache0.h2.len() != m || n != w.w1.shape().0 {
        return Err(Error::ShapeMismatch { op: "forward_split", detail: "caches do not belong to these weights".into() });
    }

    let h1_0 = w.w1.base().matmul(x);
    let dh1 = w.w1.delta().matmul(x);
    let zeros_n = Matrix::zeros(n, b);
    check_identity("h1", &cache.h1, &[&h1_0, &dh1])?;
    let h1 = LayerSplit::single(h1_0.clone(), zeros_n.clone(), dh1.clone(), zeros_n.clone());

    let (q0, dq) = (w.q.base(), w.q.delta());
    let psi = LayerSplit::single(q0.matmul(&h1_0), q0.matmul(&dh1), dq.matmul(&h1_0), dq.matmul(&dh1));
    check_identity("psi", &cache.psi, &[&psi.init[0], &psi.prop[0], &psi.eff[0], &psi.cross[0]])?;

    let mut h2 = LayerSplit { init: Vec::with_capacity(m), prop: Vec::new(), eff: Vec::new(), cross: Vec::new() };
    let mut h3i = h2.clone();
    let mut a1 = zeros_n.clone();
    let mut a21 = zeros_n.clone();
    let mut a22 = zeros_n.clone();
    let mut a3 = zeros_n.clone();
    let mut d = zeros_n.clone();
    for i in 0..m {
        let (w2_0, dw2) = (w.w2[i].base(), w.w2[i].delta());
        let (w3_0, dw3) = (w.w3[i].base(), w.w3[i].delta());
        let init2 = w2_0.matmul(&h1_0);
        let prop2 = w2_0.matmul(&dh1);
        let eff2 = dw2.matmul(&h1_0);
        let cross2 = dw2.matmul(&dh1);
        check_identity("h2", &cache.h2[i], &[&init2, &prop2, &eff2, &cross2])?;
        let upd2 = eff2.add(&cross2);
        let dh2 = prop2.add(&upd2);

        let init3 = w3_0.matmul(&init2);
        let chain = w3_0.matmul(&prop2);
        let prop_eff = w3_0.matmul(&upd2);
        let prop3 = chain.add(&prop_eff);
        let eff3 = dw3.matmul(&init2);
        let cross3 = dw3.matmul(&dh2);
        check_identity("h3i", &cache.h3i[i], &[&init3, &prop3, &eff3, &cross3])?;

        let om = cache.omega.row(i);
        a1.add_assign(&init3.scale_columns(om));
        a21.add_assign(&chain.scale_columns(om));
        a22.add_assign(&prop_eff.scale_columns(om));
        a3.add_assign(&eff3.scale_columns(om));
        d.add_assign(&cross3.scale_columns(om));

        h2.init.push(init2);
        h2.prop.push(prop2);
        h2.eff.push(eff2);
        h2.cross.push(cross2);
        h3i.init.push(init3);
        h3i.prop.push(prop3);
        h3i.eff.push(eff3);
        h3i.cross.push(cross3);
    }
    check_identity("h3 aggregation", &cache.h3, &[&a1, &a21, &a22, &a3, &d])?;

    let h3_0 = &cache0.h3;
    let dh3 = cache.h3.sub(h3_0);
    let (w4_0, dw4) = (w.w4.base(), w.w4.delta());
    let f = LayerSplit::single(w4_0.matmul(h3_0), w4_0.matmul(&dh3), dw4.matmul(h3_0), dw4.matmul(&dh3));
    check_identity("f", &cache.f, &[&f.init[0], &f.prop[0], &f.eff[0], &f.cross[0]])?;

    Ok(ForwardSplit { h1, psi, h2, h3i, a1, a21, a22, a3, d, f })
}

impl<T: Scalar> ForwardSplit<T> {
    fn terms(&self, cache: &ActivationCache<T>, out: &mut TermMap) {
        let put = |out: &mut TermMap, ids: [TermId; 5], s: SplitRms| {
            for (id, v) in ids.into_iter().zip([s.total, s.init, s.prop, s.eff, s.cross]) {
                out.insert(id, v);
            }
        };
        use TermId::*;
        put(out, [H1, H1Init, H1Prop, H1Eff, H1Cross], self.h1.rms(rms(&cache.h1)));
        put(out, [Psi, PsiInit, PsiProp, PsiEff, PsiCross], self.psi.rms(rms(&cache.psi)));
        out.insert(Phi, rms(&cache.phi));
        put(out, [H2, H2Init, H2Prop, H2Eff, H2Cross], self.h2.rms(rms_stack(&cache.h2)));
        put(out, [H3i, H3iInit, H3iProp, H3iEff, H3iCross], self.h3i.rms(rms_stack(&cache.h3i)));
        out.insert(H3, rms(&cache.h3));
        out.insert(A1, rms(&self.a1));
        out.insert(A21, rms(&self.a21));
        out.insert(A22, rms(&self.a22));
        out.insert(A2, rms(&self.a21.add(&self.a22)));
        out.insert(A3, rms(&self.a3));
        out.insert(D, rms(&self.d));
        put(out, [F, FInit, FProp, FEff, FCross], self.f.rms(rms(&cache.f)));
    }

    pub fn split(&self, layer: ActLayer, cache: &ActivationCache<T>) -> SplitRms {
        match layer {
            ActLayer::H1 => self.h1.rms(rms(&cache.h1)),
            ActLayer::Psi => self.psi.rms(rms(&cache.psi)),
            ActLayer::H2 => self.h2.rms(rms_stack(&cache.h2)),
            ActLayer::H3i => self.h3i.rms(rms_stack(&cache.h3i)),
            ActLayer::H3 => SplitRms {
                total: rms(&cache.h3),
                init: rms(&self.a1),
                prop: rms(&self.a21.add(&self.a22)),
                eff: rms(&self.a3),
                cross: rms(&self.d),
            },
            ActLayer::F => self.f.rms(rms(&cache.f)),
        }
    }
}

/// RMS of the five aggregation terms `A1, A21, A22, A3, D` (plus `A2 = A21 + A22`
/// and the total), after checking that they sum to `h3`.
pub fn decompose_forward_aggregation<T: Scalar>(w: &MoEWeights<T>, cache: &ActivationCache<T>, cache0: &ActivationCache<T>) -> Result<TermMap> {
    let s = forward_split(w, cache, cache0)?;
    let mut out = TermMap::new();
    for (id, m) in [(TermId::A1, &s.a1), (TermId::A21, &s.a21), (TermId::A22, &s.a22), (TermId::A3, &s.a3), (TermId::D, &s.d)] {
        out.insert(id, rms(m));
    }
    out.insert(TermId::A2, rms(&s.a21.add(&s.a22)));
    out.insert(TermId::H3, rms(&cache.h3));
    Ok(out)
}

/// Init / propagating / effective / cross split of one layer.
pub fn decompose_layer_update<T: Scalar>(layer: ActLayer, w: &MoEWeights<T>, cache: &ActivationCache<T>, cache0: &ActivationCache<T>) -> Result<SplitRms> {
    Ok(forward_split(w, cache, cache0)?.split(layer, cache))
}

/// Splits the hidden gradients of `f` by substituting init or update in each
/// weight slot, checks every identity and returns the RMS of each piece.
pub fn decompose_backward_input_grad<T: Scalar>(
    w: &MoEWeights<T>,
    cache: &ActivationCache<T>,
    grads: &GradientCache<T>,
    gate: &GateSpec,
) -> Result<TermMap> {
    require_linear(w)?;
    let m = w.num_experts();
    let b = cache.batch();
    let n = w.w1.shape().0;
    if grads.df_dh2.len() != m || grads.df_dh1_exp.shape() != (n, b) || cache.h2.len() != m {
        return Err(Error::ShapeMismatch { op: "decompose_backward_input_grad", detail: "gradients do not belong to this cache".into() });
    }
    let agg = cache.agg_scale;
    let mut out = TermMap::new();
    use TermId::*;

    // W4 slots: [init, update] as columns
    let u4 = [w.w4.base().transpose(), w.w4.delta().transpose()];
    check_identity("df/dh3", &grads.df_dh3, &[&u4[0], &u4[1]])?;
    out.insert(Dh3, rms(&grads.df_dh3));
    out.insert(Dh3Init, rms(&u4[0]));
    out.insert(Dh3Upd, rms(&u4[1]));

    let stack = |v: &Matrix<T>| vec![v.clone(); m];
    out.insert(Dh3i, rms_stack(&grads.df_dh3i));
    out.insert(Dh3iInit, outer_stack_rms(&stack(&u4[0]), &cache.omega));
    out.insert(Dh3iUpd, outer_stack_rms(&stack(&u4[1]), &cache.omega));
    for i in 0..m {
        let sum = u4[0].add(&u4[1]);
        let full = Matrix::outer(sum.as_slice(), cache.omega.row(i));
        check_identity("df/dh3i", &grads.df_dh3i[i], &[&full])?;
    }

    // v[b][c][i] = (W3_b)^T (W4_c)^T for expert i
    let mut v: [[Vec<Matrix<T>>; 2]; 2] = Default::default();
    for i in 0..m {
        let w3 = [w.w3[i].base(), w.w3[i].delta()];
        for (bi, w3b) in w3.iter().enumerate() {
            for (ci, u) in u4.iter().enumerate() {
                v[bi][ci].push(w3b.t_matmul(u));
            }
        }
    }

    // df/dh2_i grid
    let grid_ids = [[Dh2II, Dh2IU], [Dh2UI, Dh2UU]];
    for bi in 0..2 {
        for ci in 0..2 {
            out.insert(grid_ids[bi][ci], outer_stack_rms(&v[bi][ci], &cache.omega));
        }
    }
    for i in 0..m {
        let pieces: Vec<Matrix<T>> = (0..4).map(|k| Matrix::outer(v[k / 2][k % 2][i].as_slice(), cache.omega.row(i))).collect();
        check_identity("df/dh2", &grads.df_dh2[i], &pieces.iter().collect::<Vec<_>>())?;
    }
    out.insert(Dh2, rms_stack(&grads.df_dh2));

    // df/dphi grid: agg <W3_b h2_i, W4_c> on the active set
    let dphi: [[Matrix<T>; 2]; 2] = std::array::from_fn(|bi| {
        std::array::from_fn(|ci| {
            let mut p = Matrix::zeros(m, b);
            for i in 0..m {
                let proj = cache.h2[i].dot_columns(v[bi][ci][i].as_slice());
                for col in 0..b {
                    if cache.active[col].binary_search(&i).is_ok() {
                        p[(i, col)] = agg * proj[col];
                    }
                }
            }
            p
        })
    });
    check_identity("df/dphi", &grads.df_dphi, &[&dphi[0][0], &dphi[0][1], &dphi[1][0], &dphi[1][1]])?;
    out.insert(Dphi, rms(&grads.df_dphi));
    let dphi_ids = [[DphiII, DphiIU], [DphiUI, DphiUU]];
    for bi in 0..2 {
        for ci in 0..2 {
            out.insert(dphi_ids[bi][ci], rms(&dphi[bi][ci]));
        }
    }
    out.insert(DphiInit4, rms(&dphi[0][0].add(&dphi[1][0])));
    out.insert(DphiUpd4, rms(&dphi[0][1].add(&dphi[1][1])));

    // router pathway: Q_a^T J^T dphi_bc
    let q = [w.q.base(), w.q.delta()];
    let dpsi: [[Matrix<T>; 2]; 2] = std::array::from_fn(|bi| {
        std::array::from_fn(|ci| {
            let mut out = Matrix::zeros(m, b);
            for col in 0..b {
                let g = gate.vjp(&cache.phi.col_to_vec(col), &cache.active[col], &dphi[bi][ci].col_to_vec(col));
                for (i, val) in g.into_iter().enumerate() {
                    out[(i, col)] = val;
                }
            }
            out
        })
    });
    let router: [[[Matrix<T>; 2]; 2]; 2] =
        std::array::from_fn(|ai| std::array::from_fn(|bi| std::array::from_fn(|ci| q[ai].t_matmul(&dpsi[bi][ci]))));
    let flat: Vec<&Matrix<T>> = router.iter().flatten().flatten().collect();
    // shared experts make the softmax vjp cancel to rounding noise; judge it on the scale of the whole df/dh1
    check_identity_against("df/dh1 router", &grads.df_dh1_router, &flat, rms(&grads.df_dh1_exp))?;
    out.insert(Dh1Router, rms(&grads.df_dh1_router));
    let fine = [[[RouterQ0II, RouterQ0IU], [RouterQ0UI, RouterQ0UU]], [[RouterDqII, RouterDqIU], [RouterDqUI, RouterDqUU]]];
    for ai in 0..2 {
        for bi in 0..2 {
            for ci in 0..2 {
                out.insert(fine[ai][bi][ci], rms(&router[ai][bi][ci]));
            }
        }
    }
    let vi = |a: usize| router[a][0][0].add(&router[a][0][1]);
    let vu = |a: usize| router[a][1][0].add(&router[a][1][1]);
    out.insert(RouterQ0VI, rms(&vi(0)));
    out.insert(RouterQ0VU, rms(&vu(0)));
    out.insert(RouterDqVI, rms(&vi(1)));
    out.insert(RouterDqVU, rms(&vu(1)));
    out.insert(RouterQ0, rms(&vi(0).add(&vu(0))));
    out.insert(RouterDq, rms(&vi(1).add(&vu(1))));

    // expert pathway: sum_i omega_i (W2_a)^T (W3_b)^T (W4_c)^T
    let exp: [[[Matrix<T>; 2]; 2]; 2] = std::array::from_fn(|ai| {
        std::array::from_fn(|bi| {
            std::array::from_fn(|ci| {
                let mut y = Matrix::zeros(n, m);
                for i in 0..m {
                    let w2a = if ai == 0 { w.w2[i].base() } else { w.w2[i].delta() };
                    let col = w2a.t_matmul(&v[bi][ci][i]);
                    for (r, val) in col.as_slice().iter().enumerate() {
                        y[(r, i)] = *val;
                    }
                }
                y.matmul(&cache.omega)
            })
        })
    });
    let flat: Vec<&Matrix<T>> = exp.iter().flatten().flatten().collect();
    check_identity("df/dh1 expert", &grads.df_dh1_exp, &flat)?;
    out.insert(Dh1Exp, rms(&grads.df_dh1_exp));
    // A4: (W2 init, W3 init); A5: (init, update); A6: (update, init); E: (update, update)
    let names = [[(A4_1, A4_2, A4), (A5_1, A5_2, A5)], [(A6_1, A6_2, A6), (E1, E2, E)]];
    for ai in 0..2 {
        for bi in 0..2 {
            let (one, two, both) = names[ai][bi];
            out.insert(one, rms(&exp[ai][bi][0]));
            out.insert(two, rms(&exp[ai][bi][1]));
            out.insert(both, rms(&exp[ai][bi][0].add(&exp[ai][bi][1])));
        }
    }
    out.insert(Dh1, rms(&grads.df_dh1()));
    Ok(out)
}

/// Every forward and backward term at one probe.
pub fn probe_all<T: Scalar>(
    w: &MoEWeights<T>,
    cache: &ActivationCache<T>,
    cache0: &ActivationCache<T>,
    grads: &GradientCache<T>,
    gate: &GateSpec,
) -> Result<TermMap> {
    let mut out = decompose_backward_input_grad(w, cache, grads, gate)?;
    forward_split(w, cache, cache0)?.terms(cache, &mut out);
    Ok(out)
}
