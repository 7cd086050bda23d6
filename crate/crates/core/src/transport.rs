//! Moving parent A into parent B's coordinates, and depth padding.
//!
//! With boundary maps `R_in` (layer input) and `R_out` (layer output) a
//! linear block becomes `R_inᵀ W R_out` and a bias `b R_out` (row form).
//! Padding is inserted in native coordinates, where it is an exact
//! identity, and then transported like any other layer.

use ndarray::{concatenate, s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::alignment::{boundary_sources, slot_layout, AlignmentPlan, Slot};
use crate::error::{Error, Result};
use crate::linalg::{max_abs_diff, Matrix, Vector};
use crate::model::{Linear, Mlp};
use crate::ops::Attention;
use crate::umpm::{scaled_identity, Basis, UmpmLayer, UmpmModel};

fn is_identity(r: &Matrix) -> bool {
    r.nrows() == r.ncols() && r.indexed_iter().all(|((i, j), &x)| x == if i == j { 1.0 } else { 0.0 })
}

fn left(r_in: &Matrix, w: &Matrix) -> Matrix {
    if is_identity(r_in) {
        w.clone()
    } else {
        r_in.t().dot(w)
    }
}

fn right(w: &Matrix, r_out: &Matrix) -> Matrix {
    if is_identity(r_out) {
        w.clone()
    } else {
        w.dot(r_out)
    }
}

fn right_vec(b: &Vector, r_out: &Matrix) -> Vector {
    if is_identity(r_out) {
        b.clone()
    } else {
        b.dot(r_out)
    }
}

/// `(R_inᵀ W R_out, b R_out)`.
pub fn transport_linear(w: &Matrix, b: Option<&Vector>, r_in: &Matrix, r_out: &Matrix) -> Result<(Matrix, Option<Vector>)> {
    if r_in.nrows() != w.nrows() || r_out.nrows() != w.ncols() {
        return Err(Error::dims(format!(
            "transport of a {:?} block with maps {:?} and {:?}",
            w.dim(),
            r_in.dim(),
            r_out.dim()
        )));
    }
    if let Some(b) = b {
        if b.len() != w.ncols() {
            return Err(Error::dims("bias width differs from block width"));
        }
    }
    Ok((right(&left(r_in, w), r_out), b.map(|b| right_vec(b, r_out))))
}

/// How attention parameters were moved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum AttentionTransport {
    /// Each head moved by its own map (always the case for averaged heads).
    PerHead,
    /// One map on the concatenated heads; `heads` may fall back to 1.
    Global { heads: usize },
}

fn head_block_diagonal(r: &Matrix, heads: usize) -> bool {
    let (n, m) = r.dim();
    if n != m || n % heads != 0 {
        return false;
    }
    let dh = n / heads;
    r.indexed_iter().all(|((i, j), &x)| i / dh == j / dh || x == 0.0)
}

/// Transports a GAT-style block `w` (`in x heads*head_dim`) and its
/// attention vectors. Scores `a · z` are preserved whenever the head maps
/// are orthogonal, since `(a R)(z R)ᵀ = a zᵀ`.
pub fn transport_attention(w: &Matrix, att: &Attention, r_in: &Matrix, r_out: &Matrix) -> Result<(Matrix, Attention, AttentionTransport)> {
    let (h, dh) = (att.heads, att.head_dim());
    if r_in.nrows() != w.nrows() || w.ncols() != h * dh || r_out.nrows() != att.out_dim() {
        return Err(Error::dims("attention transport: maps do not fit the block"));
    }
    let w_in = left(r_in, w);
    if !att.concat {
        // Every head writes into the shared output space.
        let heads: Vec<Matrix> = (0..h).map(|k| right(&w_in.slice(s![.., k * dh..(k + 1) * dh]).to_owned(), r_out)).collect();
        let views: Vec<_> = heads.iter().map(|m| m.view()).collect();
        let new = Attention {
            heads: h,
            a_src: right(&att.a_src, r_out),
            a_dst: right(&att.a_dst, r_out),
            concat: false,
            slope: att.slope,
        };
        return Ok((concatenate(Axis(1), &views).expect("equal heights"), new, AttentionTransport::PerHead));
    }
    let width = r_out.ncols();
    let mode = if head_block_diagonal(r_out, h) {
        AttentionTransport::PerHead
    } else if width % h == 0 {
        AttentionTransport::Global { heads: h }
    } else {
        log::info!("attention transport: {h} heads do not divide width {width}; using a single head");
        AttentionTransport::Global { heads: 1 }
    };
    let new_heads = match mode {
        AttentionTransport::PerHead => h,
        AttentionTransport::Global { heads } => heads,
    };
    let flat = |a: &Matrix| {
        let row = a.to_shape((1, h * dh)).expect("contiguous").to_owned();
        right(&row, r_out)
            .into_shape_with_order((new_heads, width / new_heads))
            .expect("heads divide width")
    };
    let new = Attention {
        heads: new_heads,
        a_src: flat(&att.a_src),
        a_dst: flat(&att.a_dst),
        concat: true,
        slope: att.slope,
    };
    Ok((right(&w_in, r_out), new, mode))
}

/// Chains maps through an update MLP: sublayer `k` gets `(R_k, R_{k+1})`
/// with `R_0 = r_in`, `R_K = r_out` and `inner` in between.
pub fn transport_gin_mlp(mlp: &Mlp, r_in: &Matrix, r_out: &Matrix, inner: &[Matrix]) -> Result<Mlp> {
    if inner.len() + 1 != mlp.layers.len() {
        return Err(Error::dims(format!(
            "{} inner maps for a {}-sublayer MLP",
            inner.len(),
            mlp.layers.len()
        )));
    }
    let mut maps = vec![r_in];
    maps.extend(inner.iter());
    maps.push(r_out);
    let layers = mlp
        .layers
        .iter()
        .enumerate()
        .map(|(k, lin)| {
            let (w, b) = transport_linear(&lin.w, Some(&lin.b), maps[k], maps[k + 1])?;
            Ok(Linear { w, b: b.expect("bias given") })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Mlp { layers })
}

fn is_orthogonal(r: &Matrix) -> bool {
    r.is_square() && max_abs_diff(r.t().dot(r).view(), Matrix::eye(r.nrows()).view()) <= 1e-10
}

/// Transports one layer. Layers with an update MLP aggregate in their input
/// space, so their blocks use `R_in` on both sides.
pub fn transport_layer(layer: &UmpmLayer, r_in: &Matrix, r_out: &Matrix, inner: Option<&[Matrix]>) -> Result<(UmpmLayer, Option<AttentionTransport>)> {
    if layer.split_update.is_some() {
        return Err(Error::invalid("union layers are not transported"));
    }
    let r_msg = if layer.post_mlp.is_some() { r_in } else { r_out };
    let mut out = layer.clone();
    out.calibration = None;
    let mut att_mode = None;
    for b in layer.present() {
        let w = layer.block(b).unwrap();
        if b == Basis::Att {
            let att = layer.att.as_ref().ok_or(Error::MissingBasis("att"))?;
            let (w, a, mode) = transport_attention(w, att, r_in, r_msg)?;
            out.blocks[b.index()] = Some(w);
            out.att = Some(a);
            att_mode = Some(mode);
        } else if let (Some(s), true) = (scaled_identity(w.view()), std::ptr::eq(r_in, r_msg) && is_orthogonal(r_in) && w.nrows() == r_in.nrows()) {
            // R^T (sI) R = sI for orthogonal R; keep it exact
            out.blocks[b.index()] = Some(Matrix::eye(w.nrows()) * s);
        } else {
            out.blocks[b.index()] = Some(transport_linear(w, None, r_in, r_msg)?.0);
        }
    }
    if r_msg.nrows() != layer.beta.len() {
        return Err(Error::dims("bias width differs from the message map"));
    }
    out.beta = right_vec(&layer.beta, r_msg);
    if let Some(mlp) = &layer.post_mlp {
        let empty = Vec::new();
        let inner = match inner {
            Some(m) => m,
            None if mlp.layers.len() == 1 => &empty[..],
            None => return Err(Error::invalid("update MLP needs inner maps")),
        };
        out.post_mlp = Some(transport_gin_mlp(mlp, r_in, r_out, inner)?);
    }
    Ok((out, att_mode))
}

/// Inserts native identity layers so both models follow `layout`.
pub fn pad_to_layout(a: &UmpmModel, b: &UmpmModel, layout: &[Slot]) -> Result<(UmpmModel, UmpmModel)> {
    let width = |m: &UmpmModel, i: usize| if i == 0 { m.layers[0].in_dim() } else { m.layers[i - 1].out_dim() };
    let sources = boundary_sources(layout);
    let mut la = Vec::with_capacity(layout.len());
    let mut lb = Vec::with_capacity(layout.len());
    for (t, slot) in layout.iter().enumerate() {
        let (ia, ib) = sources[t];
        la.push(match slot.a {
            Some(i) => a.layers.get(i).cloned().ok_or_else(|| Error::invalid("layout refers past A's depth"))?,
            None => UmpmLayer::identity(width(a, ia)),
        });
        lb.push(match slot.b {
            Some(j) => b.layers.get(j).cloned().ok_or_else(|| Error::invalid("layout refers past B's depth"))?,
            None => UmpmLayer::identity(width(b, ib)),
        });
    }
    let (ea, eb) = *sources.last().expect("nonempty");
    if ea != a.layers.len() || eb != b.layers.len() {
        return Err(Error::invalid("layout does not cover both models"));
    }
    let pa = UmpmModel { layers: la, provenance: a.provenance.clone() };
    let pb = UmpmModel { layers: lb, provenance: b.provenance.clone() };
    pa.validate()?;
    pb.validate()?;
    Ok((pa, pb))
}

/// Pads both models to a common depth following the match list.
pub fn pad_depth(a: &UmpmModel, b: &UmpmModel, matches: &[(usize, usize)]) -> Result<(UmpmModel, UmpmModel, Vec<Slot>)> {
    let valid = matches.first() == Some(&(0, 0))
        && matches.last() == Some(&(a.layers.len(), b.layers.len()))
        && matches.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1);
    if !valid {
        return Err(Error::invalid("matches must be strictly increasing and anchored at both ends"));
    }
    let layout = slot_layout(matches);
    let (pa, pb) = pad_to_layout(a, b, &layout)?;
    Ok((pa, pb, layout))
}

#[derive(Debug, Clone)]
pub struct TransportedModel {
    pub model: UmpmModel,
    pub padding_positions: Vec<usize>,
    /// `(R_in, R_out)` per layer.
    pub applied_maps: Vec<(Matrix, Matrix)>,
    pub attention: Vec<Option<AttentionTransport>>,
}

/// Transports an already padded A (depth equal to the plan's layout).
pub fn transport_model(padded_a: &UmpmModel, plan: &AlignmentPlan) -> Result<TransportedModel> {
    if padded_a.layers.len() != plan.depth() {
        return Err(Error::dims(format!(
            "padded model has {} layers, plan has {} slots",
            padded_a.layers.len(),
            plan.depth()
        )));
    }
    let mut layers = Vec::new();
    let mut applied = Vec::new();
    let mut attention = Vec::new();
    for (t, layer) in padded_a.layers.iter().enumerate() {
        let (r_in, r_out) = (&plan.boundary_maps[t], &plan.boundary_maps[t + 1]);
        let inner = plan.mlp_maps[t].as_deref();
        let (l, mode) = transport_layer(layer, r_in, r_out, inner).map_err(|e| match e {
            Error::DimensionMismatch(m) => Error::dims(format!("slot {t}: {m}")),
            e => e,
        })?;
        layers.push(l);
        applied.push((r_in.clone(), r_out.clone()));
        attention.push(mode);
    }
    let model = UmpmModel {
        layers,
        provenance: padded_a.provenance.clone(),
    };
    model.validate()?;
    Ok(TransportedModel {
        model,
        padding_positions: plan.padding_a(),
        applied_maps: applied,
        attention,
    })
}

/// Identity maps for every boundary of `model`, i.e. transport switched off.
/// Only possible when both parents share every boundary width.
pub fn identity_maps(widths_a: &[usize], widths_b: &[usize]) -> Result<Vec<Matrix>> {
    if widths_a != widths_b {
        return Err(Error::dims(format!(
            "without transport the padded widths must agree ({widths_a:?} vs {widths_b:?})"
        )));
    }
    Ok(widths_a.iter().map(|&w| Array2::eye(w)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::procrustes;
    use crate::graph::{Csr, GraphView};
    use crate::linalg::max_abs_diff;
    use crate::model::{Arch, GraphModel, InitOptions, ParentModel};
    use crate::ops;
    use crate::umpm::canonicalize;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, d: usize, rng: &mut impl Rng) -> Matrix {
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    fn orthogonal(d: usize, rng: &mut impl Rng) -> Matrix {
        procrustes(random(3 * d, d, rng).view(), random(3 * d, d, rng).view()).unwrap()
    }

    #[test]
    fn identity_maps_are_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = random(4, 3, &mut rng);
        let b = Vector::from(vec![0.1, 0.2, 0.3]);
        let (w2, b2) = transport_linear(&w, Some(&b), &Array2::eye(4), &Array2::eye(3)).unwrap();
        assert_eq!(w2, w);
        assert_eq!(b2.unwrap(), b);
    }

    #[test]
    fn orthogonal_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(4, 3, &mut rng);
        let b = Vector::from(vec![0.1, -0.2, 0.3]);
        let (qi, qo) = (orthogonal(4, &mut rng), orthogonal(3, &mut rng));
        let (w2, b2) = transport_linear(&w, Some(&b), &qi, &qo).unwrap();
        let (w3, b3) = transport_linear(&w2, b2.as_ref(), &qi.t().to_owned(), &qo.t().to_owned()).unwrap();
        assert!(max_abs_diff(w3.view(), w.view()) < 1e-12);
        assert!((b3.unwrap() - &b).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let w = Array2::zeros((4, 3));
        assert!(matches!(
            transport_linear(&w, None, &Array2::eye(3), &Array2::eye(3)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn single_head_scores_survive_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let csr = Csr::from_edges(5, &[(0, 1), (2, 1), (3, 1), (1, 4), (0, 4), (4, 0)]).unwrap();
        let x = random(5, 3, &mut rng);
        let w = random(3, 4, &mut rng);
        let att = Attention { heads: 1, a_src: random(1, 4, &mut rng), a_dst: random(1, 4, &mut rng), concat: true, slope: 0.2 };
        let (qi, qo) = (orthogonal(3, &mut rng), orthogonal(4, &mut rng));
        let (w2, att2, mode) = transport_attention(&w, &att, &qi, &qo).unwrap();
        assert_eq!(mode, AttentionTransport::PerHead);
        let before = ops::attention_coefficients(&csr, &x.dot(&w), &att);
        let after = ops::attention_coefficients(&csr, &x.dot(&qi).dot(&w2), &att2);
        for (p, q) in before.iter().zip(&after) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn width_change_selects_global_fallback() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let att = Attention { heads: 8, a_src: random(8, 8, &mut rng), a_dst: random(8, 8, &mut rng), concat: true, slope: 0.2 };
        let w = random(5, 64, &mut rng);
        let r_out = procrustes(random(100, 64, &mut rng).view(), random(100, 30, &mut rng).view()).unwrap();
        let (w2, att2, mode) = transport_attention(&w, &att, &Array2::eye(5), &r_out).unwrap();
        assert_eq!(mode, AttentionTransport::Global { heads: 1 });
        assert_eq!((w2.ncols(), att2.heads, att2.head_dim()), (30, 1, 30));
        let r_out = procrustes(random(100, 64, &mut rng).view(), random(100, 32, &mut rng).view()).unwrap();
        let (_, att3, mode) = transport_attention(&w, &att, &Array2::eye(5), &r_out).unwrap();
        assert_eq!(mode, AttentionTransport::Global { heads: 8 });
        assert_eq!(att3.head_dim(), 4);
    }

    #[test]
    fn one_sublayer_mlp_is_linear_transport() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lin = Linear { w: random(3, 2, &mut rng), b: Vector::from(vec![0.5, -0.5]) };
        let (qi, qo) = (orthogonal(3, &mut rng), orthogonal(2, &mut rng));
        let m = transport_gin_mlp(&Mlp { layers: vec![lin.clone()] }, &qi, &qo, &[]).unwrap();
        let (w, b) = transport_linear(&lin.w, Some(&lin.b), &qi, &qo).unwrap();
        assert_eq!(m.layers[0].w, w);
        assert_eq!(m.layers[0].b, b.unwrap());
    }

    #[test]
    fn identical_inner_maps_leave_mlp_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mlp = Mlp {
            layers: vec![
                Linear { w: random(3, 4, &mut rng), b: Vector::zeros(4) },
                Linear { w: random(4, 2, &mut rng), b: Vector::zeros(2) },
            ],
        };
        let out = transport_gin_mlp(&mlp, &Array2::eye(3), &Array2::eye(2), &[Array2::eye(4)]).unwrap();
        assert_eq!(out, mlp);
    }

    #[test]
    fn padding_follows_gap_positions_and_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = canonicalize(&ParentModel::random(Arch::Sage, &[3, 6, 2], &InitOptions::default(), &mut rng)).unwrap();
        let b = canonicalize(&ParentModel::random(Arch::Gcn, &[3, 5, 4, 2], &InitOptions::default(), &mut rng)).unwrap();
        let (pa, pb, layout) = pad_depth(&a, &b, &[(0, 0), (1, 1), (2, 3)]).unwrap();
        assert_eq!(pa.layers.len(), 3);
        assert!(pa.layers[1].is_padding && !pa.layers[2].is_padding);
        assert_eq!(pb, b);
        assert_eq!(layout[1], Slot { a: None, b: Some(1) });
        let csr = Csr::from_edges(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]).unwrap();
        let x = random(4, 3, &mut rng);
        let g = GraphView { csr: &csr, features: &x };
        let d = max_abs_diff(pa.predict(g).unwrap().view(), a.predict(g).unwrap().view());
        assert!(d <= 1e-12);
        // equal depths with a diagonal match need no padding
        let (qa, _, _) = pad_depth(&a, &a, &[(0, 0), (1, 1), (2, 2)]).unwrap();
        assert_eq!(qa, a);
    }

    #[test]
    fn identity_layer_forward() {
        let csr = Csr::from_edges(2, &[(0, 1)]).unwrap();
        let x = array![[1.0, -2.0], [3.0, 4.0]];
        let g = GraphView { csr: &csr, features: &x };
        assert_eq!(UmpmLayer::identity(2).apply(g, &x, None), x);
    }
}
