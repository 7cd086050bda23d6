//! Label-free fusion of two aligned operator mixtures.
//!
//! Inputs are the transported, padded parent A and the padded parent B,
//! layer for layer in one coordinate system. Per layer we pick a mixing
//! coefficient `alpha` (A's share), mix parameters, and optionally refit
//! the gates against the shared design `H* = (H_A + H_B) / 2`.

use std::str::FromStr;

use ndarray::{concatenate, s, Array1, Array2, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphView;
use crate::linalg::{Matrix, Vector};
use crate::model::{ActivationTrace, Linear, Mlp};
use crate::ops::Attention;
use crate::umpm::{apply_basis, Basis, SplitUpdate, UmpmLayer, UmpmModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    ConfRisk,
    #[serde(alias = "reconstruction")]
    Recon,
    Fixed,
}

impl FromStr for AlphaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conf_risk" => Ok(AlphaMode::ConfRisk),
            "recon" | "reconstruction" => Ok(AlphaMode::Recon),
            "fixed" => Ok(AlphaMode::Fixed),
            _ => Err(Error::invalid(format!("unknown alpha mode `{s}` (conf_risk|recon|fixed)"))),
        }
    }
}

/// What the gate regression fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateTarget {
    #[default]
    Mean,
    ParentA,
    ParentB,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub lambda: f64,
    pub whiten: bool,
    pub top_k: Option<usize>,
    pub alpha_mode: AlphaMode,
    pub fixed_alpha: Option<f64>,
    pub eps: f64,
    /// Share kept by a padding layer when alpha is chosen from data.
    pub w_pad: f64,
    pub gate_target: GateTarget,
    pub recon_target: ReconTarget,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            lambda: 1e-4,
            whiten: true,
            top_k: None,
            alpha_mode: AlphaMode::ConfRisk,
            fixed_alpha: None,
            eps: 1e-8,
            w_pad: 0.5,
            gate_target: GateTarget::Mean,
            recon_target: ReconTarget::Mean,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be >= 0"));
        }
        if let Some(k) = self.top_k {
            if k == 0 || k > Basis::ALL.len() {
                return Err(Error::invalid(format!("top_k must be in 1..={}", Basis::ALL.len())));
            }
        }
        match (self.alpha_mode, self.fixed_alpha) {
            (AlphaMode::Fixed, None) => return Err(Error::invalid("fixed alpha mode needs a value")),
            (_, Some(a)) if !(0.0..=1.0).contains(&a) => return Err(Error::invalid("fixed alpha must be in [0, 1]")),
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.w_pad) {
            return Err(Error::invalid("w_pad must be in [0, 1]"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("eps must be positive"));
        }
        Ok(())
    }
}

fn same_shape(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::dims(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

pub fn shared_design(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    same_shape(a, b, "shared design")?;
    Ok(Zip::from(a).and(b).map_collect(|x, y| 0.5 * (x + y)))
}

// ---------------------------------------------------------------------------
// gate regression

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRegressionResult {
    /// Indexed like `Basis::ALL`; bases outside the design stay 0.
    pub gates: [f64; 5],
    /// `||u - sum_b g_b B_b||_F`.
    pub residual: f64,
    pub selected: Vec<Basis>,
}

fn inner(a: &Matrix, b: &Matrix) -> f64 {
    Zip::from(a).and(b).fold(0.0, |s, x, y| s + x * y)
}

/// Solves `(G + lambda I) g = r` by Cholesky.
fn solve_normal(gram: &Matrix, rhs: &Vector, lambda: f64) -> Result<Vector> {
    let n = rhs.len();
    let mut m = gram.clone();
    for i in 0..n {
        m[[i, i]] += lambda;
    }
    crate::linalg::solve_spd(&m, rhs).map_err(|_| {
        Error::Numerical(if lambda == 0.0 {
            "gate regression normal matrix is singular at lambda = 0; use lambda > 0".into()
        } else {
            format!("gate regression normal matrix is not positive definite (lambda = {lambda:e})")
        })
    })
}

/// Ridge fit of `target ≈ sum_b g_b B_b` over the given basis outputs.
/// Only the |B|x|B| normal equations are formed.
pub fn gate_regress(outputs: &[(Basis, Matrix)], target: &Matrix, cfg: &FusionConfig) -> Result<GateRegressionResult> {
    if outputs.is_empty() {
        return Err(Error::invalid("gate regression needs at least one basis"));
    }
    if !(cfg.lambda >= 0.0) {
        return Err(Error::invalid("lambda must be >= 0"));
    }
    for (b, m) in outputs {
        same_shape(m, target, &format!("basis {b} output"))?;
    }
    let n = outputs.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let dots: Vec<f64> = pairs.par_iter().map(|&(i, j)| inner(&outputs[i].1, &outputs[j].1)).collect();
    let mut gram = Array2::zeros((n, n));
    for (&(i, j), &v) in pairs.iter().zip(&dots) {
        gram[[i, j]] = v;
        gram[[j, i]] = v;
    }
    let rhs: Vector = outputs.par_iter().map(|(_, m)| inner(m, target)).collect::<Vec<_>>().into();
    let uu = inner(target, target);

    let cells = target.len().max(1) as f64;
    let scale: Vec<f64> = (0..n)
        .map(|i| if cfg.whiten { (gram[[i, i]] / cells).sqrt() } else { 1.0 })
        .collect();
    let usable: Vec<usize> = (0..n).filter(|&i| scale[i] > 0.0 || !cfg.whiten).collect();
    for i in (0..n).filter(|i| !usable.contains(i)) {
        log::debug!("gate regression: basis {} has an all-zero output; its gate is 0", outputs[i].0);
    }

    let solve = |idx: &[usize]| -> Result<Vec<f64>> {
        let k = idx.len();
        let g = Array2::from_shape_fn((k, k), |(p, q)| gram[[idx[p], idx[q]]] / (scale[idx[p]] * scale[idx[q]]));
        let r = Array1::from_shape_fn(k, |p| rhs[idx[p]] / scale[idx[p]]);
        let sol = solve_normal(&g, &r, cfg.lambda)?;
        Ok((0..k).map(|p| sol[p] / scale[idx[p]]).collect())
    };

    let mut idx = usable.clone();
    let mut g = if idx.is_empty() { Vec::new() } else { solve(&idx)? };
    if let Some(k) = cfg.top_k {
        if k < idx.len() {
            let mut order: Vec<usize> = (0..idx.len()).collect();
            order.sort_by(|&p, &q| g[q].abs().total_cmp(&g[p].abs()).then(p.cmp(&q)));
            let mut keep: Vec<usize> = order[..k].iter().map(|&p| idx[p]).collect();
            keep.sort_unstable();
            idx = keep;
            g = solve(&idx)?;
        }
    }

    let mut gates = [0.0; 5];
    let mut full = vec![0.0; n];
    for (p, &i) in idx.iter().enumerate() {
        gates[outputs[i].0.index()] = g[p];
        full[i] = g[p];
    }
    // ||u - B g||^2 = u.u - 2 g.r + g' G g
    let gr: f64 = (0..n).map(|i| full[i] * rhs[i]).sum();
    let ggg: f64 = pairs.iter().map(|&(i, j)| if i == j { gram[[i, i]] * full[i] * full[i] } else { 2.0 * gram[[i, j]] * full[i] * full[j] }).sum();
    let residual = (uu - 2.0 * gr + ggg).max(0.0).sqrt();
    if !residual.is_finite() || gates.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("gate regression produced non-finite values".into()));
    }
    Ok(GateRegressionResult {
        gates,
        residual,
        selected: idx.iter().map(|&i| outputs[i].0).collect(),
    })
}

// ---------------------------------------------------------------------------
// mixing coefficients

/// Top-1 minus top-2 softmax probability per row.
pub fn softmax_margin(logits: &Matrix) -> Vec<f64> {
    logits
        .rows()
        .into_iter()
        .map(|r| {
            if r.len() < 2 {
                return 1.0;
            }
            let m = r.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = r.iter().map(|x| (x - m).exp()).sum();
            let (mut p1, mut p2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for &x in r {
                let p = (x - m).exp() / z;
                if p > p1 {
                    p2 = p1;
                    p1 = p;
                } else if p > p2 {
                    p2 = p;
                }
            }
            p1 - p2
        })
        .collect()
}

/// `(1/d) ||U_B(v) - U_A(v)||^2` per node.
pub fn node_discrepancy(ua: &Matrix, ub: &Matrix) -> Result<Vec<f64>> {
    same_shape(ua, ub, "discrepancy")?;
    let d = ua.ncols().max(1) as f64;
    Ok(ua
        .rows()
        .into_iter()
        .zip(ub.rows())
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum::<f64>() / d)
        .collect())
}

/// Normalized confidences `c_P / (c_A + c_B + eps)`.
pub fn normalized_confidence(c_a: &[f64], c_b: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    c_a.iter()
        .zip(c_b)
        .map(|(&a, &b)| {
            let z = a + b + eps;
            (a / z, b / z)
        })
        .unzip()
}

/// Confidence-risk scores and alpha for one layer: returns `(alpha, s_A, s_B)`.
pub fn conf_risk_scores(c_hat_a: &[f64], c_hat_b: &[f64], d: &[f64], eps: f64) -> (f64, f64, f64) {
    let s_a: f64 = c_hat_a.iter().zip(d).map(|(c, d)| c * d).sum();
    let s_b: f64 = c_hat_b.iter().zip(d).map(|(c, d)| c * d).sum();
    ((s_a / (s_a + s_b + eps)).clamp(0.0, 1.0), s_a, s_b)
}

pub fn conf_risk_alpha(ua: &Matrix, ub: &Matrix, logits_a: &Matrix, logits_b: &Matrix, eps: f64) -> Result<f64> {
    same_shape(logits_a, logits_b, "logits")?;
    if logits_a.nrows() != ua.nrows() {
        return Err(Error::dims("logits and traces cover different node counts"));
    }
    let d = node_discrepancy(ua, ub)?;
    let (ca, cb) = normalized_confidence(&softmax_margin(logits_a), &softmax_margin(logits_b), eps);
    Ok(conf_risk_scores(&ca, &cb, &d, eps).0)
}

/// `argmin_alpha ||alpha U_A + (1-alpha) U_B - U_tgt||`, clipped to [0, 1].
pub fn recon_alpha(ua: &Matrix, ub: &Matrix, target: &Matrix, eps: f64) -> Result<f64> {
    same_shape(ua, ub, "reconstruction")?;
    same_shape(ua, target, "reconstruction target")?;
    let (mut num, mut den) = (0.0, 0.0);
    Zip::from(ua).and(ub).and(target).for_each(|&a, &b, &t| {
        num += (a - b) * (t - b);
        den += (a - b) * (a - b);
    });
    Ok((num / (den + eps)).clamp(0.0, 1.0))
}

/// Which parent, if any, holds a padding layer at a slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadSide {
    None,
    A,
    B,
}

impl PadSide {
    pub fn of(a: &UmpmLayer, b: &UmpmLayer) -> Self {
        match (a.is_padding, b.is_padding) {
            (true, false) => PadSide::A,
            (false, true) => PadSide::B,
            _ => PadSide::None,
        }
    }
}

/// Target for reconstruction-based alpha. A per-node confidence-weighted
/// blend is not offered: it reduces to the confidence-risk ratio exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconTarget {
    /// Parent mean; alpha is 0.5 away from padding layers.
    #[default]
    Mean,
    /// Per node, the output of whichever parent is more confident there.
    Confident,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AlphaReport {
    pub alphas: Vec<f64>,
    /// Before padding down-weighting.
    pub raw_alphas: Vec<f64>,
    pub s_a: Vec<f64>,
    pub s_b: Vec<f64>,
    pub c_a: Vec<f64>,
    pub c_b: Vec<f64>,
    /// Per layer, per node.
    pub d: Vec<Vec<f64>>,
}

/// Chooses per-layer alphas from the traces of the two (padded, aligned)
/// models. Padding layers have their side's share scaled by `w_pad`; fixed
/// alphas are used as given.
pub fn select_alphas(
    trace_a: &ActivationTrace,
    trace_b: &ActivationTrace,
    logits_a: &Matrix,
    logits_b: &Matrix,
    padding: &[PadSide],
    cfg: &FusionConfig,
) -> Result<AlphaReport> {
    let depth = trace_a.depth();
    if trace_b.depth() != depth || padding.len() != depth {
        return Err(Error::dims("alpha selection needs equal depths"));
    }
    same_shape(logits_a, logits_b, "logits")?;
    let c_a = softmax_margin(logits_a);
    let c_b = softmax_margin(logits_b);
    let (hat_a, hat_b) = normalized_confidence(&c_a, &c_b, cfg.eps);
    let mut rep = AlphaReport {
        c_a,
        c_b,
        ..Default::default()
    };
    for l in 0..depth {
        let (ua, ub) = (&trace_a.pre[l + 1], &trace_b.pre[l + 1]);
        if ua.nrows() != logits_a.nrows() {
            return Err(Error::dims("logits and traces cover different node counts"));
        }
        let d = node_discrepancy(ua, ub)?;
        let (raw, alpha) = match cfg.alpha_mode {
            AlphaMode::Fixed => {
                let a = cfg.fixed_alpha.ok_or_else(|| Error::invalid("fixed alpha mode needs a value"))?;
                (a, a)
            }
            AlphaMode::ConfRisk => {
                let (raw, s_a, s_b) = conf_risk_scores(&hat_a, &hat_b, &d, cfg.eps);
                rep.s_a.push(s_a);
                rep.s_b.push(s_b);
                let (wa, wb) = match padding[l] {
                    PadSide::A => (cfg.w_pad, 1.0),
                    PadSide::B => (1.0, cfg.w_pad),
                    PadSide::None => (1.0, 1.0),
                };
                (raw, (wa * s_a / (wa * s_a + wb * s_b + cfg.eps)).clamp(0.0, 1.0))
            }
            AlphaMode::Recon => {
                let mut tgt = ub.clone();
                for (v, mut row) in tgt.rows_mut().into_iter().enumerate() {
                    let w = match cfg.recon_target {
                        ReconTarget::Mean => 0.5,
                        ReconTarget::Confident if hat_a[v] > hat_b[v] => 1.0,
                        ReconTarget::Confident if hat_a[v] < hat_b[v] => 0.0,
                        ReconTarget::Confident => 0.5,
                    };
                    row.zip_mut_with(&ua.row(v), |t, &a| *t = w * a + (1.0 - w) * *t);
                }
                let raw = recon_alpha(ua, ub, &tgt, cfg.eps)?;
                let adj = match padding[l] {
                    PadSide::A => raw * cfg.w_pad,
                    PadSide::B => 1.0 - cfg.w_pad * (1.0 - raw),
                    PadSide::None => raw,
                };
                (raw, adj)
            }
        };
        rep.raw_alphas.push(raw);
        rep.alphas.push(alpha);
        rep.d.push(d);
    }
    Ok(rep)
}

// ---------------------------------------------------------------------------
// parameter fusion

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Same message space on both sides; tensors mixed convexly.
    Convex,
    /// Messages of both parents side by side, recombined by a joint update MLP.
    Union,
}

fn mix_m(a: &Matrix, b: &Matrix, alpha: f64) -> Matrix {
    Zip::from(a).and(b).map_collect(|x, y| alpha * x + (1.0 - alpha) * y)
}

fn mix_v(a: &Vector, b: &Vector, alpha: f64) -> Vector {
    Zip::from(a).and(b).map_collect(|x, y| alpha * x + (1.0 - alpha) * y)
}

fn mlp_shapes(m: &Mlp) -> Vec<(usize, usize)> {
    m.layers.iter().map(|l| l.w.dim()).collect()
}

fn att_compatible(a: &Attention, b: &Attention, wa: &Matrix, wb: &Matrix) -> bool {
    a.heads == b.heads && a.concat == b.concat && a.a_src.dim() == b.a_src.dim() && wa.dim() == wb.dim()
}

fn pick_activation(a: &UmpmLayer, b: &UmpmLayer, alpha: f64) -> crate::ops::Activation {
    // a padded side only wins at its own endpoint, where the child is it
    match (a.is_padding, b.is_padding) {
        (true, false) if alpha == 1.0 => a.activation,
        (false, true) if alpha == 0.0 => b.activation,
        (true, false) => b.activation,
        (false, true) => a.activation,
        _ if alpha > 0.5 => a.activation,
        _ => b.activation,
    }
}

/// Fuses one slot. `alpha` is A's share.
pub fn fuse_layers(a: &UmpmLayer, b: &UmpmLayer, alpha: f64) -> Result<(UmpmLayer, FusionKind)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    if a.in_dim() != b.in_dim() || a.out_dim() != b.out_dim() {
        return Err(Error::dims(format!(
            "cannot fuse a {}->{} layer with a {}->{} layer",
            a.in_dim(),
            a.out_dim(),
            b.in_dim(),
            b.out_dim()
        )));
    }
    if a.split_update.is_some() || b.split_update.is_some() {
        return Err(Error::invalid("a union layer cannot be merged again"));
    }
    let convex = match (&a.post_mlp, &b.post_mlp) {
        (None, None) => a.msg_dim() == b.msg_dim(),
        (Some(ma), Some(mb)) => mlp_shapes(ma) == mlp_shapes(mb),
        _ => false,
    };
    if !convex {
        return Ok((union_layer(a, b, alpha)?, FusionKind::Union));
    }
    let beta = 1.0 - alpha;
    let mut out = UmpmLayer {
        blocks: Default::default(),
        gates: [0.0; 5],
        beta: mix_v(&a.beta, &b.beta, alpha),
        att: None,
        post_mlp: None,
        split_update: None,
        activation: pick_activation(a, b, alpha),
        is_padding: a.is_padding && b.is_padding,
        calibration: None,
    };
    for basis in Basis::LINEAR {
        let i = basis.index();
        let (w, g) = match (a.block(basis), b.block(basis)) {
            (Some(wa), Some(wb)) => (mix_m(wa, wb, alpha), alpha * a.gates[i] + beta * b.gates[i]),
            (Some(wa), None) => (wa * alpha, a.gates[i]),
            (None, Some(wb)) => (wb * beta, b.gates[i]),
            (None, None) => continue,
        };
        out.blocks[i] = Some(w);
        out.gates[i] = g;
    }
    let i = Basis::Att.index();
    let att_a = a.block(Basis::Att).zip(a.att.as_ref());
    let att_b = b.block(Basis::Att).zip(b.att.as_ref());
    let (w, att, g) = match (att_a, att_b) {
        (Some((wa, pa)), Some((wb, pb))) if att_compatible(pa, pb, wa, wb) => {
            let att = Attention {
                heads: pa.heads,
                a_src: mix_m(&pa.a_src, &pb.a_src, alpha),
                a_dst: mix_m(&pa.a_dst, &pb.a_dst, alpha),
                concat: pa.concat,
                slope: alpha * pa.slope + beta * pb.slope,
            };
            (Some(mix_m(wa, wb, alpha)), Some(att), alpha * a.gates[i] + beta * b.gates[i])
        }
        (Some(_), Some((wb, pb))) => {
            log::warn!("attention shapes differ after transport; keeping parent B's attention");
            (Some(wb.clone()), Some(pb.clone()), beta * b.gates[i])
        }
        (Some((wa, pa)), None) => (Some(wa.clone()), Some(pa.clone()), alpha * a.gates[i]),
        (None, Some((wb, pb))) => (Some(wb.clone()), Some(pb.clone()), beta * b.gates[i]),
        (None, None) => (None, None, 0.0),
    };
    out.blocks[i] = w;
    out.att = att;
    out.gates[i] = g;
    if let (Some(ma), Some(mb)) = (&a.post_mlp, &b.post_mlp) {
        out.post_mlp = Some(Mlp {
            layers: ma
                .layers
                .iter()
                .zip(&mb.layers)
                .map(|(la, lb)| Linear { w: mix_m(&la.w, &lb.w, alpha), b: mix_v(&la.b, &lb.b, alpha) })
                .collect(),
        });
    }
    out.validate(0)?;
    Ok((out, FusionKind::Convex))
}

/// Both parents' messages side by side; gates are folded into the blocks.
/// The side carrying attention goes first so its output occupies the
/// leading columns.
fn union_layer(a: &UmpmLayer, b: &UmpmLayer, alpha: f64) -> Result<UmpmLayer> {
    let has_att = |l: &UmpmLayer| l.block(Basis::Att).is_some();
    if has_att(a) && has_att(b) {
        return Err(Error::invalid("cannot place two attention blocks in one union layer"));
    }
    let a_first = !has_att(b);
    let ((l1, c1), (l2, c2)) = if a_first { ((a, alpha), (b, 1.0 - alpha)) } else { ((b, 1.0 - alpha), (a, alpha)) };
    let (d1, d2) = (l1.msg_dim(), l2.msg_dim());
    let d_in = a.in_dim();
    let mut out = UmpmLayer {
        blocks: Default::default(),
        gates: [0.0; 5],
        beta: concatenate![Axis(0), l1.beta, l2.beta],
        att: None,
        post_mlp: None,
        split_update: Some(SplitUpdate { split: d1, first: l1.post_mlp.clone(), second: l2.post_mlp.clone(), scales: [c1, c2] }),
        activation: pick_activation(a, b, alpha),
        is_padding: false,
        calibration: None,
    };
    for basis in Basis::LINEAR {
        let (w1, w2) = (l1.block(basis), l2.block(basis));
        if w1.is_none() && w2.is_none() {
            continue;
        }
        let mut w = Array2::zeros((d_in, d1 + d2));
        if let Some(w1) = w1 {
            w.slice_mut(s![.., ..d1]).assign(&(w1 * l1.gate(basis)));
        }
        if let Some(w2) = w2 {
            w.slice_mut(s![.., d1..]).assign(&(w2 * l2.gate(basis)));
        }
        out.blocks[basis.index()] = Some(w);
        out.gates[basis.index()] = 1.0;
    }
    if let (Some(w), Some(att)) = (l1.block(Basis::Att), &l1.att) {
        out.blocks[Basis::Att.index()] = Some(w.clone());
        out.att = Some(att.clone());
        out.gates[Basis::Att.index()] = l1.gate(Basis::Att);
    }
    out.validate(0)?;
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerFusion {
    pub kind: FusionKind,
    pub alpha: f64,
    pub padding: PadSide,
    /// Convexly mixed gates, before any regression.
    pub mixed_gates: [f64; 5],
    pub gates: [f64; 5],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regression: Option<GateRegressionResult>,
}

#[derive(Debug, Clone)]
pub struct FusedModel {
    pub model: UmpmModel,
    pub layers: Vec<LayerFusion>,
}

/// Fuses two models slot by slot, then (when `regress`) refits the gates of
/// every convex, MLP-free layer on the shared design.
pub fn fuse_models(
    a: &UmpmModel,
    b: &UmpmModel,
    alphas: &[f64],
    traces: Option<(&ActivationTrace, &ActivationTrace, GraphView<'_>)>,
    cfg: &FusionConfig,
) -> Result<FusedModel> {
    if a.layers.len() != b.layers.len() || alphas.len() != a.layers.len() {
        return Err(Error::dims(format!(
            "fusion needs equal depths ({} vs {}, {} alphas)",
            a.layers.len(),
            b.layers.len(),
            alphas.len()
        )));
    }
    let mut layers = Vec::new();
    let mut report = Vec::new();
    for (l, ((la, lb), &alpha)) in a.layers.iter().zip(&b.layers).zip(alphas).enumerate() {
        let (mut fused, kind) = fuse_layers(la, lb, alpha).map_err(|e| match e {
            Error::DimensionMismatch(m) => Error::dims(format!("layer {l}: {m}")),
            e => e,
        })?;
        let mixed_gates = fused.gates;
        let mut regression = None;
        if let (Some((ta, tb, g)), FusionKind::Convex, None) = (traces, kind, &fused.post_mlp) {
            let h = shared_design(&ta.inputs[l], &tb.inputs[l])?;
            let target = match cfg.gate_target {
                GateTarget::Mean => shared_design(&ta.pre[l + 1], &tb.pre[l + 1])?,
                GateTarget::ParentA => ta.pre[l + 1].clone(),
                GateTarget::ParentB => tb.pre[l + 1].clone(),
            } - &fused.beta;
            let outputs = fused
                .present()
                .map(|basis| Ok((basis, apply_basis(basis, &h, &fused, g)?)))
                .collect::<Result<Vec<_>>>()?;
            let res = gate_regress(&outputs, &target, cfg)?;
            fused.gates = res.gates;
            regression = Some(res);
        }
        report.push(LayerFusion {
            kind,
            alpha,
            padding: PadSide::of(la, lb),
            mixed_gates,
            gates: fused.gates,
            regression,
        });
        layers.push(fused);
    }
    let model = UmpmModel {
        layers,
        provenance: format!("{}+{}", a.provenance, b.provenance),
    };
    model.validate()?;
    Ok(FusedModel { model, layers: report })
}
