//! Universal message-passing mixtures.
//!
//! A layer is a gated sum of five fixed operators plus a bias,
//!
//! ```text
//! U = sum_b g_b P_b(H) + beta        b in {self, gcn, sum, mean, att}
//! ```
//!
//! optionally followed by an update MLP (needed to express GIN exactly).
//! `self` is nodewise; the other four aggregate over incoming edges. Every
//! supported parent architecture embeds into this form without loss.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::checkpoint::TensorStore;
use crate::error::{Error, Result};
use crate::graph::{Csr, GraphView};
use crate::lfnorm::{FoldedAffine, Granularity};
use crate::linalg::{max_abs_diff, Matrix, Vector};
use crate::model::{ActivationTrace, GraphModel, LayerSpec, Linear, Mlp, ParentModel};
use crate::ops::{self, axpy, Activation, Attention, Rows};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Basis {
    #[serde(rename = "self")]
    SelfLoop,
    Gcn,
    Sum,
    Mean,
    Att,
}

impl Basis {
    pub const ALL: [Basis; 5] = [Basis::SelfLoop, Basis::Gcn, Basis::Sum, Basis::Mean, Basis::Att];
    /// Bases whose output is `H W` followed by a fixed linear aggregation.
    pub const LINEAR: [Basis; 4] = [Basis::SelfLoop, Basis::Gcn, Basis::Sum, Basis::Mean];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_edge(self) -> bool {
        self != Basis::SelfLoop
    }

    pub fn name(self) -> &'static str {
        match self {
            Basis::SelfLoop => "self",
            Basis::Gcn => "gcn",
            Basis::Sum => "sum",
            Basis::Mean => "mean",
            Basis::Att => "att",
        }
    }
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UmpmLayer {
    /// `W_b` per basis (`in x msg_dim`; the attention block is `in x heads*head_dim`).
    pub blocks: [Option<Matrix>; 5],
    pub gates: [f64; 5],
    /// Added before the update MLP; length `msg_dim`.
    pub beta: Vector,
    pub att: Option<Attention>,
    pub post_mlp: Option<Mlp>,
    /// Two-branch update of a union layer; exclusive with `post_mlp`.
    pub split_update: Option<SplitUpdate>,
    pub activation: Activation,
    pub is_padding: bool,
    /// Folded edge-aggregate calibration, when installed.
    pub calibration: Option<FoldedAffine>,
}

/// `y = c1 f1(m[.., ..split]) + c2 f2(m[.., split..])`, with an absent
/// branch MLP acting as the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitUpdate {
    pub split: usize,
    pub first: Option<Mlp>,
    pub second: Option<Mlp>,
    pub scales: [f64; 2],
}

impl SplitUpdate {
    fn branch_out(mlp: &Option<Mlp>, width: usize) -> usize {
        mlp.as_ref().map_or(width, Mlp::out_dim)
    }

    pub fn out_dim(&self, msg_dim: usize) -> usize {
        Self::branch_out(&self.first, self.split).max(Self::branch_out(&self.second, msg_dim - self.split.min(msg_dim)))
    }

    fn check(&self, msg_dim: usize) -> Result<()> {
        if self.split > msg_dim {
            return Err(Error::dims("split update boundary past the message width"));
        }
        let widths = [self.split, msg_dim - self.split];
        for (mlp, w) in [&self.first, &self.second].into_iter().zip(widths) {
            if let Some(m) = mlp {
                m.check()?;
                if m.in_dim() != w {
                    return Err(Error::dims("split update branch input width"));
                }
            }
        }
        if Self::branch_out(&self.first, widths[0]) != Self::branch_out(&self.second, widths[1]) {
            return Err(Error::dims("split update branches disagree on output width"));
        }
        if !self.scales.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid("split update scale is not finite"));
        }
        Ok(())
    }

    /// Hidden pre-activations of the first branch precede the second's.
    pub fn apply(&self, z: &Matrix, mut hidden: Option<&mut Vec<Matrix>>) -> Matrix {
        let parts = [z.slice(ndarray::s![.., ..self.split]), z.slice(ndarray::s![.., self.split..])];
        let mut y: Option<Matrix> = None;
        for ((mlp, x), c) in [&self.first, &self.second].into_iter().zip(parts).zip(self.scales) {
            let branch = mlp.as_ref().map(|m| m.apply_view(x, hidden.as_deref_mut()));
            let x = branch.as_ref().map_or(x, |b| b.view());
            match y.as_mut() {
                Some(y) => y.scaled_add(c, &x),
                None => y = Some(match branch {
                    Some(b) => b * c,
                    None => x.mapv(|v| v * c),
                }),
            }
        }
        y.expect("two branches")
    }
}

impl UmpmLayer {
    pub fn empty(in_dim: usize, msg_dim: usize, activation: Activation) -> Self {
        UmpmLayer {
            blocks: Default::default(),
            gates: [0.0; 5],
            beta: Vector::zeros(msg_dim),
            att: None,
            post_mlp: None,
            split_update: None,
            activation,
            is_padding: false,
            calibration: None,
        }
        .with_in_dim_hint(in_dim)
    }

    // `in_dim` of a block-less layer is not recoverable; keep a zero self block.
    fn with_in_dim_hint(mut self, in_dim: usize) -> Self {
        self.blocks[Basis::SelfLoop.index()] = Some(Array2::zeros((in_dim, self.beta.len())));
        self
    }

    /// Identity on its input: `W_self = I`, linear activation.
    pub fn identity(dim: usize) -> Self {
        let mut l = UmpmLayer::empty(dim, dim, Activation::Linear);
        l.blocks[Basis::SelfLoop.index()] = Some(Array2::eye(dim));
        l.gates[Basis::SelfLoop.index()] = 1.0;
        l.is_padding = true;
        l
    }

    pub fn block(&self, b: Basis) -> Option<&Matrix> {
        self.blocks[b.index()].as_ref()
    }

    pub fn gate(&self, b: Basis) -> f64 {
        self.gates[b.index()]
    }

    pub fn present(&self) -> impl Iterator<Item = Basis> + '_ {
        Basis::ALL.into_iter().filter(|b| self.blocks[b.index()].is_some())
    }

    pub fn in_dim(&self) -> usize {
        self.present()
            .next()
            .and_then(|b| self.block(b))
            .map(|w| w.nrows())
            .expect("layer has at least one block")
    }

    /// Width of the gated sum (the space edge messages live in).
    pub fn msg_dim(&self) -> usize {
        self.beta.len()
    }

    pub fn out_dim(&self) -> usize {
        match (&self.post_mlp, &self.split_update) {
            (Some(m), _) => m.out_dim(),
            (None, Some(u)) => u.out_dim(self.msg_dim()),
            (None, None) => self.msg_dim(),
        }
    }

    /// Whether anything runs between the gated sum and the activation.
    pub fn has_update(&self) -> bool {
        self.post_mlp.is_some() || self.split_update.is_some()
    }

    /// The update network applied to a mixture `z`.
    pub fn update(&self, z: Matrix, hidden: Option<&mut Vec<Matrix>>) -> Matrix {
        match (&self.post_mlp, &self.split_update) {
            (Some(m), _) => m.apply(&z, hidden),
            (None, Some(u)) => u.apply(&z, hidden),
            (None, None) => z,
        }
    }

    pub fn has_edge_bases(&self) -> bool {
        self.present().any(Basis::is_edge)
    }

    pub fn validate(&self, idx: usize) -> Result<()> {
        let bad = |what: String| Err(Error::dims(format!("umpm layer {idx}: {what}")));
        let mut in_dim = None;
        for b in self.present() {
            let w = self.block(b).unwrap();
            if *in_dim.get_or_insert(w.nrows()) != w.nrows() {
                return bad(format!("block {b} input width {}", w.nrows()));
            }
            let want = match (b, &self.att) {
                (Basis::Att, Some(att)) => att.heads * att.head_dim(),
                (Basis::Att, None) => return bad("att block without attention parameters".into()),
                _ => self.msg_dim(),
            };
            if w.ncols() != want {
                return bad(format!("block {b} has width {}, expected {want}", w.ncols()));
            }
        }
        if in_dim.is_none() {
            return bad("no basis blocks".into());
        }
        if let (Some(att), true) = (&self.att, self.block(Basis::Att).is_some()) {
            // attention may fill only the leading message columns
            if att.out_dim() > self.msg_dim() {
                return bad("attention output is wider than the bias".into());
            }
        }
        for (b, g) in Basis::ALL.iter().zip(self.gates) {
            if !g.is_finite() {
                return bad(format!("gate {b} is not finite"));
            }
            if self.block(*b).is_none() && g != 0.0 {
                return bad(format!("gate {b} is nonzero but the block is absent"));
            }
        }
        if let Some(mlp) = &self.post_mlp {
            mlp.check()?;
            if mlp.in_dim() != self.msg_dim() {
                return bad("update MLP input width".into());
            }
        }
        if let Some(u) = &self.split_update {
            if self.post_mlp.is_some() {
                return bad("both an update MLP and a split update".into());
            }
            u.check(self.msg_dim())?;
        }
        if let Some(cal) = &self.calibration {
            if cal.a.ncols() != self.msg_dim() || cal.b.dim() != cal.a.dim() {
                return bad("calibration width".into());
            }
        }
        Ok(())
    }

    /// Pre-activation (after the update MLP) on input `h`.
    pub fn apply(&self, g: GraphView<'_>, h: &Matrix, hidden: Option<&mut Vec<Matrix>>) -> Matrix {
        let prep = Prepared::new(self, g.csr, h);
        self.update(prep.mixture(), hidden)
    }
}

/// Per-layer state for evaluating messages: projected features for every
/// present linear block in one matrix, plus attention coefficients. Blocks
/// are cut into column segments (two for a union layer), each trimmed to its
/// nonzero range; a segment that is a scaled identity reads the input rows
/// directly instead of going through the projection.
pub(crate) struct Prepared<'a> {
    layer: &'a UmpmLayer,
    csr: &'a Csr,
    h: Option<Rows<'a>>,
    z: Matrix,
    segs: [[Option<Seg>; 2]; 4],
    /// Edge-basis segments in evaluation order.
    edge_terms: Vec<(Basis, Seg)>,
    z_att: Option<Matrix>,
    coef: Vec<f64>,
}

#[derive(Clone)]
struct Seg {
    cols: std::ops::Range<usize>,
    src: Src,
}

#[derive(Clone, Copy)]
enum Src {
    /// Offset into the stacked projection.
    Z(usize),
    /// `s * h_u` itself.
    H(f64),
}

/// Nonzero column range of `w` restricted to `within`.
fn column_support(w: &Matrix, within: std::ops::Range<usize>) -> std::ops::Range<usize> {
    let nz = |j: &usize| w.column(*j).iter().any(|&x| x != 0.0);
    match within.clone().find(nz) {
        None => 0..0,
        Some(lo) => lo..(lo..within.end).rev().find(nz).unwrap() + 1,
    }
}

/// `Some(s)` when the square block `w` equals `s I`.
pub(crate) fn scaled_identity(w: ndarray::ArrayView2<'_, f64>) -> Option<f64> {
    if w.nrows() != w.ncols() || w.nrows() == 0 {
        return None;
    }
    let s = w[[0, 0]];
    w.indexed_iter().all(|((i, j), &x)| x == if i == j { s } else { 0.0 }).then_some(s)
}

impl<'a> Prepared<'a> {
    pub(crate) fn new(layer: &'a UmpmLayer, csr: &'a Csr, h: &'a Matrix) -> Self {
        let d = layer.msg_dim();
        let cuts = match &layer.split_update {
            Some(u) => [0..u.split, u.split..d],
            None => [0..d, d..d],
        };
        let direct = h.is_standard_layout();
        let mut segs: [[Option<Seg>; 2]; 4] = Default::default();
        let mut parts = Vec::new();
        let mut width = 0;
        for b in Basis::LINEAR {
            let Some(w) = layer.block(b) else { continue };
            if layer.gate(b) == 0.0 {
                continue;
            }
            for (k, cut) in cuts.iter().enumerate() {
                let cols = column_support(w, cut.clone());
                if cols.is_empty() {
                    continue;
                }
                let part = w.slice(ndarray::s![.., cols.clone()]);
                let src = match scaled_identity(part) {
                    Some(s) if direct => Src::H(s),
                    _ => {
                        parts.push(part);
                        width += cols.len();
                        Src::Z(width - cols.len())
                    }
                };
                segs[b.index()][k] = Some(Seg { cols, src });
            }
        }
        let mut stacked = Array2::zeros((h.ncols(), width));
        let mut at = 0;
        for p in parts {
            stacked.slice_mut(ndarray::s![.., at..at + p.ncols()]).assign(&p);
            at += p.ncols();
        }
        let z = if width > 0 { ops::standard(h.dot(&stacked)) } else { Array2::zeros((h.nrows(), 0)) };
        let (z_att, coef) = match (layer.block(Basis::Att), &layer.att) {
            (Some(w), Some(att)) if layer.gate(Basis::Att) != 0.0 => {
                let za = ops::standard(h.dot(w));
                let coef = ops::attention_coefficients(csr, &za, att);
                (Some(za), coef)
            }
            _ => (None, Vec::new()),
        };
        let edge_terms = [Basis::Gcn, Basis::Sum, Basis::Mean]
            .into_iter()
            .flat_map(|b| segs[b.index()].iter().flatten().map(move |seg| (b, seg.clone())))
            .collect();
        Prepared {
            layer,
            csr,
            h: direct.then(|| Rows::new(h)),
            z,
            segs,
            edge_terms,
            z_att,
            coef,
        }
    }

    /// Adds `c * P_b`-row of node `u` (before aggregation) into `out`.
    #[inline]
    fn add_basis(&self, rows: &Rows<'_>, b: Basis, u: usize, c: f64, out: &mut [f64]) {
        for seg in self.segs[b.index()].iter().flatten() {
            let dst = &mut out[seg.cols.clone()];
            match seg.src {
                Src::Z(o) => axpy(dst, c, &rows.get(u)[o..o + seg.cols.len()]),
                Src::H(s) => axpy(dst, c * s, self.h.as_ref().expect("direct rows").get(u)),
            }
        }
    }

    #[inline]
    fn has(&self, b: Basis) -> bool {
        self.segs[b.index()][0].is_some() || self.segs[b.index()][1].is_some()
    }

    /// Nodewise part: the self basis and the self-loop share of gcn.
    fn node_part(&self, rows: &Rows<'_>, v: usize, out: &mut [f64]) {
        let l = self.layer;
        self.add_basis(rows, Basis::SelfLoop, v, l.gate(Basis::SelfLoop), out);
        if self.has(Basis::Gcn) {
            let s = self.csr.gcn_scale(v);
            self.add_basis(rows, Basis::Gcn, v, l.gate(Basis::Gcn) * s * s, out);
        }
    }

    /// Adds `w * m_e` for the edge `u -> v` at CSR position `e` to `out`,
    /// where `m_e = sum_{b edge} g_b m_{e,b}`.
    #[inline]
    fn add_message(&self, rows: &Rows<'_>, att_rows: Option<&Rows<'_>>, v: usize, u: usize, e: usize, w: f64, out: &mut [f64]) {
        let l = self.layer;
        if self.has(Basis::Gcn) {
            let c = l.gate(Basis::Gcn) * self.csr.gcn_scale(u) * self.csr.gcn_scale(v);
            self.add_basis(rows, Basis::Gcn, u, w * c, out);
        }
        self.add_basis(rows, Basis::Sum, u, w * l.gate(Basis::Sum), out);
        if self.has(Basis::Mean) {
            let c = l.gate(Basis::Mean) / self.csr.in_degree(v) as f64;
            self.add_basis(rows, Basis::Mean, u, w * c, out);
        }
        if let (Some(ar), Some(att)) = (att_rows, &l.att) {
            ops::add_attention_message(out, w * l.gate(Basis::Att), ar.get(u), &self.coef, e, att);
        }
    }

    /// `S_v = sum_{e in E_v} m_e`, accumulated into `out`. Runs one tight
    /// loop over the sources per segment rather than dispatching per edge.
    fn edge_sum(&self, rows: &Rows<'_>, att_rows: Option<&Rows<'_>>, v: usize, out: &mut [f64]) {
        let l = self.layer;
        let src = self.csr.sources(v);
        if src.is_empty() {
            return;
        }
        for (b, seg) in &self.edge_terms {
            let dst = &mut out[seg.cols.clone()];
            let (from, off, s) = match seg.src {
                Src::Z(o) => (rows, o, 1.0),
                Src::H(s) => (self.h.as_ref().expect("direct rows"), 0, s),
            };
            let n = dst.len();
            let c = s * l.gate(*b);
            match b {
                Basis::Gcn => {
                    let c = c * self.csr.gcn_scale(v);
                    for &u in src {
                        let u = u as usize;
                        axpy(dst, c * self.csr.gcn_scale(u), &from.get(u)[off..off + n]);
                    }
                }
                _ => {
                    let c = if *b == Basis::Mean { c / src.len() as f64 } else { c };
                    for &u in src {
                        axpy(dst, c, &from.get(u as usize)[off..off + n]);
                    }
                }
            }
        }
        if let (Some(ar), Some(att)) = (att_rows, &l.att) {
            let base = self.csr.edge_start(v);
            let g = l.gate(Basis::Att);
            for (i, &u) in src.iter().enumerate() {
                ops::add_attention_message(out, g, ar.get(u as usize), &self.coef, base + i, att);
            }
        }
    }

    /// Calls `f(edge_index, m_e)` for every incoming edge of `v`, reusing one buffer.
    pub(crate) fn for_each_message(&self, v: usize, buf: &mut [f64], mut f: impl FnMut(usize, &[f64])) {
        let rows = Rows::new(&self.z);
        let att_rows = self.z_att.as_ref().map(Rows::new);
        let base = self.csr.edge_start(v);
        for (i, &u) in self.csr.sources(v).iter().enumerate() {
            buf.iter_mut().for_each(|x| *x = 0.0);
            self.add_message(&rows, att_rows.as_ref(), v, u as usize, base + i, 1.0, buf);
            f(base + i, buf);
        }
    }

    /// Nodewise part plus bias, without any edge contribution.
    pub(crate) fn node_and_bias(&self, v: usize, out: &mut [f64]) {
        let rows = Rows::new(&self.z);
        self.node_part(&rows, v, out);
        axpy(out, 1.0, self.layer.beta.as_slice().expect("contiguous bias"));
    }

    /// The gated sum plus bias, with folded calibration applied to the edge
    /// aggregate when the layer carries one.
    pub(crate) fn mixture(&self) -> Matrix {
        let d = self.layer.msg_dim();
        let rows = Rows::new(&self.z);
        let att_rows = self.z_att.as_ref().map(Rows::new);
        let beta = self.layer.beta.as_slice().expect("contiguous bias");
        let cal = self.layer.calibration.as_ref();
        ops::per_node(self.csr.num_nodes(), d, |v, out| {
            match cal {
                None => self.edge_sum(&rows, att_rows.as_ref(), v, out),
                Some(cal) => {
                    let mut s = vec![0.0; d];
                    self.edge_sum(&rows, att_rows.as_ref(), v, &mut s);
                    cal.apply_to_aggregate(self.csr, v, &s, out);
                }
            }
            self.node_part(&rows, v, out);
            axpy(out, 1.0, beta);
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UmpmModel {
    pub layers: Vec<UmpmLayer>,
    /// Architecture tag(s) this model was built from, e.g. `gcn` or `gcn+gat`.
    pub provenance: String,
}

impl UmpmModel {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("umpm model has no layers"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.validate(i)?;
            if i > 0 && self.layers[i - 1].out_dim() != l.in_dim() {
                return Err(Error::dims(format!(
                    "umpm layer {i} expects {} inputs but layer {} emits {}",
                    l.in_dim(),
                    i - 1,
                    self.layers[i - 1].out_dim()
                )));
            }
        }
        Ok(())
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].in_dim()];
        w.extend(self.layers.iter().map(UmpmLayer::out_dim));
        w
    }

    fn run(&self, g: GraphView<'_>, record: bool) -> Result<(Matrix, Option<ActivationTrace>)> {
        if g.feature_dim() != self.input_dim() {
            return Err(Error::dims(format!(
                "model expects {} input features, graph has {}",
                self.input_dim(),
                g.feature_dim()
            )));
        }
        let mut trace = record.then(|| ActivationTrace::start(g.features));
        let mut h = g.features.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut hidden = Vec::new();
            let u = layer.apply(g, &h, record.then_some(&mut hidden));
            if l == last {
                if let Some(t) = trace.as_mut() {
                    t.pre.push(u.clone());
                    t.mlp_hidden.push(hidden);
                }
                return Ok((u, trace));
            }
            h = layer.activation.apply(&u);
            if let Some(t) = trace.as_mut() {
                t.pre.push(u);
                t.inputs.push(h.clone());
                t.mlp_hidden.push(hidden);
            }
        }
        unreachable!("loop returns at the last layer")
    }
}

impl GraphModel for UmpmModel {
    fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim()
    }

    fn depth(&self) -> usize {
        self.layers.len()
    }

    fn forward(&self, g: GraphView<'_>) -> Result<ActivationTrace> {
        Ok(self.run(g, true)?.1.expect("recorded"))
    }

    fn predict(&self, g: GraphView<'_>) -> Result<Matrix> {
        Ok(self.run(g, false)?.0)
    }
}

/// `P_b(H)` for one basis, ungated and without bias.
pub fn apply_basis(b: Basis, h: &Matrix, layer: &UmpmLayer, g: GraphView<'_>) -> Result<Matrix> {
    let w = layer.block(b).ok_or(Error::MissingBasis(b.name()))?;
    if h.ncols() != w.nrows() {
        return Err(Error::dims(format!(
            "basis {b} expects {} input columns, got {}",
            w.nrows(),
            h.ncols()
        )));
    }
    let z = ops::standard(h.dot(w));
    Ok(match b {
        Basis::SelfLoop => z,
        Basis::Gcn => ops::propagate_gcn(g.csr, &z),
        Basis::Sum => ops::aggregate_sum(g.csr, &z),
        Basis::Mean => ops::aggregate_mean(g.csr, &z),
        Basis::Att => {
            let att = layer.att.as_ref().ok_or(Error::MissingBasis("att"))?;
            let coef = ops::attention_coefficients(g.csr, &z, att);
            let agg = ops::aggregate_attention(g.csr, &z, &coef, att);
            if agg.ncols() == layer.msg_dim() {
                agg
            } else {
                let mut full = Array2::zeros((agg.nrows(), layer.msg_dim()));
                full.slice_mut(ndarray::s![.., ..agg.ncols()]).assign(&agg);
                full
            }
        }
    })
}

/// Rewrites a parent as an operator mixture with identical outputs.
///
/// GCN uses the gcn basis; GraphSAGE uses self (root weight) and mean
/// (neighbor weight); GAT uses att; GIN uses `self = (1+eps) I`, `sum = I`
/// and keeps its MLP as the update network.
pub fn canonicalize(model: &ParentModel) -> Result<UmpmModel> {
    model.validate()?;
    let last = model.layers.len() - 1;
    let layers = model
        .layers
        .iter()
        .enumerate()
        .map(|(l, spec)| {
            let act = if l == last { Activation::Linear } else { model.activation };
            let mut layer = UmpmLayer {
                blocks: Default::default(),
                gates: [0.0; 5],
                beta: Vector::zeros(0),
                att: None,
                post_mlp: None,
                split_update: None,
                activation: act,
                is_padding: false,
                calibration: None,
            };
            let mut set = |b: Basis, w: Matrix| {
                layer.blocks[b.index()] = Some(w);
                layer.gates[b.index()] = 1.0;
            };
            match spec {
                LayerSpec::Gcn { w, b } => {
                    set(Basis::Gcn, w.clone());
                    layer.beta = b.clone();
                }
                LayerSpec::Sage { w_root, w_neigh, b } => {
                    set(Basis::SelfLoop, w_root.clone());
                    set(Basis::Mean, w_neigh.clone());
                    layer.beta = b.clone();
                }
                LayerSpec::Gat { w, att, b } => {
                    set(Basis::Att, w.clone());
                    layer.att = Some(att.clone());
                    layer.beta = b.clone();
                }
                LayerSpec::Gin { eps, mlp } => {
                    let d = mlp.in_dim();
                    set(Basis::SelfLoop, Array2::eye(d) * (1.0 + eps));
                    set(Basis::Sum, Array2::eye(d));
                    layer.beta = Vector::zeros(d);
                    layer.post_mlp = Some(mlp.clone());
                }
            }
            layer
        })
        .collect();
    let out = UmpmModel {
        layers,
        provenance: model.arch.to_string(),
    };
    out.validate()?;
    Ok(out)
}

/// Max over layers and nodes of `|U_parent - U_umpm|_inf`.
pub fn verify_equivalence(parent: &dyn GraphModel, umpm: &UmpmModel, g: GraphView<'_>) -> Result<f64> {
    let a = parent.forward(g)?;
    let b = umpm.forward(g)?;
    trace_deviation(&a, &b)
}

pub fn trace_deviation(a: &ActivationTrace, b: &ActivationTrace) -> Result<f64> {
    if a.pre.len() != b.pre.len() {
        return Err(Error::dims(format!(
            "traces have {} and {} layers",
            a.pre.len(),
            b.pre.len()
        )));
    }
    let mut worst = 0.0f64;
    for (l, (x, y)) in a.pre.iter().zip(&b.pre).enumerate() {
        if x.dim() != y.dim() {
            return Err(Error::dims(format!("layer {l}: {:?} vs {:?}", x.dim(), y.dim())));
        }
        worst = worst.max(max_abs_diff(x.view(), y.view()));
    }
    Ok(worst)
}

/// Canonicalizes and checks the result against the parent within `eps`.
pub fn canonicalize_verified(parent: &ParentModel, g: GraphView<'_>, eps: f64) -> Result<(UmpmModel, f64)> {
    let umpm = canonicalize(parent)?;
    let dev = verify_equivalence(parent, &umpm, g)?;
    if !(dev <= eps) {
        return Err(Error::Numerical(format!(
            "canonicalized {} deviates by {dev:.3e} > {eps:.1e}",
            parent.arch
        )));
    }
    Ok((umpm, dev))
}

// ---------------------------------------------------------------------------
// checkpoint container (arch tag `umpm`)

#[derive(Debug, Serialize, Deserialize)]
struct UmpmMeta {
    arch: String,
    provenance: String,
    in_dim: usize,
    num_classes: usize,
    layers: Vec<UmpmLayerMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AttMeta {
    heads: usize,
    concat: bool,
    leaky_slope: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct UmpmLayerMeta {
    in_dim: usize,
    msg_dim: usize,
    out_dim: usize,
    gates: BTreeMap<Basis, f64>,
    blocks: Vec<Basis>,
    activation: Activation,
    is_padding: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    att: Option<AttMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mlp_dims: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split_update: Option<SplitMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lfnorm: Option<Granularity>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitMeta {
    split: usize,
    scales: [f64; 2],
    first_dims: Option<Vec<usize>>,
    second_dims: Option<Vec<usize>>,
}

fn put_mlp(store: &mut TensorStore, prefix: &str, mlp: &Mlp) -> Vec<usize> {
    let mut dims = vec![mlp.in_dim()];
    for (k, lin) in mlp.layers.iter().enumerate() {
        store.put_matrix(format!("{prefix}mlp{k}.W"), &lin.w);
        store.put_vector(format!("{prefix}mlp{k}.b"), &lin.b);
        dims.push(lin.w.ncols());
    }
    dims
}

fn take_mlp(store: &TensorStore, prefix: &str, dims: &[usize]) -> Result<Mlp> {
    let layers = (0..dims.len().saturating_sub(1))
        .map(|k| {
            Ok(Linear {
                w: store.matrix(&format!("{prefix}mlp{k}.W"))?,
                b: store.vector(&format!("{prefix}mlp{k}.b"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Mlp { layers })
}

pub fn save_umpm(model: &UmpmModel, dir: impl AsRef<Path>) -> Result<()> {
    let mut store = TensorStore::default();
    let mut metas = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        let p = |name: &str| format!("layer{l}.{name}");
        for b in layer.present() {
            store.put_matrix(p(&format!("{b}.W")), layer.block(b).unwrap());
        }
        store.put_vector(p("beta"), &layer.beta);
        if let Some(att) = &layer.att {
            store.put_matrix(p("att.a_src"), &att.a_src);
            store.put_matrix(p("att.a_dst"), &att.a_dst);
        }
        let mlp_dims = layer.post_mlp.as_ref().map(|mlp| put_mlp(&mut store, &p(""), mlp));
        let split_update = layer.split_update.as_ref().map(|u| SplitMeta {
            split: u.split,
            scales: u.scales,
            first_dims: u.first.as_ref().map(|m| put_mlp(&mut store, &p("split0."), m)),
            second_dims: u.second.as_ref().map(|m| put_mlp(&mut store, &p("split1."), m)),
        });
        if let Some(cal) = &layer.calibration {
            store.put_matrix(p("lfnorm.a"), &cal.a);
            store.put_matrix(p("lfnorm.b"), &cal.b);
        }
        metas.push(UmpmLayerMeta {
            in_dim: layer.in_dim(),
            msg_dim: layer.msg_dim(),
            out_dim: layer.out_dim(),
            gates: Basis::ALL
                .into_iter()
                .filter(|b| layer.block(*b).is_some())
                .map(|b| (b, layer.gate(b)))
                .collect(),
            blocks: layer.present().collect(),
            activation: layer.activation,
            is_padding: layer.is_padding,
            att: layer.att.as_ref().map(|a| AttMeta {
                heads: a.heads,
                concat: a.concat,
                leaky_slope: a.slope,
            }),
            mlp_dims,
            split_update,
            lfnorm: layer.calibration.as_ref().map(|c| c.granularity.clone()),
        });
    }
    let meta = UmpmMeta {
        arch: "umpm".into(),
        provenance: model.provenance.clone(),
        in_dim: model.input_dim(),
        num_classes: model.output_dim(),
        layers: metas,
    };
    store.save(dir.as_ref(), &meta)
}

pub fn load_umpm(dir: impl AsRef<Path>) -> Result<UmpmModel> {
    let (meta, store): (UmpmMeta, TensorStore) = TensorStore::load(dir.as_ref())?;
    if meta.arch != "umpm" {
        return Err(Error::UnsupportedArch(meta.arch));
    }
    let mut layers = Vec::new();
    for (l, m) in meta.layers.iter().enumerate() {
        let p = |name: &str| format!("layer{l}.{name}");
        let mut layer = UmpmLayer {
            blocks: Default::default(),
            gates: [0.0; 5],
            beta: store.vector(&p("beta"))?,
            att: None,
            post_mlp: None,
            split_update: None,
            activation: m.activation,
            is_padding: m.is_padding,
            calibration: None,
        };
        for &b in &m.blocks {
            layer.blocks[b.index()] = Some(store.matrix(&p(&format!("{b}.W")))?);
            layer.gates[b.index()] = m.gates.get(&b).copied().unwrap_or(0.0);
        }
        if let Some(a) = &m.att {
            layer.att = Some(Attention {
                heads: a.heads,
                a_src: store.matrix(&p("att.a_src"))?,
                a_dst: store.matrix(&p("att.a_dst"))?,
                concat: a.concat,
                slope: a.leaky_slope,
            });
        }
        if let Some(dims) = &m.mlp_dims {
            layer.post_mlp = Some(take_mlp(&store, &p(""), dims)?);
        }
        if let Some(u) = &m.split_update {
            layer.split_update = Some(SplitUpdate {
                split: u.split,
                scales: u.scales,
                first: u.first_dims.as_deref().map(|d| take_mlp(&store, &p("split0."), d)).transpose()?,
                second: u.second_dims.as_deref().map(|d| take_mlp(&store, &p("split1."), d)).transpose()?,
            });
        }
        if let Some(gran) = &m.lfnorm {
            layer.calibration = Some(FoldedAffine {
                granularity: gran.clone(),
                a: store.matrix(&p("lfnorm.a"))?,
                b: store.matrix(&p("lfnorm.b"))?,
            });
        }
        layer.validate(l)?;
        if layer.in_dim() != m.in_dim || layer.out_dim() != m.out_dim {
            return Err(Error::dims(format!("umpm layer {l}: manifest dims disagree with tensors")));
        }
        layers.push(layer);
    }
    store.ensure_all_used()?;
    let model = UmpmModel {
        layers,
        provenance: meta.provenance,
    };
    model.validate()?;
    Ok(model)
}

/// Either kind of checkpoint, dispatched on the manifest's `arch` tag.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Parent(ParentModel),
    Umpm(UmpmModel),
}

impl AnyModel {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        match crate::checkpoint::read_arch(dir)?.as_str() {
            "umpm" => Ok(AnyModel::Umpm(load_umpm(dir)?)),
            _ => Ok(AnyModel::Parent(crate::model::load_checkpoint(dir)?)),
        }
    }

    pub fn as_model(&self) -> &dyn GraphModel {
        match self {
            AnyModel::Parent(p) => p,
            AnyModel::Umpm(u) => u,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, InitOptions};
    use crate::synthetic;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path3() -> Csr {
        Csr::from_edges(3, &[(0, 1), (1, 0), (1, 2), (2, 1)]).unwrap()
    }

    fn single(b: Basis, w: Matrix) -> UmpmLayer {
        let d_out = w.ncols();
        let mut l = UmpmLayer::empty(w.nrows(), d_out, Activation::Linear);
        l.blocks[Basis::SelfLoop.index()] = None;
        l.blocks[b.index()] = Some(w);
        l.gates[b.index()] = 1.0;
        l
    }

    #[test]
    fn self_basis_with_identity_returns_input() {
        let csr = path3();
        let x = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let g = GraphView { csr: &csr, features: &x };
        let out = apply_basis(Basis::SelfLoop, &x, &single(Basis::SelfLoop, Array2::eye(2)), g).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn sum_basis_on_path_graph() {
        let csr = path3();
        let x = Array2::eye(3);
        let g = GraphView { csr: &csr, features: &x };
        let out = apply_basis(Basis::Sum, &x, &single(Basis::Sum, Array2::eye(3)), g).unwrap();
        assert_eq!(out.row(1).to_vec(), vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn missing_block_errors() {
        let csr = path3();
        let x = Array2::eye(3);
        let g = GraphView { csr: &csr, features: &x };
        let err = apply_basis(Basis::Mean, &x, &single(Basis::Sum, Array2::eye(3)), g).unwrap_err();
        assert!(matches!(err, Error::MissingBasis("mean")));
    }

    #[test]
    fn gcn_layer_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ParentModel::random(Arch::Gcn, &[4, 8, 3], &InitOptions::default(), &mut rng);
        let u = canonicalize(&p).unwrap();
        assert_eq!(u.layers[0].gates, [0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gin_self_block_is_scaled_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let opts = InitOptions { gin_eps: 0.3, ..Default::default() };
        let p = ParentModel::random(Arch::Gin, &[4, 8, 3], &opts, &mut rng);
        let u = canonicalize(&p).unwrap();
        let w = u.layers[0].block(Basis::SelfLoop).unwrap();
        assert!(max_abs_diff(w.view(), (Array2::<f64>::eye(4) * 1.3).view()) < 1e-15);
    }

    #[test]
    fn canonical_forms_match_parents() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bundle = synthetic::sbm_bundle(&synthetic::SbmSpec { nodes: 60, ..Default::default() }, &mut rng);
        for arch in Arch::ALL {
            let p = ParentModel::random(arch, &[bundle.feature_dim(), 16, 8, bundle.num_classes()], &InitOptions { heads: 4, gin_eps: 0.2, ..Default::default() }, &mut rng);
            let (_, dev) = canonicalize_verified(&p, bundle.view(), 1e-5).unwrap();
            assert!(dev <= 1e-9, "{arch}: {dev}");
        }
    }

    #[test]
    fn perturbed_gate_fails_verification() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let bundle = synthetic::sbm_bundle(&synthetic::SbmSpec { nodes: 40, ..Default::default() }, &mut rng);
        let p = ParentModel::random(Arch::Sage, &[bundle.feature_dim(), 8, bundle.num_classes()], &InitOptions::default(), &mut rng);
        let mut u = canonicalize(&p).unwrap();
        u.layers[0].gates[Basis::Mean.index()] += 0.1;
        assert!(verify_equivalence(&p, &u, bundle.view()).unwrap() > 1e-5);
    }

    #[test]
    fn zero_features_reduce_to_bias_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut bundle_x = Array2::zeros((5, 3));
        let csr = Csr::from_edges(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)]).unwrap();
        let g = GraphView { csr: &csr, features: &bundle_x };
        for arch in Arch::ALL {
            let p = ParentModel::random(arch, &[3, 4, 2], &InitOptions { heads: 2, ..Default::default() }, &mut rng);
            let u = canonicalize(&p).unwrap();
            assert_eq!(verify_equivalence(&p, &u, g).unwrap(), 0.0, "{arch}");
        }
        bundle_x[[0, 0]] = 1.0;
    }

    #[test]
    fn zero_gates_give_bias_broadcast() {
        let csr = path3();
        let x = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let g = GraphView { csr: &csr, features: &x };
        let mut l = single(Basis::Gcn, array![[1.0], [1.0]]);
        l.gates = [0.0; 5];
        l.beta = array![0.25];
        let out = l.apply(g, &x, None);
        assert_eq!(out, array![[0.25], [0.25], [0.25]]);
    }

    #[test]
    fn equal_gates_average_single_basis_outputs() {
        let csr = path3();
        let x = array![[1.0, -2.0], [0.5, 4.0], [3.0, 1.0]];
        let g = GraphView { csr: &csr, features: &x };
        let w1 = array![[1.0, 0.0], [2.0, 1.0]];
        let w2 = array![[0.0, 1.0], [-1.0, 3.0]];
        let mut both = single(Basis::SelfLoop, w1.clone());
        both.blocks[Basis::Mean.index()] = Some(w2.clone());
        both.gates[Basis::SelfLoop.index()] = 0.5;
        both.gates[Basis::Mean.index()] = 0.5;
        let a = single(Basis::SelfLoop, w1).apply(g, &x, None);
        let b = single(Basis::Mean, w2).apply(g, &x, None);
        let avg = (a + b) * 0.5;
        assert!(max_abs_diff(both.apply(g, &x, None).view(), avg.view()) < 1e-12);
    }

    #[test]
    fn umpm_checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for arch in Arch::ALL {
            let p = ParentModel::random(arch, &[5, 8, 3], &InitOptions { heads: 2, gin_eps: 0.5, ..Default::default() }, &mut rng);
            let u = canonicalize(&p).unwrap();
            let dir = tempfile::tempdir().unwrap();
            save_umpm(&u, dir.path()).unwrap();
            let back = AnyModel::load(dir.path()).unwrap();
            match back {
                AnyModel::Umpm(m) => assert_eq!(m, u, "{arch}"),
                _ => panic!("wrong kind"),
            }
        }
    }

    fn gaussian(n: usize, d: usize, rng: &mut impl rand::Rng) -> Matrix {
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn split_update_branches_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let csr = path3();
        let x = gaussian(3, 4, &mut rng);
        let g = GraphView { csr: &csr, features: &x };
        let p = ParentModel::random(Arch::Gin, &[4, 6, 2], &InitOptions::default(), &mut rng);
        let gin = canonicalize(&p).unwrap().layers.remove(1);
        let mut layer = UmpmLayer::empty(6, 8, Activation::Linear);
        let mut w = Array2::zeros((6, 8));
        w.slice_mut(ndarray::s![.., ..6]).assign(&Array2::eye(6));
        w.slice_mut(ndarray::s![.., 6..]).assign(&gaussian(6, 2, &mut rng));
        layer.blocks[Basis::Sum.index()] = Some(w);
        layer.gates[Basis::Sum.index()] = 1.0;
        layer.gates[Basis::SelfLoop.index()] = 0.0;
        layer.split_update = Some(SplitUpdate { split: 6, first: gin.post_mlp.clone(), second: None, scales: [0.3, 0.7] });
        layer.validate(0).unwrap();
        assert_eq!(layer.out_dim(), 2);

        let h = gaussian(3, 6, &mut rng);
        let mut hidden = Vec::new();
        let got = layer.apply(g, &h, Some(&mut hidden));
        let z = ops::aggregate_sum(&csr, &h.dot(layer.block(Basis::Sum).unwrap()));
        let want = gin.post_mlp.as_ref().unwrap().apply(&z.slice(ndarray::s![.., ..6]).to_owned(), None) * 0.3 + z.slice(ndarray::s![.., 6..]).to_owned() * 0.7;
        assert!(max_abs_diff(got.view(), want.view()) < 1e-12);
        assert_eq!(hidden.len(), 1);

        let model = UmpmModel { layers: vec![layer], provenance: "gin+gcn".into() };
        let dir = tempfile::tempdir().unwrap();
        save_umpm(&model, dir.path()).unwrap();
        let back = load_umpm(dir.path()).unwrap();
        let dev = max_abs_diff(back.layers[0].apply(g, &h, None).view(), got.view());
        assert!(dev < 1e-5, "{dev}");
    }
}
