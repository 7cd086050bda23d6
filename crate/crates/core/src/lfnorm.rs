//! Edge-message moment calibration.
//!
//! For a layer's edge messages `m_e = sum_{b edge} g_b m_{e,b}` we stream
//! per-unit sums `S`, squared sums `Q` and counts `C` (a unit is a node, a
//! degree bucket or the whole graph), mix parent moments into targets and
//! fold the per-edge affine map `a * m + b` into the aggregate:
//! `sum_e (a * m_e + b) = a * S_v + C_v b`. Nothing of size `|E| x d` is
//! ever held in memory except by the explicit oracle at the bottom.

use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::binio::{write_json, write_matrix_list};
use crate::error::{Error, Result};
use crate::graph::{degree_buckets, Csr, GraphView};
use crate::linalg::Matrix;
use crate::ops::{self, axpy};
use crate::umpm::{Prepared, UmpmModel};

/// Resolved pooling of destinations into calibration units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Granularity {
    PerNode,
    /// Degree thresholds, as produced by [`degree_buckets`].
    Bucketed { boundaries: Vec<usize> },
    Global,
}

impl Granularity {
    pub fn num_units(&self, csr: &Csr) -> usize {
        match self {
            Granularity::PerNode => csr.num_nodes(),
            Granularity::Bucketed { boundaries } => boundaries.len() + 1,
            Granularity::Global => 1,
        }
    }

    #[inline]
    pub fn unit_of(&self, csr: &Csr, v: usize) -> usize {
        match self {
            Granularity::PerNode => v,
            Granularity::Bucketed { boundaries } => {
                let d = csr.in_degree(v);
                boundaries.partition_point(|&t| t <= d)
            }
            Granularity::Global => 0,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Granularity::PerNode => "per_node".into(),
            Granularity::Bucketed { boundaries } => format!("bucket:{}", boundaries.len() + 1),
            Granularity::Global => "global".into(),
        }
    }
}

/// Granularity as written in configs: `auto`, `per_node`, `bucket:K`, `global`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GranularitySpec {
    /// Per-node up to 20k nodes, 32 degree buckets above.
    #[default]
    Auto,
    PerNode,
    Bucket(usize),
    Global,
}

impl GranularitySpec {
    pub fn resolve(self, csr: &Csr) -> Granularity {
        match self {
            GranularitySpec::Auto if csr.num_nodes() <= 20_000 => Granularity::PerNode,
            GranularitySpec::Auto => GranularitySpec::Bucket(32).resolve(csr),
            GranularitySpec::PerNode => Granularity::PerNode,
            GranularitySpec::Bucket(k) => Granularity::Bucketed {
                boundaries: degree_buckets(csr, k).boundaries,
            },
            GranularitySpec::Global => Granularity::Global,
        }
    }
}

impl std::str::FromStr for GranularitySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(GranularitySpec::Auto),
            "per_node" => Ok(GranularitySpec::PerNode),
            "global" => Ok(GranularitySpec::Global),
            _ => s
                .strip_prefix("bucket:")
                .and_then(|k| k.parse().ok())
                .filter(|&k: &usize| k >= 1)
                .map(GranularitySpec::Bucket)
                .ok_or_else(|| Error::invalid(format!("bad granularity `{s}`"))),
        }
    }
}

impl std::fmt::Display for GranularitySpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GranularitySpec::Auto => f.write_str("auto"),
            GranularitySpec::PerNode => f.write_str("per_node"),
            GranularitySpec::Bucket(k) => write!(f, "bucket:{k}"),
            GranularitySpec::Global => f.write_str("global"),
        }
    }
}

impl Serialize for GranularitySpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GranularitySpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Streamed sufficient statistics of one layer's edge messages.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationStats {
    pub granularity: Granularity,
    pub layer: usize,
    /// `units x d` sums of messages.
    pub s: Matrix,
    /// `units x d` sums of squared messages.
    pub q: Matrix,
    /// Edge count per unit.
    pub c: Vec<f64>,
}

impl CalibrationStats {
    pub fn num_units(&self) -> usize {
        self.c.len()
    }

    pub fn dim(&self) -> usize {
        self.s.ncols()
    }

    fn per_count(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for (mut row, &c) in out.axis_iter_mut(Axis(0)).zip(&self.c) {
            if c > 0.0 {
                row /= c;
            } else {
                row.fill(0.0);
            }
        }
        out
    }

    pub fn mu(&self) -> Matrix {
        self.per_count(&self.s)
    }

    pub fn nu(&self) -> Matrix {
        self.per_count(&self.q)
    }

    pub fn sigma(&self) -> Matrix {
        let mu = self.mu();
        let mut var = self.nu() - &mu * &mu;
        var.mapv_inplace(|x| x.max(0.0).sqrt());
        var
    }

    /// Writes `<stem>.json` (shape and granularity) and `<stem>.bin` holding `[S, Q, C]`.
    pub fn dump(&self, dir: &Path, stem: &str) -> Result<()> {
        #[derive(Serialize)]
        struct Meta<'a> {
            layer: usize,
            units: usize,
            dim: usize,
            granularity: &'a Granularity,
            tensors: [&'static str; 3],
        }
        write_json(
            &dir.join(format!("{stem}.json")),
            &Meta {
                layer: self.layer,
                units: self.num_units(),
                dim: self.dim(),
                granularity: &self.granularity,
                tensors: ["S", "Q", "C"],
            },
        )?;
        let c = Array2::from_shape_vec((self.c.len(), 1), self.c.clone()).expect("column");
        write_matrix_list(&dir.join(format!("{stem}.bin")), &[&self.s, &self.q, &c])
    }
}

/// Mixed target moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub granularity: Granularity,
    pub mu: Matrix,
    pub nu: Matrix,
    pub sigma: Matrix,
}

/// Per-unit affine map on edge messages, applied in folded form.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedAffine {
    pub granularity: Granularity,
    /// `units x d` scales.
    pub a: Matrix,
    /// `units x d` shifts.
    pub b: Matrix,
}

impl FoldedAffine {
    pub fn identity(granularity: Granularity, units: usize, d: usize) -> Self {
        FoldedAffine {
            granularity,
            a: Array2::ones((units, d)),
            b: Array2::zeros((units, d)),
        }
    }

    /// `out += a_u * s + C_v b_u` for destination `v` with raw aggregate `s`.
    #[inline]
    pub(crate) fn apply_to_aggregate(&self, csr: &Csr, v: usize, s: &[f64], out: &mut [f64]) {
        let u = self.granularity.unit_of(csr, v);
        let c = csr.in_degree(v) as f64;
        let a = self.a.row(u);
        let b = self.b.row(u);
        for (j, o) in out.iter_mut().enumerate() {
            *o += a[j] * s[j] + c * b[j];
        }
    }

    /// Explicit per-message transform.
    #[inline]
    fn apply_to_message(&self, unit: usize, m: &mut [f64]) {
        let a = self.a.row(unit);
        let b = self.b.row(unit);
        for (j, x) in m.iter_mut().enumerate() {
            *x = a[j] * *x + b[j];
        }
    }
}

/// Streams moments of layer `k`'s edge messages (0-based index into the
/// model's layers). `map` right-multiplies each message before squaring,
/// which is how parent statistics are moved into the canonical coordinates.
/// `per_edge` applies an affine map to each message first; it exists to
/// measure calibrated messages and is never the production path.
pub fn stream_moments_with(
    model: &UmpmModel,
    g: GraphView<'_>,
    k: usize,
    granularity: &Granularity,
    map: Option<&Matrix>,
    per_edge: Option<&FoldedAffine>,
) -> Result<CalibrationStats> {
    let layer = model
        .layers
        .get(k)
        .ok_or_else(|| Error::invalid(format!("model has no layer {k}")))?;
    let h = layer_input(model, g, k)?;
    let d_msg = layer.msg_dim();
    let d = match map {
        Some(r) if r.nrows() != d_msg => {
            return Err(Error::dims(format!(
                "message map has {} rows, messages are {d_msg}-dimensional",
                r.nrows()
            )))
        }
        Some(r) => r.ncols(),
        None => d_msg,
    };
    let prep = Prepared::new(layer, g.csr, &h);
    let csr = g.csr;
    let per_node = ops::per_node(csr.num_nodes(), 2 * d, |v, out| {
        let mut buf = vec![0.0; d_msg];
        let mut mapped = vec![0.0; d];
        let unit = per_edge.map(|p| p.granularity.unit_of(csr, v));
        let (s, q) = out.split_at_mut(d);
        prep.for_each_message(v, &mut buf, |_, m| {
            let m: &[f64] = match map {
                Some(r) => {
                    mapped.iter_mut().for_each(|x| *x = 0.0);
                    for (i, &mi) in m.iter().enumerate() {
                        if mi != 0.0 {
                            axpy(&mut mapped, mi, r.row(i).as_slice().expect("standard layout"));
                        }
                    }
                    &mapped
                }
                None => m,
            };
            let mut owned;
            let m = match (per_edge, unit) {
                (Some(p), Some(u)) => {
                    owned = m.to_vec();
                    p.apply_to_message(u, &mut owned);
                    &owned[..]
                }
                _ => m,
            };
            for j in 0..d {
                s[j] += m[j];
                q[j] += m[j] * m[j];
            }
        });
    });
    let units = granularity.num_units(csr);
    let mut s = Array2::zeros((units, d));
    let mut q = Array2::zeros((units, d));
    let mut c = vec![0.0; units];
    for v in 0..csr.num_nodes() {
        let u = granularity.unit_of(csr, v);
        let row = per_node.row(v);
        let (sv, qv) = row.as_slice().expect("row").split_at(d);
        axpy(s.row_mut(u).as_slice_mut().expect("row"), 1.0, sv);
        axpy(q.row_mut(u).as_slice_mut().expect("row"), 1.0, qv);
        c[u] += csr.in_degree(v) as f64;
    }
    Ok(CalibrationStats {
        granularity: granularity.clone(),
        layer: k,
        s,
        q,
        c,
    })
}

pub fn stream_moments(model: &UmpmModel, g: GraphView<'_>, k: usize, granularity: &Granularity) -> Result<CalibrationStats> {
    stream_moments_with(model, g, k, granularity, None, None)
}

/// Input consumed by layer `k`.
pub fn layer_input(model: &UmpmModel, g: GraphView<'_>, k: usize) -> Result<Matrix> {
    if g.feature_dim() != model.layers[0].in_dim() {
        return Err(Error::dims("feature width differs from model input"));
    }
    let mut h = g.features.clone();
    for layer in &model.layers[..k] {
        h = layer.activation.apply(&layer.apply(g, &h, None));
    }
    Ok(h)
}

pub fn mix_targets(a: &CalibrationStats, b: &CalibrationStats, alpha: f64) -> Result<Targets> {
    if a.granularity != b.granularity {
        return Err(Error::invalid(format!(
            "granularity mismatch: {} vs {}",
            a.granularity.label(),
            b.granularity.label()
        )));
    }
    if a.s.dim() != b.s.dim() {
        return Err(Error::dims(format!("moment shapes {:?} vs {:?}", a.s.dim(), b.s.dim())));
    }
    let mu = a.mu() * alpha + b.mu() * (1.0 - alpha);
    let nu = a.nu() * alpha + b.nu() * (1.0 - alpha);
    let mut sigma = &nu - &mu * &mu;
    sigma.mapv_inplace(|x| x.max(0.0).sqrt());
    Ok(Targets {
        granularity: a.granularity.clone(),
        mu,
        nu,
        sigma,
    })
}

/// Below this a unit's spread is treated as zero and only the mean is moved.
pub const ZERO_SIGMA: f64 = 1e-7;

pub fn folded_params(child: &CalibrationStats, targets: &Targets, eps: f64) -> Result<FoldedAffine> {
    if child.granularity != targets.granularity || child.s.dim() != targets.mu.dim() {
        return Err(Error::invalid("child statistics and targets disagree in granularity or shape"));
    }
    let mu = child.mu();
    let sigma = child.sigma();
    let (units, d) = mu.dim();
    let mut out = FoldedAffine::identity(child.granularity.clone(), units, d);
    for u in 0..units {
        let c = child.c[u];
        if c == 0.0 {
            continue;
        }
        for j in 0..d {
            let (m, s) = (mu[[u, j]], sigma[[u, j]]);
            let a = if c <= 1.0 || s < ZERO_SIGMA {
                1.0
            } else {
                targets.sigma[[u, j]] / (s + eps)
            };
            out.a[[u, j]] = a;
            out.b[[u, j]] = targets.mu[[u, j]] - a * m;
        }
    }
    Ok(out)
}

/// Installs the calibration on layer `k`. Layers without edge bases are left alone.
pub fn apply_folded(model: &mut UmpmModel, params: FoldedAffine, k: usize) -> Result<bool> {
    let layer = model
        .layers
        .get_mut(k)
        .ok_or_else(|| Error::invalid(format!("model has no layer {k}")))?;
    if !layer.has_edge_bases() {
        log::warn!("layer {k} has no edge bases; calibration skipped");
        return Ok(false);
    }
    if params.a.ncols() != layer.msg_dim() {
        return Err(Error::dims(format!(
            "calibration is {}-dimensional, layer messages are {}",
            params.a.ncols(),
            layer.msg_dim()
        )));
    }
    layer.calibration = Some(params);
    Ok(true)
}

/// Reference forward that materializes every edge message of calibrated
/// layers, transforms each one and scatters the results. Used as the oracle
/// for the folded form.
pub fn materialized_forward(model: &UmpmModel, g: GraphView<'_>) -> Result<Matrix> {
    let csr = g.csr;
    let mut h = g.features.clone();
    let last = model.layers.len() - 1;
    for (l, layer) in model.layers.iter().enumerate() {
        let u = match &layer.calibration {
            None => layer.apply(g, &h, None),
            Some(cal) => {
                let mut bare = layer.clone();
                bare.calibration = None;
                let d = layer.msg_dim();
                let prep = Prepared::new(&bare, csr, &h);
                let mut messages = Array2::<f64>::zeros((csr.num_edges(), d));
                let mut buf = vec![0.0; d];
                for v in 0..csr.num_nodes() {
                    prep.for_each_message(v, &mut buf, |e, m| messages.row_mut(e).assign(&ndarray::aview1(m)));
                }
                for v in 0..csr.num_nodes() {
                    let unit = cal.granularity.unit_of(csr, v);
                    for e in csr.edge_start(v)..csr.edge_start(v) + csr.in_degree(v) {
                        cal.apply_to_message(unit, messages.row_mut(e).as_slice_mut().expect("row"));
                    }
                }
                let mut z = Array2::zeros((csr.num_nodes(), d));
                for v in 0..csr.num_nodes() {
                    let mut row = vec![0.0; d];
                    for e in csr.edge_start(v)..csr.edge_start(v) + csr.in_degree(v) {
                        axpy(&mut row, 1.0, messages.row(e).as_slice().expect("row"));
                    }
                    prep.node_and_bias(v, &mut row);
                    z.row_mut(v).assign(&ndarray::aview1(&row));
                }
                layer.update(z, None)
            }
        };
        if l == last {
            return Ok(u);
        }
        h = layer.activation.apply(&u);
    }
    unreachable!("loop returns at the last layer")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs_diff;
    use crate::umpm::{Basis, UmpmLayer};
    use crate::GraphModel;
    use ndarray::array;

    fn sum_layer(d: usize) -> UmpmLayer {
        let mut l = UmpmLayer::identity(d);
        l.is_padding = false;
        l.blocks[Basis::Sum.index()] = Some(Array2::eye(d));
        l.gates = [0.0, 0.0, 1.0, 0.0, 0.0];
        l
    }

    fn model(layer: UmpmLayer) -> UmpmModel {
        UmpmModel {
            layers: vec![layer],
            provenance: "test".into(),
        }
    }

    #[test]
    fn single_edge_has_zero_spread() {
        let csr = Csr::from_edges(2, &[(0, 1)]).unwrap();
        let x = array![[2.0, -1.0], [0.0, 0.0]];
        let g = GraphView { csr: &csr, features: &x };
        let st = stream_moments(&model(sum_layer(2)), g, 0, &Granularity::PerNode).unwrap();
        assert_eq!(st.mu().row(1).to_vec(), vec![2.0, -1.0]);
        assert_eq!(st.sigma().row(1).to_vec(), vec![0.0, 0.0]);
        assert_eq!(st.c, vec![0.0, 1.0]);
    }

    #[test]
    fn opposite_messages_cancel_in_mean() {
        let csr = Csr::from_edges(3, &[(0, 2), (1, 2)]).unwrap();
        let x = array![[1.5, 2.0], [-1.5, -2.0], [0.0, 0.0]];
        let g = GraphView { csr: &csr, features: &x };
        let st = stream_moments(&model(sum_layer(2)), g, 0, &Granularity::PerNode).unwrap();
        assert_eq!(st.mu().row(2).to_vec(), vec![0.0, 0.0]);
        assert_eq!(st.nu().row(2).to_vec(), vec![2.25, 4.0]);
    }

    #[test]
    fn mixing_endpoints_and_clamp() {
        let gran = Granularity::Global;
        let a = CalibrationStats { granularity: gran.clone(), layer: 0, s: array![[2.0]], q: array![[4.0]], c: vec![2.0] };
        let b = CalibrationStats { granularity: gran, layer: 0, s: array![[-2.0]], q: array![[6.0]], c: vec![2.0] };
        let t = mix_targets(&a, &b, 1.0).unwrap();
        assert_eq!((t.mu[[0, 0]], t.nu[[0, 0]]), (1.0, 2.0));
        let t = mix_targets(&a, &b, 0.5).unwrap();
        // ν* = 2.5, μ* = 0: spread grows when parent means differ
        assert!((t.sigma[[0, 0]] - 2.5f64.sqrt()).abs() < 1e-12);
        let bad = CalibrationStats { granularity: Granularity::PerNode, ..a.clone() };
        assert!(mix_targets(&a, &bad, 0.5).is_err());
    }

    #[test]
    fn zero_spread_units_only_shift() {
        let gran = Granularity::Global;
        let child = CalibrationStats { granularity: gran.clone(), layer: 0, s: array![[3.0]], q: array![[9.0]], c: vec![1.0] };
        let t = Targets { granularity: gran, mu: array![[1.0]], nu: array![[2.0]], sigma: array![[1.0]] };
        let p = folded_params(&child, &t, 1e-6).unwrap();
        assert_eq!((p.a[[0, 0]], p.b[[0, 0]]), (1.0, -2.0));
    }

    #[test]
    fn identity_calibration_is_bit_exact() {
        let csr = Csr::from_edges(4, &[(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)]).unwrap();
        let x = array![[0.1, 0.2], [0.3, -0.4], [0.5, 0.6], [-0.7, 0.8]];
        let g = GraphView { csr: &csr, features: &x };
        let mut m = model(sum_layer(2));
        let before = m.predict(g).unwrap();
        apply_folded(&mut m, FoldedAffine::identity(Granularity::PerNode, 4, 2), 0).unwrap();
        assert_eq!(m.predict(g).unwrap(), before);
        assert!(max_abs_diff(materialized_forward(&m, g).unwrap().view(), before.view()) < 1e-15);
    }

    #[test]
    fn no_edge_layer_is_skipped() {
        let mut m = model(UmpmLayer::identity(2));
        let applied = apply_folded(&mut m, FoldedAffine::identity(Granularity::Global, 1, 2), 0).unwrap();
        assert!(!applied);
        assert!(m.layers[0].calibration.is_none());
    }

    #[test]
    fn granularity_spec_parses() {
        assert_eq!("bucket:32".parse::<GranularitySpec>().unwrap(), GranularitySpec::Bucket(32));
        assert_eq!("per_node".parse::<GranularitySpec>().unwrap(), GranularitySpec::PerNode);
        assert!("bucket:0".parse::<GranularitySpec>().is_err());
        assert!("nodes".parse::<GranularitySpec>().is_err());
    }
}
