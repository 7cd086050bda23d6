//! Native GCN, GraphSAGE, GAT and GIN layers with full-graph inference.

mod checkpoint;
mod init;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use init::InitOptions;

use crate::error::{Error, Result};
use crate::graph::GraphView;
use crate::linalg::{center_columns, Matrix, Vector};
use crate::ops::{self, Activation, Attention};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Gcn,
    Gat,
    Sage,
    Gin,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::Gcn, Arch::Gat, Arch::Sage, Arch::Gin];

    /// ELU for GAT, ReLU otherwise.
    pub fn default_activation(self) -> Activation {
        match self {
            Arch::Gat => Activation::Elu,
            _ => Activation::Relu,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Gcn => "gcn",
            Arch::Gat => "gat",
            Arch::Sage => "sage",
            Arch::Gin => "gin",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(Arch::Gcn),
            "gat" => Ok(Arch::Gat),
            "sage" | "graphsage" => Ok(Arch::Sage),
            "gin" => Ok(Arch::Gin),
            other => Err(Error::UnsupportedArch(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in x out`
    pub w: Matrix,
    pub b: Vector,
}

impl Linear {
    pub fn apply(&self, x: &Matrix) -> Matrix {
        x.dot(&self.w) + &self.b
    }
}

/// The GIN update network: linear sublayers with ReLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn in_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("nonempty mlp").w.ncols()
    }

    /// Returns the output and, when `hidden` is given, pushes each inner
    /// sublayer's pre-activation into it.
    pub fn apply(&self, x: &Matrix, hidden: Option<&mut Vec<Matrix>>) -> Matrix {
        self.apply_view(x.view(), hidden)
    }

    pub fn apply_view(&self, x: ndarray::ArrayView2<'_, f64>, mut hidden: Option<&mut Vec<Matrix>>) -> Matrix {
        let last = self.layers.len() - 1;
        let mut t = x.dot(&self.layers[0].w) + &self.layers[0].b;
        if last > 0 {
            if let Some(h) = hidden.as_deref_mut() {
                h.push(t.clone());
            }
            t.mapv_inplace(|x| x.max(0.0));
        }
        for (k, lin) in self.layers.iter().enumerate().skip(1) {
            t = lin.apply(&t);
            if k < last {
                if let Some(h) = hidden.as_deref_mut() {
                    h.push(t.clone());
                }
                t.mapv_inplace(|x| x.max(0.0));
            }
        }
        t
    }

    pub(crate) fn check(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("empty mlp"));
        }
        for (k, lin) in self.layers.iter().enumerate() {
            if lin.b.len() != lin.w.ncols() {
                return Err(Error::dims(format!("mlp sublayer {k}: bias/weight width")));
            }
            if k > 0 && self.layers[k - 1].w.ncols() != lin.w.nrows() {
                return Err(Error::dims(format!("mlp sublayer {k}: dims do not chain")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Gcn {
        w: Matrix,
        b: Vector,
    },
    Sage {
        w_root: Matrix,
        w_neigh: Matrix,
        b: Vector,
    },
    /// `w` is `in x heads*head_dim`; heads are concatenated or averaged.
    Gat {
        w: Matrix,
        att: Attention,
        b: Vector,
    },
    Gin {
        eps: f64,
        mlp: Mlp,
    },
}

impl LayerSpec {
    pub fn in_dim(&self) -> usize {
        match self {
            LayerSpec::Gcn { w, .. } | LayerSpec::Gat { w, .. } => w.nrows(),
            LayerSpec::Sage { w_root, .. } => w_root.nrows(),
            LayerSpec::Gin { mlp, .. } => mlp.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            LayerSpec::Gcn { w, .. } => w.ncols(),
            LayerSpec::Sage { w_root, .. } => w_root.ncols(),
            LayerSpec::Gat { att, .. } => att.out_dim(),
            LayerSpec::Gin { mlp, .. } => mlp.out_dim(),
        }
    }

    pub fn arch(&self) -> Arch {
        match self {
            LayerSpec::Gcn { .. } => Arch::Gcn,
            LayerSpec::Sage { .. } => Arch::Sage,
            LayerSpec::Gat { .. } => Arch::Gat,
            LayerSpec::Gin { .. } => Arch::Gin,
        }
    }

    fn check(&self, idx: usize) -> Result<()> {
        let bad = |what: &str| Err(Error::dims(format!("layer {idx}: {what}")));
        match self {
            LayerSpec::Gcn { w, b } => {
                if b.len() != w.ncols() {
                    return bad("bias width");
                }
            }
            LayerSpec::Sage { w_root, w_neigh, b } => {
                if w_root.dim() != w_neigh.dim() || b.len() != w_root.ncols() {
                    return bad("root/neighbor weights or bias disagree");
                }
            }
            LayerSpec::Gat { w, att, b } => {
                if att.heads == 0 || att.a_dst.dim() != att.a_src.dim() || att.a_src.nrows() != att.heads {
                    return bad("attention vectors");
                }
                if w.ncols() != att.heads * att.head_dim() {
                    return bad("projection width is not heads * head_dim");
                }
                if b.len() != att.out_dim() {
                    return bad("bias width");
                }
            }
            LayerSpec::Gin { mlp, .. } => mlp.check()?,
        }
        Ok(())
    }

    /// Pre-activation of this layer; GIN's inner pre-activations go to `hidden`.
    pub fn apply(&self, g: GraphView<'_>, h: &Matrix, hidden: Option<&mut Vec<Matrix>>) -> Matrix {
        let csr = g.csr;
        match self {
            LayerSpec::Gcn { w, b } => ops::propagate_gcn(csr, &ops::standard(h.dot(w))) + b,
            LayerSpec::Sage { w_root, w_neigh, b } => {
                let neigh = ops::aggregate_mean(csr, &ops::standard(h.dot(w_neigh)));
                h.dot(w_root) + neigh + b
            }
            LayerSpec::Gat { w, att, b } => {
                let z = ops::standard(h.dot(w));
                let coef = ops::attention_coefficients(csr, &z, att);
                ops::aggregate_attention(csr, &z, &coef, att) + b
            }
            LayerSpec::Gin { eps, mlp } => {
                let hs = ops::standard(h.clone());
                let agg = ops::aggregate_sum(csr, &hs) + &(hs * (1.0 + eps));
                mlp.apply(&agg, hidden)
            }
        }
    }
}

/// Per-layer pre-activations of one model on one graph.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    /// `pre[0]` is the centered input; `pre[l]` the layer-`l` pre-activation
    /// (after the update MLP for GIN-style layers).
    pub pre: Vec<Matrix>,
    /// `inputs[l]` is what layer `l + 1` consumed; `inputs[0]` is the raw input.
    pub inputs: Vec<Matrix>,
    /// Inner MLP pre-activations per layer (empty for layers without one).
    pub mlp_hidden: Vec<Vec<Matrix>>,
}

impl ActivationTrace {
    pub fn depth(&self) -> usize {
        self.pre.len() - 1
    }

    pub fn logits(&self) -> &Matrix {
        self.pre.last().expect("trace has an input entry")
    }

    pub(crate) fn start(x: &Matrix) -> Self {
        ActivationTrace {
            pre: vec![center_columns(x.view())],
            inputs: vec![x.clone()],
            mlp_hidden: Vec::new(),
        }
    }
}

/// Anything that runs full-graph inference.
pub trait GraphModel {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn depth(&self) -> usize;
    fn forward(&self, g: GraphView<'_>) -> Result<ActivationTrace>;
    /// Logits only; skips trace bookkeeping.
    fn predict(&self, g: GraphView<'_>) -> Result<Matrix>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParentModel {
    pub arch: Arch,
    pub layers: Vec<LayerSpec>,
    pub activation: Activation,
}

impl ParentModel {
    pub fn new(arch: Arch, layers: Vec<LayerSpec>, activation: Activation) -> Result<Self> {
        let m = ParentModel {
            arch,
            layers,
            activation,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("model has no layers"));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.arch() != self.arch {
                return Err(Error::invalid(format!(
                    "layer {i} is {} inside a {} model",
                    layer.arch(),
                    self.arch
                )));
            }
            layer.check(i)?;
            if i > 0 && self.layers[i - 1].out_dim() != layer.in_dim() {
                return Err(Error::dims(format!(
                    "layer {i} expects {} inputs but layer {} emits {}",
                    layer.in_dim(),
                    i - 1,
                    self.layers[i - 1].out_dim()
                )));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("validated").out_dim()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].in_dim()];
        w.extend(self.layers.iter().map(LayerSpec::out_dim));
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
            h = self.activation.apply(&u);
            if let Some(t) = trace.as_mut() {
                t.pre.push(u);
                t.inputs.push(h.clone());
                t.mlp_hidden.push(hidden);
            }
        }
        unreachable!("loop returns at the last layer")
    }
}

impl GraphModel for ParentModel {
    fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    fn output_dim(&self) -> usize {
        self.num_classes()
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

/// Zero vector helper for biases.
#[cfg(test)]
pub(crate) fn zeros(n: usize) -> Vector {
    ndarray::Array1::zeros(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Csr;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn view<'a>(csr: &'a Csr, x: &'a Matrix) -> GraphView<'a> {
        GraphView { csr, features: x }
    }

    #[test]
    fn gcn_single_node_is_affine() {
        let csr = Csr::from_edges(1, &[]).unwrap();
        let x = array![[1.0, 2.0]];
        let w = array![[1.0, 0.5], [-1.0, 2.0]];
        let b = array![0.1, -0.2];
        let m = ParentModel::new(
            Arch::Gcn,
            vec![LayerSpec::Gcn { w: w.clone(), b: b.clone() }],
            Activation::Relu,
        )
        .unwrap();
        let u = m.predict(view(&csr, &x)).unwrap();
        assert_eq!(u, x.dot(&w) + &b);
    }

    #[test]
    fn sage_two_clique_identity_weights() {
        let csr = Csr::from_edges(2, &[(0, 1), (1, 0)]).unwrap();
        let x = array![[1.0, 2.0], [3.0, -1.0]];
        let layer = LayerSpec::Sage {
            w_root: Array2::eye(2),
            w_neigh: Array2::eye(2),
            b: zeros(2),
        };
        let m = ParentModel::new(Arch::Sage, vec![layer], Activation::Relu).unwrap();
        let u = m.predict(view(&csr, &x)).unwrap();
        assert_eq!(u, array![[4.0, 1.0], [4.0, 1.0]]);
    }

    #[test]
    fn chain_violation_is_dimension_error() {
        let l0 = LayerSpec::Gcn { w: Array2::zeros((4, 32)), b: zeros(32) };
        let l1 = LayerSpec::Gcn { w: Array2::zeros((16, 8)), b: zeros(8) };
        let err = ParentModel::new(Arch::Gcn, vec![l0, l1], Activation::Relu).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }

    #[test]
    fn trace_shapes_and_centered_input() {
        let csr = Csr::from_edges(3, &[(0, 1), (1, 2), (2, 0)]).unwrap();
        let x = array![[1.0, 0.0], [0.0, 3.0], [2.0, 1.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = ParentModel::random(Arch::Gin, &[2, 4, 3], &InitOptions::default(), &mut rng);
        let t = m.forward(view(&csr, &x)).unwrap();
        assert_eq!(t.pre.len(), 3);
        assert_eq!(t.pre[1].dim(), (3, 4));
        assert_eq!(t.logits().dim(), (3, 3));
        for c in t.pre[0].columns() {
            assert!(c.sum().abs() < 1e-12);
        }
        assert_eq!(t.mlp_hidden[0].len(), 1);
    }

    #[test]
    fn arch_parse() {
        assert_eq!("GraphSAGE".parse::<Arch>().unwrap(), Arch::Sage);
        assert!(matches!("mlp".parse::<Arch>(), Err(Error::UnsupportedArch(_))));
    }
}
