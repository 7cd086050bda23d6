//! Message-passing kernels over the incoming CSR.
//!
//! Every destination reduces its sources in ascending id order, so results
//! are bit-identical whether rows are processed serially or in parallel.

use ndarray::parallel::prelude::*;
use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::graph::Csr;
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Linear,
    Relu,
    Elu,
}

impl Activation {
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Relu => x.max(0.0),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
        }
    }

    pub fn apply(self, m: &Matrix) -> Matrix {
        match self {
            Activation::Linear => m.clone(),
            _ => m.mapv(|x| self.eval(x)),
        }
    }
}

#[inline]
pub(crate) fn axpy(out: &mut [f64], w: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += w * v;
    }
}

/// Contiguous row slices of a standard-layout matrix.
pub(crate) struct Rows<'a> {
    data: &'a [f64],
    cols: usize,
}

impl<'a> Rows<'a> {
    pub(crate) fn new(m: &'a Matrix) -> Self {
        let cols = m.ncols();
        let data = m
            .as_slice()
            .expect("kernels require standard-layout matrices");
        Rows { data, cols }
    }

    #[inline]
    pub(crate) fn get(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

pub(crate) fn standard(m: Matrix) -> Matrix {
    if m.is_standard_layout() {
        m
    } else {
        m.as_standard_layout().into_owned()
    }
}

/// Fills each output row `v` with `f(v, row)`, in parallel over rows.
pub(crate) fn per_node<F>(n: usize, cols: usize, f: F) -> Matrix
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let mut out = Array2::zeros((n, cols));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(v, mut r)| f(v, r.as_slice_mut().expect("row slice")));
    out
}

/// `out_v = sum_{u in E_v} z_u`.
pub fn aggregate_sum(csr: &Csr, z: &Matrix) -> Matrix {
    let rows = Rows::new(z);
    per_node(csr.num_nodes(), z.ncols(), |v, out| {
        for &u in csr.sources(v) {
            axpy(out, 1.0, rows.get(u as usize));
        }
    })
}

/// `out_v = mean_{u in E_v} z_u`, zero for isolated nodes.
pub fn aggregate_mean(csr: &Csr, z: &Matrix) -> Matrix {
    let rows = Rows::new(z);
    per_node(csr.num_nodes(), z.ncols(), |v, out| {
        let src = csr.sources(v);
        if src.is_empty() {
            return;
        }
        let w = 1.0 / src.len() as f64;
        for &u in src {
            axpy(out, w, rows.get(u as usize));
        }
    })
}

/// Symmetric-normalized propagation with self loops, `D^-1/2 (A + I) D^-1/2 z`.
pub fn propagate_gcn(csr: &Csr, z: &Matrix) -> Matrix {
    let rows = Rows::new(z);
    per_node(csr.num_nodes(), z.ncols(), |v, out| {
        let sv = csr.gcn_scale(v);
        axpy(out, sv * sv, rows.get(v));
        for &u in csr.sources(v) {
            axpy(out, sv * csr.gcn_scale(u as usize), rows.get(u as usize));
        }
    })
}

/// Attention hyperparameters and score vectors for one GAT-style operator.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub heads: usize,
    /// `heads x head_dim`
    pub a_src: Matrix,
    /// `heads x head_dim`
    pub a_dst: Matrix,
    pub concat: bool,
    pub slope: f64,
}

impl Attention {
    pub fn head_dim(&self) -> usize {
        self.a_src.ncols()
    }

    /// Width of the aggregated output given the projected width.
    pub fn out_dim(&self) -> usize {
        if self.concat {
            self.heads * self.head_dim()
        } else {
            self.head_dim()
        }
    }
}

fn head_scores(z: &Matrix, a: &Matrix, heads: usize) -> Array2<f64> {
    let dh = a.ncols();
    let rows = Rows::new(z);
    let mut s = Array2::zeros((z.nrows(), heads));
    for (v, mut out) in s.axis_iter_mut(Axis(0)).enumerate() {
        let r = rows.get(v);
        for k in 0..heads {
            out[k] = dot(&r[k * dh..(k + 1) * dh], a.row(k));
        }
    }
    s
}

#[inline]
fn dot(x: &[f64], y: ArrayView1<'_, f64>) -> f64 {
    x.iter().zip(y.iter()).map(|(a, b)| a * b).sum()
}

/// Softmax attention coefficients, laid out as `coef[edge * heads + k]`
/// with edges in CSR order. Each destination's coefficients sum to one per head.
pub fn attention_coefficients(csr: &Csr, z: &Matrix, att: &Attention) -> Vec<f64> {
    let h = att.heads;
    let src_s = head_scores(z, &att.a_src, h);
    let dst_s = head_scores(z, &att.a_dst, h);
    let mut coef = vec![0.0; csr.num_edges() * h];
    let slope = att.slope;
    let leaky = |x: f64| if x > 0.0 { x } else { slope * x };
    for v in 0..csr.num_nodes() {
        let src = csr.sources(v);
        if src.is_empty() {
            continue;
        }
        let base = csr.edge_start(v);
        for k in 0..h {
            let mut max = f64::NEG_INFINITY;
            for (i, &u) in src.iter().enumerate() {
                let e = leaky(src_s[[u as usize, k]] + dst_s[[v, k]]);
                coef[(base + i) * h + k] = e;
                max = max.max(e);
            }
            let mut total = 0.0;
            for i in 0..src.len() {
                let c = &mut coef[(base + i) * h + k];
                *c = (*c - max).exp();
                total += *c;
            }
            for i in 0..src.len() {
                coef[(base + i) * h + k] /= total;
            }
        }
    }
    coef
}

/// Adds the attention message of edge `u -> v` (edge index `e`) into `out`,
/// scaled by `w`. Concatenated heads write their own block; averaged heads
/// all write into the single `head_dim` output.
#[inline]
pub(crate) fn add_attention_message(
    out: &mut [f64],
    w: f64,
    zu: &[f64],
    coef: &[f64],
    e: usize,
    att: &Attention,
) {
    let h = att.heads;
    let dh = att.head_dim();
    if att.concat {
        for k in 0..h {
            let c = w * coef[e * h + k];
            axpy(&mut out[k * dh..(k + 1) * dh], c, &zu[k * dh..(k + 1) * dh]);
        }
    } else {
        let inv = w / h as f64;
        for k in 0..h {
            axpy(out, inv * coef[e * h + k], &zu[k * dh..(k + 1) * dh]);
        }
    }
}

pub fn aggregate_attention(csr: &Csr, z: &Matrix, coef: &[f64], att: &Attention) -> Matrix {
    let rows = Rows::new(z);
    per_node(csr.num_nodes(), att.out_dim(), |v, out| {
        let base = csr.edge_start(v);
        for (i, &u) in csr.sources(v).iter().enumerate() {
            add_attention_message(out, 1.0, rows.get(u as usize), coef, base + i, att);
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn path3() -> Csr {
        Csr::from_edges(3, &[(0, 1), (1, 0), (1, 2), (2, 1)]).unwrap()
    }

    #[test]
    fn sum_on_path_graph() {
        let z = Array2::eye(3);
        let s = aggregate_sum(&path3(), &z);
        assert_eq!(s.row(1).to_vec(), vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn mean_of_isolated_node_is_zero() {
        let csr = Csr::from_edges(2, &[(0, 1)]).unwrap();
        let z = array![[2.0, 4.0], [1.0, 1.0]];
        let m = aggregate_mean(&csr, &z);
        assert_eq!(m.row(0).to_vec(), vec![0.0, 0.0]);
        assert_eq!(m.row(1).to_vec(), vec![2.0, 4.0]);
    }

    #[test]
    fn gcn_on_single_node_is_identity() {
        let csr = Csr::from_edges(1, &[]).unwrap();
        let z = array![[3.0, -1.0]];
        assert_eq!(propagate_gcn(&csr, &z), z);
    }

    #[test]
    fn elu_and_relu() {
        assert_eq!(Activation::Relu.eval(-2.0), 0.0);
        assert!((Activation::Elu.eval(-1.0) - ((-1f64).exp() - 1.0)).abs() < 1e-15);
        assert_eq!(Activation::Elu.eval(2.5), 2.5);
    }
}
