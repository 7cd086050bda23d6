//! Synthetic fixtures: planted-partition graphs and cheap specialist parents.
//!
//! Parents here are random message-passing networks whose output layer is
//! fitted by ridge regression on one side's training nodes. That is not the
//! gradient training the trainer component does, but it yields specialists
//! with real, label-dependent accuracy in milliseconds, which is what the
//! examples and tests need.

use std::collections::BTreeSet;

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::graph::{Csr, GraphBundle};
use crate::linalg::{ridge_solve, Matrix};
use crate::model::{GraphModel, InitOptions, LayerSpec, ParentModel};
use crate::ops;
use crate::Arch;

#[derive(Debug, Clone)]
pub struct SbmSpec {
    pub nodes: usize,
    pub classes: usize,
    pub feature_dim: usize,
    pub avg_degree: f64,
    /// Probability that an edge stays inside its class.
    pub homophily: f64,
    /// Feature noise relative to the unit-scale class centroids.
    pub noise: f64,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for SbmSpec {
    fn default() -> Self {
        SbmSpec {
            nodes: 200,
            classes: 4,
            feature_dim: 16,
            avg_degree: 6.0,
            homophily: 0.8,
            noise: 1.5,
            train_frac: 0.5,
            val_frac: 0.2,
        }
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Haar-distributed `d x d` orthogonal matrix (QR of a Gaussian matrix with
/// the sign of R's diagonal folded into Q).
pub fn random_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Matrix {
    let m = Array2::from_shape_fn((d, d), |_| normal(rng));
    let qr = crate::linalg::to_nalgebra(m.view()).qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    crate::linalg::from_nalgebra(&q)
}

/// Undirected planted-partition graph (both edge directions stored) with
/// Gaussian class-centroid features and random train/val/test masks.
pub fn sbm_bundle<R: Rng + ?Sized>(spec: &SbmSpec, rng: &mut R) -> GraphBundle {
    let (n, k) = (spec.nodes, spec.classes.max(1));
    let labels: Vec<u16> = (0..n).map(|_| rng.random_range(0..k) as u16).collect();
    let mut by_class = vec![Vec::new(); k];
    for (v, &y) in labels.iter().enumerate() {
        by_class[y as usize].push(v);
    }

    let mut pairs = BTreeSet::new();
    let per_node = (spec.avg_degree / 2.0).max(0.0);
    for v in 0..n {
        let mut m = per_node.floor() as usize;
        if rng.random::<f64>() < per_node.fract() {
            m += 1;
        }
        for _ in 0..m {
            let same = &by_class[labels[v] as usize];
            let u = if rng.random::<f64>() < spec.homophily && same.len() > 1 {
                same[rng.random_range(0..same.len())]
            } else {
                rng.random_range(0..n)
            };
            if u != v {
                pairs.insert((u.min(v) as u32, u.max(v) as u32));
            }
        }
    }
    let edges: Vec<(u32, u32)> = pairs.iter().flat_map(|&(a, b)| [(a, b), (b, a)]).collect();
    let csr = Csr::from_edges(n, &edges).expect("generated endpoints are in range");

    let centroids = Array2::from_shape_fn((k, spec.feature_dim), |_| normal(rng));
    let features = Array2::from_shape_fn((n, spec.feature_dim), |(v, j)| {
        centroids[[labels[v] as usize, j]] + spec.noise * normal(rng)
    });

    let mut train = vec![false; n];
    let mut val = vec![false; n];
    let mut test = vec![false; n];
    for v in 0..n {
        let r: f64 = rng.random();
        if r < spec.train_frac {
            train[v] = true;
        } else if r < spec.train_frac + spec.val_frac {
            val[v] = true;
        } else {
            test[v] = true;
        }
    }
    let masks = vec![("train".into(), train), ("val".into(), val), ("test".into(), test)];
    GraphBundle::new(k, csr, features, labels, masks).expect("generated bundle is valid")
}

fn with_bias(x: Matrix) -> Matrix {
    let ones = Array2::ones((x.nrows(), 1));
    concatenate![Axis(1), x, ones]
}

fn rows(m: &Matrix, idx: &[u32]) -> Matrix {
    m.select(Axis(0), &idx.iter().map(|&v| v as usize).collect::<Vec<_>>())
}

/// Random parent of the given widths whose output layer is ridge-fitted to
/// one-hot labels of `train_nodes`. GAT output attention is flattened to
/// uniform weights so the readout stays linear in its parameters.
pub fn fit_parent<R: Rng + ?Sized>(
    arch: Arch,
    bundle: &GraphBundle,
    train_nodes: &[u32],
    dims: &[usize],
    opts: &InitOptions,
    rng: &mut R,
) -> Result<ParentModel> {
    let mut model = ParentModel::random(arch, dims, opts, rng);
    let g = bundle.view();
    let last = model.layers.len() - 1;
    let h = model.forward(g)?.inputs[last].clone();
    let h = ops::standard(h);
    let k = bundle.num_classes();
    let labels = bundle.labels();
    let mut target = Array2::<f64>::zeros((train_nodes.len(), k));
    for (i, &v) in train_nodes.iter().enumerate() {
        target[[i, labels[v as usize] as usize]] = 1.0;
    }
    let lambda = 1e-2;
    let f32ish = |x: f64| x as f32 as f64;
    let split = |sol: &Matrix, at: usize| (sol.slice(s![..at, ..]).mapv(f32ish), sol.row(at).mapv(f32ish));

    match &mut model.layers[last] {
        LayerSpec::Gcn { w, b } => {
            let design = with_bias(ops::propagate_gcn(g.csr, &h));
            let sol = ridge_solve(&rows(&design, train_nodes), &target, lambda)?;
            (*w, *b) = split(&sol, h.ncols());
        }
        LayerSpec::Sage { w_root, w_neigh, b } => {
            let design = with_bias(concatenate![Axis(1), h, ops::aggregate_mean(g.csr, &h)]);
            let sol = ridge_solve(&rows(&design, train_nodes), &target, lambda)?;
            let d = h.ncols();
            *w_root = sol.slice(s![..d, ..]).mapv(f32ish);
            *w_neigh = sol.slice(s![d..2 * d, ..]).mapv(f32ish);
            *b = sol.row(2 * d).mapv(f32ish);
        }
        LayerSpec::Gat { w, att, b } => {
            att.a_src.fill(0.0);
            att.a_dst.fill(0.0);
            let design = with_bias(ops::aggregate_mean(g.csr, &h));
            let sol = ridge_solve(&rows(&design, train_nodes), &target, lambda)?;
            let (wk, bk) = split(&sol, h.ncols());
            let heads = att.heads;
            *w = concatenate(Axis(1), &vec![wk.view(); heads]).expect("same shapes");
            if att.concat {
                *b = ndarray::Array1::from_iter(bk.iter().copied().cycle().take(heads * k));
            } else {
                *b = bk;
            }
        }
        LayerSpec::Gin { eps, mlp } => {
            let agg = ops::aggregate_sum(g.csr, &h) + &(&h * (1.0 + *eps));
            let mut inner = agg;
            let n_sub = mlp.layers.len();
            for lin in &mlp.layers[..n_sub - 1] {
                inner = lin.apply(&inner).mapv(|x| x.max(0.0));
            }
            let design = with_bias(inner);
            let sol = ridge_solve(&rows(&design, train_nodes), &target, lambda)?;
            let d = design.ncols() - 1;
            let (wk, bk) = split(&sol, d);
            let out = &mut mlp.layers[n_sub - 1];
            out.w = wk;
            out.b = bk;
        }
    }
    model.validate()?;
    Ok(model)
}

/// Accuracy of `logits` argmax over `nodes`.
pub fn accuracy(logits: &Matrix, labels: &[u16], nodes: &[u32]) -> f64 {
    if nodes.is_empty() {
        return f64::NAN;
    }
    let hits = nodes
        .iter()
        .filter(|&&v| crate::linalg::argmax(logits.row(v as usize)) == labels[v as usize] as usize)
        .count();
    hits as f64 / nodes.len() as f64
}
