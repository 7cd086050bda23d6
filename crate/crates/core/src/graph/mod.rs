//! Graph bundles: CSR adjacency, node features, labels and masks.
//!
//! A [`GraphBundle`] is immutable after construction. Merge-time code only
//! ever sees a [`GraphView`], which exposes structure and features but no
//! labels or masks.

mod buckets;
mod io;
mod split;

use std::sync::atomic::{AtomicUsize, Ordering};

pub use buckets::{degree_buckets, BucketAssignment};
pub use io::{load_bundle, save_bundle};
pub use split::{build_specialist_split, default_class_groups, parse_class_groups, SpecialistSplit};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Incoming adjacency: for destination `v`, `sources(v)` lists every `u`
/// with an edge `u -> v`, ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    offsets: Vec<usize>,
    sources: Vec<u32>,
    gcn_scale: Vec<f64>,
}

impl Csr {
    /// Builds from `(src, dst)` pairs. Duplicate edges are kept.
    pub fn from_edges(num_nodes: usize, edges: &[(u32, u32)]) -> Result<Self> {
        for &(s, d) in edges {
            if s as usize >= num_nodes || d as usize >= num_nodes {
                return Err(Error::invalid(format!(
                    "edge {s}->{d} has an endpoint outside 0..{num_nodes}"
                )));
            }
        }
        let mut sorted = edges.to_vec();
        sorted.sort_unstable_by_key(|&(s, d)| (d, s));
        let mut offsets = vec![0usize; num_nodes + 1];
        for &(_, d) in &sorted {
            offsets[d as usize + 1] += 1;
        }
        for v in 0..num_nodes {
            offsets[v + 1] += offsets[v];
        }
        let sources = sorted.into_iter().map(|(s, _)| s).collect();
        Ok(Self::from_parts(offsets, sources))
    }

    fn from_parts(offsets: Vec<usize>, sources: Vec<u32>) -> Self {
        let n = offsets.len() - 1;
        let gcn_scale = (0..n)
            .map(|v| 1.0 / ((offsets[v + 1] - offsets[v]) as f64 + 1.0).sqrt())
            .collect();
        Csr {
            offsets,
            sources,
            gcn_scale,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_edges(&self) -> usize {
        self.sources.len()
    }

    #[inline]
    pub fn sources(&self, v: usize) -> &[u32] {
        &self.sources[self.offsets[v]..self.offsets[v + 1]]
    }

    /// Index of `v`'s first incoming edge in edge order.
    #[inline]
    pub fn edge_start(&self, v: usize) -> usize {
        self.offsets[v]
    }

    #[inline]
    pub fn in_degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    /// `1/sqrt(1 + in_degree)`: the symmetric GCN normalization with a self loop.
    #[inline]
    pub fn gcn_scale(&self, v: usize) -> f64 {
        self.gcn_scale[v]
    }

    /// Edges in canonical order (by destination, then source).
    pub fn edges(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (0..self.num_nodes()).flat_map(move |v| self.sources(v).iter().map(move |&u| (u, v as u32)))
    }
}

/// Structure and features only. This is what every merge phase receives.
#[derive(Debug, Clone, Copy)]
pub struct GraphView<'a> {
    pub csr: &'a Csr,
    pub features: &'a Matrix,
}

impl GraphView<'_> {
    pub fn num_nodes(&self) -> usize {
        self.csr.num_nodes()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }
}

#[derive(Debug)]
pub struct GraphBundle {
    num_classes: usize,
    csr: Csr,
    features: Matrix,
    labels: Vec<u16>,
    masks: Vec<(String, Vec<bool>)>,
    label_reads: AtomicUsize,
}

impl Clone for GraphBundle {
    fn clone(&self) -> Self {
        GraphBundle {
            num_classes: self.num_classes,
            csr: self.csr.clone(),
            features: self.features.clone(),
            labels: self.labels.clone(),
            masks: self.masks.clone(),
            label_reads: AtomicUsize::new(0),
        }
    }
}

impl GraphBundle {
    /// Validates and assembles a bundle. Feature values are stored at
    /// `f32` precision, matching the on-disk format.
    pub fn new(
        num_classes: usize,
        csr: Csr,
        mut features: Matrix,
        labels: Vec<u16>,
        masks: Vec<(String, Vec<bool>)>,
    ) -> Result<Self> {
        let n = csr.num_nodes();
        if features.nrows() != n {
            return Err(Error::dims(format!(
                "features have {} rows for {n} nodes",
                features.nrows()
            )));
        }
        if labels.len() != n {
            return Err(Error::dims(format!("{} labels for {n} nodes", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&y| y as usize >= num_classes) {
            return Err(Error::invalid(format!("label {bad} outside 0..{num_classes}")));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("feature matrix contains NaN or Inf"));
        }
        for (name, mask) in &masks {
            if mask.len() != n {
                return Err(Error::dims(format!("mask `{name}` has length {}", mask.len())));
            }
        }
        let find = |name: &str| masks.iter().find(|(m, _)| m == name).map(|(_, v)| v);
        if let (Some(train), Some(test)) = (find("train"), find("test")) {
            if train.iter().zip(test).any(|(a, b)| *a && *b) {
                return Err(Error::invalid("train and test masks overlap"));
            }
        }
        features.mapv_inplace(|x| x as f32 as f64);
        Ok(GraphBundle {
            num_classes,
            csr,
            features,
            labels,
            masks,
            label_reads: AtomicUsize::new(0),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.csr.num_nodes()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn csr(&self) -> &Csr {
        &self.csr
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn view(&self) -> GraphView<'_> {
        GraphView {
            csr: &self.csr,
            features: &self.features,
        }
    }

    /// Node labels. Every call is counted for the label-freedom audit.
    pub fn labels(&self) -> &[u16] {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        &self.labels
    }

    /// Named boolean mask. Every call is counted for the label-freedom audit.
    pub fn mask(&self, name: &str) -> Option<&[bool]> {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        self.masks
            .iter()
            .find(|(m, _)| m == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn mask_names(&self) -> impl Iterator<Item = &str> {
        self.masks.iter().map(|(m, _)| m.as_str())
    }

    /// Number of label or mask reads since construction.
    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::Relaxed)
    }

    pub(crate) fn raw_parts(&self) -> (&[u16], &[(String, Vec<bool>)]) {
        (&self.labels, &self.masks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn path3() -> Csr {
        Csr::from_edges(3, &[(0, 1), (1, 0), (1, 2), (2, 1)]).unwrap()
    }

    #[test]
    fn csr_rows_are_sorted_sources() {
        let csr = path3();
        assert_eq!(csr.sources(0), &[1]);
        assert_eq!(csr.sources(1), &[0, 2]);
        assert_eq!(csr.sources(2), &[1]);
        assert_eq!(csr.num_edges(), 4);
        assert!((csr.gcn_scale(1) - 1.0 / 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn dangling_edge_rejected() {
        assert!(Csr::from_edges(2, &[(0, 2)]).is_err());
    }

    #[test]
    fn overlapping_train_test_rejected() {
        let masks = vec![
            ("train".to_string(), vec![true, false, false]),
            ("test".to_string(), vec![true, true, false]),
        ];
        let err = GraphBundle::new(2, path3(), Array2::zeros((3, 2)), vec![0, 1, 0], masks);
        assert!(err.is_err());
    }

    #[test]
    fn non_finite_features_rejected() {
        let mut x = Array2::zeros((3, 2));
        x[[1, 1]] = f64::NAN;
        assert!(GraphBundle::new(2, path3(), x, vec![0, 1, 0], vec![]).is_err());
    }

    #[test]
    fn label_reads_are_counted() {
        let b = GraphBundle::new(2, path3(), Array2::zeros((3, 2)), vec![0, 1, 0], vec![]).unwrap();
        let _ = b.view();
        assert_eq!(b.label_reads(), 0);
        let _ = b.labels();
        let _ = b.mask("train");
        assert_eq!(b.label_reads(), 2);
    }
}
