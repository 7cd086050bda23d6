use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Csr, GraphBundle};
use crate::binio::{
    f32_matrix, push_f32_matrix, push_header, read_file, read_json, split_header, write_file,
    write_json,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BundleFiles {
    pub edges: String,
    pub features: String,
    pub labels: String,
    pub masks: String,
}

impl Default for BundleFiles {
    fn default() -> Self {
        BundleFiles {
            edges: "edges.bin".into(),
            features: "features.bin".into(),
            labels: "labels.bin".into(),
            masks: "masks.bin".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BundleManifest {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    #[serde(default)]
    pub files: BundleFiles,
    pub mask_names: Vec<String>,
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<GraphBundle> {
    let dir = dir.as_ref();
    let manifest: BundleManifest = read_json(&dir.join("manifest.json"))?;
    let n = manifest.num_nodes;

    let edge_bytes = read_file(&dir.join(&manifest.files.edges))?;
    if edge_bytes.len() % 8 != 0 {
        return Err(Error::dims("edges.bin length is not a multiple of 8"));
    }
    let edges: Vec<(u32, u32)> = edge_bytes
        .chunks_exact(8)
        .map(|c| {
            (
                u32::from_le_bytes(c[0..4].try_into().unwrap()),
                u32::from_le_bytes(c[4..8].try_into().unwrap()),
            )
        })
        .collect();
    let csr = Csr::from_edges(n, &edges)?;

    let bytes = read_file(&dir.join(&manifest.files.features))?;
    let (rows, cols, payload) = split_header(&bytes, "features.bin")?;
    if rows != n || cols != manifest.feature_dim {
        return Err(Error::dims(format!(
            "features.bin is {rows}x{cols}, manifest says {n}x{}",
            manifest.feature_dim
        )));
    }
    let features = f32_matrix(payload, rows, cols, "features.bin")?;

    let bytes = read_file(&dir.join(&manifest.files.labels))?;
    let (rows, cols, payload) = split_header(&bytes, "labels.bin")?;
    if rows != n || cols != 1 || payload.len() != n * 2 {
        return Err(Error::dims(format!("labels.bin is {rows}x{cols}, expected {n}x1")));
    }
    let labels = payload
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();

    let bytes = read_file(&dir.join(&manifest.files.masks))?;
    let (rows, cols, payload) = split_header(&bytes, "masks.bin")?;
    if rows != manifest.mask_names.len() || cols != n || payload.len() != rows * cols {
        return Err(Error::dims(format!(
            "masks.bin is {rows}x{cols}, expected {}x{n}",
            manifest.mask_names.len()
        )));
    }
    let masks = manifest
        .mask_names
        .iter()
        .zip(payload.chunks_exact(n.max(1)))
        .map(|(name, row)| (name.clone(), row.iter().map(|&b| b != 0).collect()))
        .collect();

    GraphBundle::new(manifest.num_classes, csr, features, labels, masks)
}

/// Writes the canonical form: edges ordered by destination then source.
pub fn save_bundle(bundle: &GraphBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (labels, masks) = bundle.raw_parts();
    let n = bundle.num_nodes();
    let manifest = BundleManifest {
        num_nodes: n,
        num_classes: bundle.num_classes(),
        feature_dim: bundle.feature_dim(),
        files: BundleFiles::default(),
        mask_names: masks.iter().map(|(m, _)| m.clone()).collect(),
    };

    let mut edges = Vec::with_capacity(bundle.csr().num_edges() * 8);
    for (s, d) in bundle.csr().edges() {
        edges.extend_from_slice(&s.to_le_bytes());
        edges.extend_from_slice(&d.to_le_bytes());
    }

    let mut feats = Vec::new();
    push_header(&mut feats, n, bundle.feature_dim());
    push_f32_matrix(&mut feats, bundle.features());

    let mut labs = Vec::new();
    push_header(&mut labs, n, 1);
    for y in labels {
        labs.extend_from_slice(&y.to_le_bytes());
    }

    let mut mask_bytes = Vec::new();
    push_header(&mut mask_bytes, masks.len(), n);
    for (_, m) in masks {
        mask_bytes.extend(m.iter().map(|&b| b as u8));
    }

    write_json(&dir.join("manifest.json"), &manifest)?;
    write_file(&dir.join(&manifest.files.edges), &edges)?;
    write_file(&dir.join(&manifest.files.features), &feats)?;
    write_file(&dir.join(&manifest.files.labels), &labs)?;
    write_file(&dir.join(&manifest.files.masks), &mask_bytes)
}
