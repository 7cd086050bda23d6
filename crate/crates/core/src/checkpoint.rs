//! Checkpoint container: `model.json` metadata plus `tensors.bin`, a
//! concatenation of little-endian f32 blobs whose names, shapes and byte
//! offsets are listed in the manifest.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, read_json, write_file, write_json};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Serialize)]
struct ManifestOut<'a, M> {
    #[serde(flatten)]
    meta: &'a M,
    tensors: Vec<TensorEntry>,
}

#[derive(Deserialize)]
struct ManifestIn<M> {
    #[serde(flatten)]
    meta: M,
    tensors: Vec<TensorEntry>,
}

/// Ordered named tensors, held at f64 and stored at f32.
#[derive(Debug, Default, Clone)]
pub struct TensorStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    data: Vec<Vec<f64>>,
    used: std::cell::RefCell<BTreeSet<usize>>,
}

impl TensorStore {
    pub fn put_matrix(&mut self, name: impl Into<String>, m: &Matrix) {
        self.names.push(name.into());
        self.shapes.push(vec![m.nrows(), m.ncols()]);
        self.data.push(m.iter().copied().collect());
    }

    pub fn put_vector(&mut self, name: impl Into<String>, v: &Vector) {
        self.names.push(name.into());
        self.shapes.push(vec![v.len()]);
        self.data.push(v.to_vec());
    }

    fn find(&self, name: &str) -> Result<usize> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::invalid(format!("checkpoint has no tensor `{name}`")))?;
        self.used.borrow_mut().insert(i);
        Ok(i)
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let i = self.find(name)?;
        match self.shapes[i][..] {
            [r, c] => Ok(Array2::from_shape_vec((r, c), self.data[i].clone()).expect("shape")),
            _ => Err(Error::dims(format!("tensor `{name}` is not a matrix"))),
        }
    }

    pub fn vector(&self, name: &str) -> Result<Vector> {
        let i = self.find(name)?;
        match self.shapes[i][..] {
            [_] => Ok(Array1::from_vec(self.data[i].clone())),
            _ => Err(Error::dims(format!("tensor `{name}` is not a vector"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    /// Errors if any stored tensor was never read.
    pub fn ensure_all_used(&self) -> Result<()> {
        let used = self.used.borrow();
        if used.len() != self.names.len() {
            let extra: Vec<&str> = (0..self.names.len())
                .filter(|i| !used.contains(i))
                .map(|i| self.names[i].as_str())
                .collect();
            return Err(Error::invalid(format!(
                "tensor count mismatch: unused tensors {extra:?}"
            )));
        }
        Ok(())
    }

    pub fn save<M: Serialize>(&self, dir: &Path, meta: &M) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.save_files(&dir.join("model.json"), &dir.join("tensors.bin"), meta)
    }

    /// Like [`save`](Self::save) with explicit manifest and blob paths.
    pub fn save_files<M: Serialize>(&self, json: &Path, bin: &Path, meta: &M) -> Result<()> {
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.names.len());
        for ((name, shape), data) in self.names.iter().zip(&self.shapes).zip(&self.data) {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset: blob.len(),
            });
            for x in data {
                blob.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        write_json(
            json,
            &ManifestOut {
                meta,
                tensors: entries,
            },
        )?;
        write_file(bin, &blob)
    }

    pub fn load<M: DeserializeOwned>(dir: &Path) -> Result<(M, TensorStore)> {
        Self::load_files(&dir.join("model.json"), &dir.join("tensors.bin"))
    }

    pub fn load_files<M: DeserializeOwned>(json: &Path, bin: &Path) -> Result<(M, TensorStore)> {
        let manifest: ManifestIn<M> = read_json(json)?;
        let blob = read_file(bin)?;
        let mut store = TensorStore::default();
        let mut covered = 0usize;
        for e in manifest.tensors {
            let len: usize = e.shape.iter().product();
            let end = e.offset + len * 4;
            if end > blob.len() {
                return Err(Error::dims(format!(
                    "tensor `{}` runs past the end of tensors.bin",
                    e.name
                )));
            }
            let data = blob[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            covered += len * 4;
            store.names.push(e.name);
            store.shapes.push(e.shape);
            store.data.push(data);
        }
        if covered != blob.len() {
            return Err(Error::invalid(format!(
                "tensor count mismatch: manifest covers {covered} of {} bytes",
                blob.len()
            )));
        }
        Ok((manifest.meta, store))
    }
}

/// Reads only the `arch` tag of a checkpoint directory.
pub fn read_arch(dir: &Path) -> Result<String> {
    #[derive(Deserialize)]
    struct Tag {
        arch: String,
    }
    let tag: Tag = read_json(&dir.join("model.json"))?;
    Ok(tag.arch)
}
