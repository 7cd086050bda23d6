use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Arch, LayerSpec, Linear, Mlp, ParentModel};
use crate::checkpoint::TensorStore;
use crate::error::{Error, Result};
use crate::ops::{Activation, Attention};

#[derive(Debug, Serialize, Deserialize)]
struct ParentMeta {
    arch: String,
    activation: Activation,
    in_dim: usize,
    num_classes: usize,
    layers: Vec<LayerMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LayerMeta {
    Gcn {
        in_dim: usize,
        out_dim: usize,
    },
    Sage {
        in_dim: usize,
        out_dim: usize,
    },
    Gat {
        in_dim: usize,
        out_dim: usize,
        heads: usize,
        concat: bool,
        leaky_slope: f64,
    },
    Gin {
        in_dim: usize,
        out_dim: usize,
        eps_gin: f64,
        mlp_dims: Vec<usize>,
    },
}

impl LayerMeta {
    fn in_dim(&self) -> usize {
        match self {
            LayerMeta::Gcn { in_dim, .. }
            | LayerMeta::Sage { in_dim, .. }
            | LayerMeta::Gat { in_dim, .. }
            | LayerMeta::Gin { in_dim, .. } => *in_dim,
        }
    }
}

pub fn save_checkpoint(model: &ParentModel, dir: impl AsRef<Path>) -> Result<()> {
    let mut store = TensorStore::default();
    let mut layers = Vec::with_capacity(model.layers.len());
    for (l, layer) in model.layers.iter().enumerate() {
        let (in_dim, out_dim) = (layer.in_dim(), layer.out_dim());
        let p = |name: &str| format!("layer{l}.{name}");
        match layer {
            LayerSpec::Gcn { w, b } => {
                store.put_matrix(p("W"), w);
                store.put_vector(p("b"), b);
                layers.push(LayerMeta::Gcn { in_dim, out_dim });
            }
            LayerSpec::Sage { w_root, w_neigh, b } => {
                store.put_matrix(p("W_root"), w_root);
                store.put_matrix(p("W_neigh"), w_neigh);
                store.put_vector(p("b"), b);
                layers.push(LayerMeta::Sage { in_dim, out_dim });
            }
            LayerSpec::Gat { w, att, b } => {
                store.put_matrix(p("W"), w);
                store.put_matrix(p("a_src"), &att.a_src);
                store.put_matrix(p("a_dst"), &att.a_dst);
                store.put_vector(p("b"), b);
                layers.push(LayerMeta::Gat {
                    in_dim,
                    out_dim,
                    heads: att.heads,
                    concat: att.concat,
                    leaky_slope: att.slope,
                });
            }
            LayerSpec::Gin { eps, mlp } => {
                let mut dims = vec![mlp.in_dim()];
                for (k, lin) in mlp.layers.iter().enumerate() {
                    store.put_matrix(p(&format!("mlp{k}.W")), &lin.w);
                    store.put_vector(p(&format!("mlp{k}.b")), &lin.b);
                    dims.push(lin.w.ncols());
                }
                layers.push(LayerMeta::Gin {
                    in_dim,
                    out_dim,
                    eps_gin: *eps,
                    mlp_dims: dims,
                });
            }
        }
    }
    let meta = ParentMeta {
        arch: model.arch.to_string(),
        activation: model.activation,
        in_dim: model.layers[0].in_dim(),
        num_classes: model.num_classes(),
        layers,
    };
    store.save(dir.as_ref(), &meta)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<ParentModel> {
    let (meta, store): (ParentMeta, TensorStore) = TensorStore::load(dir.as_ref())?;
    let arch: Arch = meta.arch.parse()?;
    if meta.layers.first().map(LayerMeta::in_dim) != Some(meta.in_dim) {
        return Err(Error::dims("manifest in_dim disagrees with the first layer"));
    }
    let mut layers = Vec::with_capacity(meta.layers.len());
    for (l, lm) in meta.layers.iter().enumerate() {
        let p = |name: &str| format!("layer{l}.{name}");
        let layer = match lm {
            LayerMeta::Gcn { .. } => LayerSpec::Gcn {
                w: store.matrix(&p("W"))?,
                b: store.vector(&p("b"))?,
            },
            LayerMeta::Sage { .. } => LayerSpec::Sage {
                w_root: store.matrix(&p("W_root"))?,
                w_neigh: store.matrix(&p("W_neigh"))?,
                b: store.vector(&p("b"))?,
            },
            LayerMeta::Gat {
                heads,
                concat,
                leaky_slope,
                ..
            } => LayerSpec::Gat {
                w: store.matrix(&p("W"))?,
                att: Attention {
                    heads: *heads,
                    a_src: store.matrix(&p("a_src"))?,
                    a_dst: store.matrix(&p("a_dst"))?,
                    concat: *concat,
                    slope: *leaky_slope,
                },
                b: store.vector(&p("b"))?,
            },
            LayerMeta::Gin {
                eps_gin, mlp_dims, ..
            } => {
                let depth = mlp_dims.len().saturating_sub(1);
                let layers = (0..depth)
                    .map(|k| {
                        Ok(Linear {
                            w: store.matrix(&p(&format!("mlp{k}.W")))?,
                            b: store.vector(&p(&format!("mlp{k}.b")))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                LayerSpec::Gin {
                    eps: *eps_gin,
                    mlp: Mlp { layers },
                }
            }
        };
        let (want_in, want_out) = match lm {
            LayerMeta::Gcn { in_dim, out_dim }
            | LayerMeta::Sage { in_dim, out_dim }
            | LayerMeta::Gat { in_dim, out_dim, .. }
            | LayerMeta::Gin { in_dim, out_dim, .. } => (*in_dim, *out_dim),
        };
        layer.check(l)?;
        if layer.in_dim() != want_in || layer.out_dim() != want_out {
            return Err(Error::dims(format!(
                "layer {l}: tensors are {}->{}, manifest says {want_in}->{want_out}",
                layer.in_dim(),
                layer.out_dim()
            )));
        }
        layers.push(layer);
    }
    store.ensure_all_used()?;
    let model = ParentModel::new(arch, layers, meta.activation)?;
    if model.num_classes() != meta.num_classes {
        return Err(Error::dims("manifest num_classes disagrees with the last layer"));
    }
    Ok(model)
}
