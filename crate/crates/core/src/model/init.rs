use ndarray::{Array1, Array2};
use rand::Rng;

use super::{Arch, LayerSpec, Linear, Mlp, ParentModel};
use crate::linalg::{Matrix, Vector};
use crate::ops::Attention;

/// Knobs for random parents (used by tests, examples and benchmarks).
#[derive(Debug, Clone)]
pub struct InitOptions {
    pub heads: usize,
    pub leaky_slope: f64,
    pub gin_eps: f64,
    pub bias_scale: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions {
            heads: 8,
            leaky_slope: 0.2,
            gin_eps: 0.0,
            bias_scale: 0.1,
        }
    }
}

/// Glorot-uniform entries drawn at f32 precision so checkpoints round-trip exactly.
pub(crate) fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        rng.random_range(-limit..limit) as f32 as f64
    })
}

fn bias<R: Rng + ?Sized>(n: usize, scale: f64, rng: &mut R) -> Vector {
    if scale == 0.0 {
        return Array1::zeros(n);
    }
    Array1::from_shape_fn(n, |_| rng.random_range(-scale..scale) as f32 as f64)
}

/// Largest head count `<= wanted` that divides `width`.
fn heads_for(width: usize, wanted: usize) -> usize {
    (1..=wanted.max(1)).rev().find(|h| width % h == 0).unwrap_or(1)
}

impl ParentModel {
    /// Random model with layer widths `dims = [in, hidden.., classes]`.
    /// GAT widths are total concatenated widths; the output layer averages
    /// heads of width `classes`.
    pub fn random<R: Rng + ?Sized>(arch: Arch, dims: &[usize], opts: &InitOptions, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "need at least input and output widths");
        let depth = dims.len() - 1;
        let layers = (0..depth)
            .map(|l| {
                let (din, dout) = (dims[l], dims[l + 1]);
                let last = l + 1 == depth;
                match arch {
                    Arch::Gcn => LayerSpec::Gcn {
                        w: glorot(din, dout, rng),
                        b: bias(dout, opts.bias_scale, rng),
                    },
                    Arch::Sage => LayerSpec::Sage {
                        w_root: glorot(din, dout, rng),
                        w_neigh: glorot(din, dout, rng),
                        b: bias(dout, opts.bias_scale, rng),
                    },
                    Arch::Gat => {
                        let (heads, head_dim) = if last {
                            (opts.heads.max(1), dout)
                        } else {
                            let h = heads_for(dout, opts.heads);
                            (h, dout / h)
                        };
                        LayerSpec::Gat {
                            w: glorot(din, heads * head_dim, rng),
                            att: Attention {
                                heads,
                                a_src: glorot(heads, head_dim, rng),
                                a_dst: glorot(heads, head_dim, rng),
                                concat: !last,
                                slope: opts.leaky_slope,
                            },
                            b: bias(dout, opts.bias_scale, rng),
                        }
                    }
                    Arch::Gin => LayerSpec::Gin {
                        eps: opts.gin_eps,
                        mlp: Mlp {
                            layers: vec![
                                Linear {
                                    w: glorot(din, dout, rng),
                                    b: bias(dout, opts.bias_scale, rng),
                                },
                                Linear {
                                    w: glorot(dout, dout, rng),
                                    b: bias(dout, opts.bias_scale, rng),
                                },
                            ],
                        },
                    },
                }
            })
            .collect();
        ParentModel::new(arch, layers, arch.default_activation()).expect("random model is well formed")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gat_head_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = ParentModel::random(Arch::Gat, &[5, 64, 7], &InitOptions::default(), &mut rng);
        match &m.layers[0] {
            LayerSpec::Gat { att, w, .. } => {
                assert_eq!((att.heads, att.head_dim(), att.concat), (8, 8, true));
                assert_eq!(w.dim(), (5, 64));
            }
            _ => unreachable!(),
        }
        match &m.layers[1] {
            LayerSpec::Gat { att, w, .. } => {
                assert_eq!((att.heads, att.head_dim(), att.concat), (8, 7, false));
                assert_eq!(w.dim(), (64, 56));
            }
            _ => unreachable!(),
        }
        assert_eq!(m.num_classes(), 7);
    }

    #[test]
    fn heads_divide_width() {
        assert_eq!(heads_for(64, 8), 8);
        assert_eq!(heads_for(12, 8), 6);
        assert_eq!(heads_for(7, 8), 7);
    }
}
