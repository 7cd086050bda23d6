//! Parameter transport is a change of coordinates. Relabeling the hidden
//! units of a parent (a permutation that keeps attention heads together,
//! so it commutes with activations and head structure) leaves the logits
//! unchanged, and alignment recovers the relabeling from activations alone.
//!
//! `cargo run --example transport_parent -- [arch]`

use hgrama::alignment::{build_plan, AlignConfig};
use hgrama::linalg::max_abs_diff;
use hgrama::model::InitOptions;
use hgrama::synthetic::{sbm_bundle, SbmSpec};
use hgrama::transport::{transport_layer, transport_model};
use hgrama::umpm::canonicalize;
use hgrama::{Arch, GraphModel, ParentModel, UmpmModel};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> hgrama::Result<()> {
    let arch: Arch = std::env::args().nth(1).as_deref().unwrap_or("gat").parse()?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let bundle = sbm_bundle(&SbmSpec { nodes: 400, feature_dim: 48, ..Default::default() }, &mut rng);
    let g = bundle.view();
    let opts = InitOptions { heads: 4, gin_eps: 0.1, ..Default::default() };
    // inputs wider than the hidden layers keep every hidden space full rank,
    // otherwise the relabeling is only determined on the occupied subspace
    let dims = [48, 32, 32, 4];
    let a = canonicalize(&ParentModel::random(arch, &dims, &opts, &mut rng))?;

    // relabel hidden units; input and output stay fixed
    let maps: Vec<Array2<f64>> = dims
        .iter()
        .enumerate()
        .map(|(i, &d)| if i == 0 || i + 1 == dims.len() { Array2::eye(d) } else { head_permutation(d, opts.heads, &mut rng) })
        .collect();
    let mut rotated = UmpmModel { layers: Vec::new(), ..a.clone() };
    for (l, layer) in a.layers.iter().enumerate() {
        let inner: Option<Vec<Array2<f64>>> = layer.post_mlp.as_ref().map(|m| {
            m.layers[..m.layers.len() - 1].iter().map(|lin| Array2::eye(lin.w.ncols())).collect()
        });
        let (moved, att) = transport_layer(layer, &maps[l], &maps[l + 1], inner.as_deref())?;
        if let Some(att) = att {
            println!("layer {l}: attention transported as {att:?}");
        }
        rotated.layers.push(moved);
    }
    let (la, lr) = (a.forward(g)?, rotated.forward(g)?);
    println!("{arch}: logits after relabeling hidden units differ by {:.2e}", max_abs_diff(la.logits().view(), lr.logits().view()));

    // alignment sees only activations, and maps the rotated copy back
    let plan = build_plan(&rotated, &lr, &a, &la, &AlignConfig::default())?;
    let back = transport_model(&rotated, &plan)?;
    let lb = back.model.forward(g)?;
    for (t, r) in plan.boundary_maps.iter().enumerate().skip(1).take(dims.len() - 2) {
        let err = max_abs_diff(r.view(), maps[t].t().view());
        println!("boundary {t}: recovered map vs planted inverse, max entry error {err:.2e}");
    }
    let worst = (1..lb.pre.len()).map(|t| max_abs_diff(lb.pre[t].view(), la.pre[t].view())).fold(0.0, f64::max);
    println!("mapped back: pre-activations differ by at most {worst:.2e}");
    Ok(())
}

/// Permutation matrix that shuffles whole blocks of `d / heads` units and
/// the units inside each block.
fn head_permutation(d: usize, heads: usize, rng: &mut impl Rng) -> Array2<f64> {
    let size = d / heads;
    let mut blocks: Vec<usize> = (0..heads).collect();
    blocks.shuffle(rng);
    let mut p = Array2::zeros((d, d));
    for (dst, &src) in blocks.iter().enumerate() {
        let mut inner: Vec<usize> = (0..size).collect();
        inner.shuffle(rng);
        for (j, &i) in inner.iter().enumerate() {
            p[[src * size + i, dst * size + j]] = 1.0;
        }
    }
    p
}
