//! Rewrites each architecture as a gated operator mixture and checks the
//! rewrite against the native forward pass.
//!
//! `cargo run --example canonicalize_parents`

use hgrama::model::InitOptions;
use hgrama::synthetic::{sbm_bundle, SbmSpec};
use hgrama::umpm::canonicalize_verified;
use hgrama::{Arch, ParentModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> hgrama::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let bundle = sbm_bundle(&SbmSpec { nodes: 300, ..Default::default() }, &mut rng);
    let opts = InitOptions { heads: 4, gin_eps: 0.1, ..Default::default() };

    for arch in [Arch::Gcn, Arch::Gat, Arch::Sage, Arch::Gin] {
        let parent = ParentModel::random(arch, &[16, 32, 32, 4], &opts, &mut rng);
        let (umpm, dev) = canonicalize_verified(&parent, bundle.view(), 1e-5)?;
        println!("{arch}: max |native - canonical| = {dev:.2e}");
        for (l, layer) in umpm.layers.iter().enumerate() {
            let bases: Vec<String> = layer.present().map(|b| format!("{b}={:.2}", layer.gate(b))).collect();
            let psi = if layer.post_mlp.is_some() { " + update mlp" } else { "" };
            println!("  layer {l}: {} -> {}  [{}]{psi}", layer.in_dim(), layer.out_dim(), bases.join(" "));
        }
    }
    Ok(())
}
