//! Layer matching between a 2-layer and a 3-layer parent: CKA similarity,
//! the anchored monotone matching, the padded layout and the transport maps.
//!
//! `cargo run --example align_layers -- [gamma]`

use hgrama::alignment::{build_plan, AlignConfig};
use hgrama::model::InitOptions;
use hgrama::synthetic::{sbm_bundle, SbmSpec};
use hgrama::umpm::canonicalize;
use hgrama::{Arch, GraphModel, ParentModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> hgrama::Result<()> {
    let gamma: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let bundle = sbm_bundle(&SbmSpec { nodes: 500, ..Default::default() }, &mut rng);
    let g = bundle.view();
    let opts = InitOptions { heads: 4, ..Default::default() };

    let a = canonicalize(&ParentModel::random(Arch::Sage, &[16, 32, 4], &opts, &mut rng))?;
    let b = canonicalize(&ParentModel::random(Arch::Gcn, &[16, 48, 24, 4], &opts, &mut rng))?;
    let cfg = AlignConfig { gamma, ..Default::default() };
    let plan = build_plan(&a, &a.forward(g)?, &b, &b.forward(g)?, &cfg)?;

    println!("CKA (rows: A boundaries, cols: B boundaries)");
    for row in plan.cka.rows() {
        println!("  {}", row.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("  "));
    }
    println!("matches   {:?}", plan.matches);
    println!("layout    {:?}", plan.layout);
    println!("padding   A at {:?}, B at {:?}", plan.padding_a(), plan.padding_b());
    for m in plan.match_maps() {
        println!(
            "map {} -> {}: {:?}, {:?}, orthogonality error {:.1e}",
            m.src_layer,
            m.dst_layer,
            m.r.dim(),
            m.orientation(),
            m.orthogonality_error()
        );
    }
    Ok(())
}
