//! One merged child against the two-parent ensemble on a larger graph:
//! median wall time over interleaved repeats.
//!
//! `cargo run --release --example speedup_vs_ensemble -- [nodes] [arch_a] [arch_b]`

use hgrama::eval::speedup;
use hgrama::model::InitOptions;
use hgrama::pipeline::{run_merge_pipeline, RunConfig};
use hgrama::synthetic::{sbm_bundle, SbmSpec};
use hgrama::umpm::AnyModel;
use hgrama::{Arch, ParentModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> hgrama::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let nodes: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(50_000);
    let arch_a: Arch = args.get(1).map_or("gcn", String::as_str).parse()?;
    let arch_b: Arch = args.get(2).map_or("sage", String::as_str).parse()?;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let spec = SbmSpec { nodes, classes: 8, feature_dim: 64, avg_degree: 10.0, ..Default::default() };
    let bundle = sbm_bundle(&spec, &mut rng);
    let opts = InitOptions { heads: 4, ..Default::default() };
    let dims = [spec.feature_dim, 64, 64, spec.classes];
    let a = AnyModel::Parent(ParentModel::random(arch_a, &dims, &opts, &mut rng));
    let b = AnyModel::Parent(ParentModel::random(arch_b, &dims, &opts, &mut rng));

    let t = std::time::Instant::now();
    let out = run_merge_pipeline(bundle.view(), &a, &b, &RunConfig::default())?;
    println!("{arch_a} + {arch_b} on {nodes} nodes, {} edges", bundle.csr().num_edges());
    println!("merge took {:.2} s", t.elapsed().as_secs_f64());

    let r = speedup(&out.child, a.as_model(), b.as_model(), bundle.view(), 7, 2)?;
    println!("child {:.1} ms, ensemble {:.1} ms, speedup {:.2}x", r.child_ms, r.ensemble_ms, r.speedup);
    Ok(())
}
