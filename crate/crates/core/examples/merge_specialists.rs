//! Two specialists on a planted-partition graph, merged without labels.
//!
//! `cargo run --release --example merge_specialists -- [arch_a] [arch_b] [seed]`

use hgrama::eval::retention;
use hgrama::graph::{build_specialist_split, default_class_groups};
use hgrama::model::InitOptions;
use hgrama::pipeline::{run_merge_pipeline, RunConfig};
use hgrama::synthetic::{fit_parent, sbm_bundle, SbmSpec};
use hgrama::umpm::AnyModel;
use hgrama::Arch;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> hgrama::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arch_a: Arch = args.first().map_or("gcn", String::as_str).parse()?;
    let arch_b: Arch = args.get(1).map_or("gat", String::as_str).parse()?;
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = SbmSpec { nodes: 2000, classes: 6, feature_dim: 32, ..Default::default() };
    let bundle = sbm_bundle(&spec, &mut rng);
    let split = build_specialist_split(&bundle, &default_class_groups(spec.classes), 0.8, seed)?;

    let opts = InitOptions { heads: 4, ..Default::default() };
    let dims = [spec.feature_dim, 64, spec.classes];
    let a = fit_parent(arch_a, &bundle, &split.a_train, &dims, &opts, &mut rng)?;
    let b = fit_parent(arch_b, &bundle, &split.b_train, &dims, &opts, &mut rng)?;
    let (a, b) = (AnyModel::Parent(a), AnyModel::Parent(b));

    let cfg = RunConfig::default();
    let out = run_merge_pipeline(bundle.view(), &a, &b, &cfg)?;
    let r = retention(&out.child, a.as_model(), b.as_model(), &bundle, &split)?;

    println!("{arch_a} + {arch_b}, seed {seed}");
    println!("alphas      {:?}", out.report.phases.fuse.alphas);
    for (l, f) in out.report.phases.fuse.layers.iter().enumerate() {
        println!("layer {l}     {:?} gates {:?}", f.kind, f.gates);
    }
    println!("parent acc  A {:.3}  B {:.3}", r.acc_parent_a, r.acc_parent_b);
    println!("child acc   A {:.3}  B {:.3}", r.acc_child_on_a_eval, r.acc_child_on_b_eval);
    println!("retention   A {:?}  B {:?}  min {:?}", r.ret_a, r.ret_b, r.min_ret);
    Ok(())
}
