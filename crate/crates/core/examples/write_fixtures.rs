//! Writes a synthetic bundle, a specialist split and two fitted parent
//! checkpoints to disk, in the on-disk formats the CLI reads.
//!
//! `cargo run --example write_fixtures -- OUT_DIR [arch_a] [arch_b] [nodes]`
//!
//! Layout: `OUT/bundle/`, `OUT/split/split.json`, `OUT/parent_a/`, `OUT/parent_b/`.

use std::path::PathBuf;

use hgrama::graph::{build_specialist_split, default_class_groups, save_bundle};
use hgrama::model::{save_checkpoint, InitOptions};
use hgrama::synthetic::{fit_parent, sbm_bundle, SbmSpec};
use hgrama::Arch;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> hgrama::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().map_or("fixtures", String::as_str));
    let arch_a: Arch = args.get(1).map_or("gcn", String::as_str).parse()?;
    let arch_b: Arch = args.get(2).map_or("sage", String::as_str).parse()?;
    let nodes: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1500);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = SbmSpec { nodes, classes: 6, feature_dim: 24, ..Default::default() };
    let bundle = sbm_bundle(&spec, &mut rng);
    let split = build_specialist_split(&bundle, &default_class_groups(spec.classes), 0.8, 7)?;

    let opts = InitOptions { heads: 2, ..Default::default() };
    let dims = [spec.feature_dim, 32, spec.classes];
    let a = fit_parent(arch_a, &bundle, &split.a_train, &dims, &opts, &mut rng)?;
    let b = fit_parent(arch_b, &bundle, &split.b_train, &dims, &opts, &mut rng)?;

    save_bundle(&bundle, out.join("bundle"))?;
    std::fs::create_dir_all(out.join("split")).map_err(|e| hgrama::Error::Io { path: out.join("split"), source: e })?;
    split.save(out.join("split").join("split.json"))?;
    save_checkpoint(&a, out.join("parent_a"))?;
    save_checkpoint(&b, out.join("parent_b"))?;
    println!("wrote {} ({arch_a}, {arch_b}, {nodes} nodes)", out.display());
    Ok(())
}
