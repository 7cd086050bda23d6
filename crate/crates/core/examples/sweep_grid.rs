//! A small depth/width grid: writes a bundle, split and parents for every
//! cell to a directory, then runs the resumable sweep and prints the
//! summary. Running it again only fills in cells that are not done.
//!
//! `cargo run --release --example sweep_grid -- [out_dir]`

use std::path::PathBuf;

use hgrama::eval::{summarize, sweep, SweepCell, SweepGrid};
use hgrama::graph::{build_specialist_split, default_class_groups, save_bundle};
use hgrama::model::{save_checkpoint, InitOptions};
use hgrama::pipeline::RunConfig;
use hgrama::synthetic::{fit_parent, sbm_bundle, SbmSpec};
use hgrama::Arch;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> hgrama::Result<()> {
    env_logger::init();
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "sweep_out".into()));
    let io = |e| hgrama::Error::Io { path: dir.clone(), source: e };
    std::fs::create_dir_all(&dir).map_err(io)?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spec = SbmSpec { nodes: 1200, classes: 6, feature_dim: 24, ..Default::default() };
    let bundle = sbm_bundle(&spec, &mut rng);
    let split = build_specialist_split(&bundle, &default_class_groups(spec.classes), 0.8, 8)?;
    save_bundle(&bundle, dir.join("bundle"))?;
    split.save(dir.join("split.json"))?;

    let opts = InitOptions { heads: 2, ..Default::default() };
    let mut cells = Vec::new();
    for (arch_a, arch_b) in [(Arch::Gcn, Arch::Gat), (Arch::Sage, Arch::Gin)] {
        for (depth_a, depth_b) in [(2, 2), (2, 3)] {
            for width in [32, 64] {
                for seed in 0..2u64 {
                    let dims = |depth: usize| {
                        let mut d = vec![spec.feature_dim];
                        d.extend(std::iter::repeat(width).take(depth - 1));
                        d.push(spec.classes);
                        d
                    };
                    let name = format!("{arch_a}{depth_a}-{arch_b}{depth_b}-w{width}-s{seed}");
                    let (pa, pb) = (format!("parents/{name}/a"), format!("parents/{name}/b"));
                    if !dir.join(&pa).exists() {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        save_checkpoint(&fit_parent(arch_a, &bundle, &split.a_train, &dims(depth_a), &opts, &mut rng)?, dir.join(&pa))?;
                        save_checkpoint(&fit_parent(arch_b, &bundle, &split.b_train, &dims(depth_b), &opts, &mut rng)?, dir.join(&pb))?;
                    }
                    cells.push(SweepCell {
                        pair: format!("{arch_a}-{arch_b}"),
                        depth_a,
                        depth_b,
                        width_a: width,
                        width_b: width,
                        seed,
                        parent_a: pa.into(),
                        parent_b: pb.into(),
                        split: None,
                    });
                }
            }
        }
    }
    let grid = SweepGrid {
        bundle: "bundle".into(),
        split: Some("split.json".into()),
        cells,
        config: RunConfig::default(),
        repeats: 3,
        warmup: 1,
    };
    let grid_path = dir.join("grid.json");
    std::fs::write(&grid_path, serde_json::to_string_pretty(&grid).expect("grid serializes")).map_err(io)?;

    let out = dir.join("results.csv");
    let rows = sweep(&SweepGrid::load(&grid_path)?, &out)?;
    println!("{} rows in {}", rows.len(), out.display());
    println!("{:<10} {:>7} {:>5} {:>15} {:>8}", "pair", "depths", "width", "min ret", "speedup");
    for r in summarize(&rows) {
        let ret = r.min_ret_mean.zip(r.min_ret_std).map_or("-".into(), |(m, s)| format!("{m:.3} +- {s:.3}"));
        let sp = r.speedup_mean.map_or("-".into(), |m| format!("{m:.2}x"));
        println!("{:<10} {:>4}-{:<2} {:>5} {:>15} {:>8}", r.pair, r.depth_a, r.depth_b, r.width_a, ret, sp);
    }
    Ok(())
}
