//! Ridge gate regression on a shared design: plant gates on a three-basis
//! layer, add noise, and recover them, with and without top-k pruning.
//!
//! `cargo run --example gate_regression -- [noise]`

use hgrama::fusion::{gate_regress, FusionConfig};
use hgrama::ops::Activation;
use hgrama::synthetic::{sbm_bundle, SbmSpec};
use hgrama::umpm::{apply_basis, Basis, UmpmLayer};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> hgrama::Result<()> {
    let noise: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let bundle = sbm_bundle(&SbmSpec { nodes: 600, ..Default::default() }, &mut rng);
    let g = bundle.view();
    let (din, d) = (bundle.feature_dim(), 12);

    let mut layer = UmpmLayer::empty(din, d, Activation::Relu);
    for b in [Basis::SelfLoop, Basis::Gcn, Basis::Mean] {
        layer.blocks[b.index()] = Some(Array2::from_shape_fn((din, d), |_| rng.sample::<f64, _>(StandardNormal) * 0.3));
    }
    let outputs = [Basis::SelfLoop, Basis::Gcn, Basis::Mean]
        .into_iter()
        .map(|b| Ok((b, apply_basis(b, g.features, &layer, g)?)))
        .collect::<hgrama::Result<Vec<_>>>()?;

    let planted = [(Basis::SelfLoop, 0.3), (Basis::Gcn, 0.7), (Basis::Mean, 0.0)];
    let mut target = Array2::from_shape_fn(outputs[0].1.dim(), |_| noise * rng.sample::<f64, _>(StandardNormal));
    for ((_, m), (_, gb)) in outputs.iter().zip(planted) {
        target.scaled_add(gb, m);
    }
    println!("planted  {planted:?}");

    for (name, cfg) in [
        ("ridge 1e-6", FusionConfig { lambda: 1e-6, ..Default::default() }),
        ("ridge 1e-4", FusionConfig::default()),
        ("top-2", FusionConfig { top_k: Some(2), ..Default::default() }),
        ("unwhitened", FusionConfig { whiten: false, ..Default::default() }),
    ] {
        let r = gate_regress(&outputs, &target, &cfg)?;
        let gates: Vec<String> = r.selected.iter().map(|b| format!("{b}={:.4}", r.gates[b.index()])).collect();
        println!("{name:<11} {}  residual {:.3}", gates.join(" "), r.residual);
    }
    Ok(())
}
