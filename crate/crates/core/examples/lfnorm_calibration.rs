//! Edge-message calibration: stream message moments of two parents, mix
//! them into targets, install the folded affine map on a child layer and
//! compare against a forward pass that materializes every edge message.
//!
//! `cargo run --example lfnorm_calibration -- [granularity]`
//! where granularity is `per_node`, `bucket:K`, `global` or `auto`.

use hgrama::lfnorm::{apply_folded, folded_params, materialized_forward, mix_targets, stream_moments, stream_moments_with, GranularitySpec};
use hgrama::linalg::max_abs_diff;
use hgrama::model::InitOptions;
use hgrama::synthetic::{sbm_bundle, SbmSpec};
use hgrama::umpm::canonicalize;
use hgrama::{Arch, GraphModel, ParentModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> hgrama::Result<()> {
    let spec: GranularitySpec = std::env::args().nth(1).as_deref().unwrap_or("bucket:8").parse()?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let bundle = sbm_bundle(&SbmSpec { nodes: 800, ..Default::default() }, &mut rng);
    let g = bundle.view();
    let gran = spec.resolve(g.csr);
    let opts = InitOptions { heads: 2, ..Default::default() };
    let dims = [16, 24, 4];

    // two same-architecture parents and a crude child: their average
    let a = canonicalize(&ParentModel::random(Arch::Sage, &dims, &opts, &mut rng))?;
    let b = canonicalize(&ParentModel::random(Arch::Sage, &dims, &opts, &mut rng))?;
    let mut child = b.clone();
    for (lc, la) in child.layers.iter_mut().zip(&a.layers) {
        for (wc, wa) in lc.blocks.iter_mut().zip(&la.blocks) {
            if let (Some(wc), Some(wa)) = (wc, wa) {
                *wc = (&*wc + wa) * 0.5;
            }
        }
    }

    let k = 1;
    let sa = stream_moments(&a, g, k, &gran)?;
    let sb = stream_moments(&b, g, k, &gran)?;
    let targets = mix_targets(&sa, &sb, 0.5)?;
    let before = stream_moments(&child, g, k, &gran)?;
    let params = folded_params(&before, &targets, 1e-6)?;
    apply_folded(&mut child, params.clone(), k)?;
    // moments are always taken on raw messages; pass the map to see its effect
    let after = stream_moments_with(&child, g, k, &gran, None, Some(&params))?;

    let gap = |s: &hgrama::lfnorm::CalibrationStats| {
        (max_abs_diff(s.mu().view(), targets.mu.view()), max_abs_diff(s.sigma().view(), targets.sigma.view()))
    };
    println!("granularity {} ({} units)", gran.label(), gran.num_units(g.csr));
    println!("before: |mu - mu*| {:.3e}  |sigma - sigma*| {:.3e}", gap(&before).0, gap(&before).1);
    println!("after:  |mu - mu*| {:.3e}  |sigma - sigma*| {:.3e}", gap(&after).0, gap(&after).1);

    let folded = child.forward(g)?;
    let explicit = materialized_forward(&child, g)?;
    println!("folded vs materialized logits: {:.2e}", max_abs_diff(folded.logits().view(), explicit.view()));
    Ok(())
}
