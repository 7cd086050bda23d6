//! End-to-end merge: canonicalize, align, transport, fuse, calibrate.
//!
//! The pipeline only ever sees a [`GraphView`] (structure and features), so
//! labels and masks are out of reach by construction.

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::alignment::{build_plan, orientation, orthogonality_error, AlignConfig, AlignmentPlan, Orientation, Slot};
use crate::error::{Error, Result};
use crate::fusion::{fuse_models, select_alphas, AlphaMode, FusionConfig, FusionKind, LayerFusion, PadSide};
use crate::graph::GraphView;
use crate::lfnorm::{self, GranularitySpec};
use crate::linalg::Matrix;
use crate::model::GraphModel;
use crate::transport::{pad_to_layout, transport_model, AttentionTransport};
use crate::umpm::{canonicalize_verified, AnyModel, UmpmModel};

/// Which layers receive calibration.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum LfnormLayers {
    #[default]
    Last,
    All,
    None,
    /// 0-based layer indices of the merged child.
    Only(Vec<usize>),
}

impl FromStr for LfnormLayers {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(LfnormLayers::Last),
            "all" => Ok(LfnormLayers::All),
            "none" => Ok(LfnormLayers::None),
            _ => s
                .split(',')
                .map(|t| t.trim().parse::<usize>().map_err(|_| Error::invalid(format!("bad lfnorm layer list `{s}`"))))
                .collect::<Result<Vec<_>>>()
                .map(LfnormLayers::Only),
        }
    }
}

impl std::fmt::Display for LfnormLayers {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LfnormLayers::Last => f.write_str("last"),
            LfnormLayers::All => f.write_str("all"),
            LfnormLayers::None => f.write_str("none"),
            LfnormLayers::Only(v) => {
                let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl Serialize for LfnormLayers {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LfnormLayers {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl LfnormLayers {
    fn resolve(&self, depth: usize) -> Vec<usize> {
        match self {
            LfnormLayers::Last => vec![depth - 1],
            LfnormLayers::All => (0..depth).collect(),
            LfnormLayers::None => Vec::new(),
            LfnormLayers::Only(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LfnormConfig {
    pub layers: LfnormLayers,
    pub granularity: GranularitySpec,
    pub eps: f64,
}

impl Default for LfnormConfig {
    fn default() -> Self {
        LfnormConfig {
            layers: LfnormLayers::Last,
            granularity: GranularitySpec::Auto,
            eps: 1e-6,
        }
    }
}

/// Phase switches for ablations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    pub no_transport: bool,
    pub no_gate_regress: bool,
    pub no_lfnorm: bool,
    /// Use A's coordinates as the canonical frame instead of B's.
    pub swap_canonical: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunPaths {
    pub parent_a: Option<PathBuf>,
    pub parent_b: Option<PathBuf>,
    pub bundle: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Every knob of a run. Serialized next to everything a run writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub align: AlignConfig,
    pub fusion: FusionConfig,
    pub lfnorm: LfnormConfig,
    pub toggles: Toggles,
    /// Allowed canonicalization deviation.
    pub canonical_eps: f64,
    pub paths: RunPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            align: AlignConfig::default(),
            fusion: FusionConfig::default(),
            lfnorm: LfnormConfig::default(),
            toggles: Toggles::default(),
            canonical_eps: 1e-5,
            paths: RunPaths::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        if !(self.align.gamma > 0.0) {
            return Err(Error::invalid("gamma must be positive"));
        }
        if self.align.max_nodes < 2 {
            return Err(Error::invalid("max_nodes must be at least 2"));
        }
        if !(self.lfnorm.eps > 0.0) || !(self.canonical_eps >= 0.0) {
            return Err(Error::invalid("eps values must be positive"));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        crate::binio::read_json(path.as_ref())
    }
}

// ---------------------------------------------------------------------------
// report

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParentSummary {
    pub provenance: String,
    pub depth: usize,
    pub widths: Vec<usize>,
    /// Max deviation between parent and canonical form (0 for UMPM inputs).
    pub deviation: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CanonicalizeSection {
    pub parent_a: ParentSummary,
    pub parent_b: ParentSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapSummary {
    pub boundary: usize,
    pub rows: usize,
    pub cols: usize,
    pub orientation: Orientation,
    pub orthogonality_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignSection {
    pub gamma: f64,
    pub nodes_used: usize,
    /// Rows index A's trace entries (input first), columns B's.
    pub cka: Vec<Vec<f64>>,
    pub matches: Vec<(usize, usize)>,
    pub layout: Vec<Slot>,
    pub maps: Vec<MapSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransportSection {
    pub skipped: bool,
    pub padding_a: Vec<usize>,
    pub padding_b: Vec<usize>,
    pub attention: Vec<Option<AttentionTransport>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FuseSection {
    pub alpha_mode: AlphaMode,
    pub gate_regression: bool,
    pub alphas: Vec<f64>,
    pub raw_alphas: Vec<f64>,
    pub s_a: Vec<f64>,
    pub s_b: Vec<f64>,
    pub mean_discrepancy: Vec<f64>,
    pub mean_confidence_a: f64,
    pub mean_confidence_b: f64,
    pub layers: Vec<LayerFusion>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LfnormLayerReport {
    pub layer: usize,
    pub applied: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub granularity: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LfnormSection {
    pub enabled: bool,
    pub layers: Vec<LfnormLayerReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Phases {
    pub canonicalize: CanonicalizeSection,
    pub align: AlignSection,
    pub transport: TransportSection,
    pub fuse: FuseSection,
    pub lfnorm: LfnormSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergeReport {
    pub config: RunConfig,
    /// Parent whose coordinates the child lives in (`b` unless swapped).
    pub canonical: String,
    pub phases: Phases,
}

impl MergeReport {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::binio::write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        crate::binio::read_json(path.as_ref())
    }
}

#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub child: UmpmModel,
    pub plan: AlignmentPlan,
    pub report: MergeReport,
}

// ---------------------------------------------------------------------------
// phases

pub fn canonicalize_any(model: &AnyModel, g: GraphView<'_>, eps: f64) -> Result<(UmpmModel, f64)> {
    match model {
        AnyModel::Parent(p) => canonicalize_verified(p, g, eps),
        AnyModel::Umpm(u) => {
            u.validate()?;
            Ok((u.clone(), 0.0))
        }
    }
}

fn summary(model: &UmpmModel, deviation: f64) -> ParentSummary {
    ParentSummary {
        provenance: model.provenance.clone(),
        depth: model.layers.len(),
        widths: model.widths(),
        deviation,
    }
}

/// Replaces every fitted map with the identity (transport switched off).
fn identity_plan(plan: &mut AlignmentPlan, a: &UmpmModel) -> Result<()> {
    let sources = crate::alignment::boundary_sources(&plan.layout);
    for (t, &(i, j)) in sources.iter().enumerate() {
        let (wa, wb) = (plan.widths_a[i], plan.widths_b[j]);
        if wa != wb {
            return Err(Error::dims(format!(
                "transport disabled but boundary {t} widths differ ({wa} vs {wb})"
            )));
        }
        plan.boundary_maps[t] = Matrix::eye(wa);
    }
    for (t, slot) in plan.layout.iter().enumerate() {
        if let (Some(i), Some(maps)) = (slot.a, plan.mlp_maps[t].as_mut()) {
            let mlp = a.layers[i].post_mlp.as_ref().expect("maps imply an mlp");
            *maps = mlp.layers[..mlp.layers.len() - 1].iter().map(|l| Matrix::eye(l.w.ncols())).collect();
        }
    }
    Ok(())
}

/// Runs all five phases on `g` and returns the child, the plan and a report.
pub fn run_merge_pipeline(g: GraphView<'_>, parent_a: &AnyModel, parent_b: &AnyModel, cfg: &RunConfig) -> Result<MergeOutcome> {
    cfg.validate()?;
    let (first, second) = if cfg.toggles.swap_canonical { (parent_b, parent_a) } else { (parent_a, parent_b) };

    // phase 1
    let canon = || -> Result<_> {
        let (a, dev_a) = canonicalize_any(first, g, cfg.canonical_eps)?;
        let (b, dev_b) = canonicalize_any(second, g, cfg.canonical_eps)?;
        Ok((a, dev_a, b, dev_b))
    };
    let (a, dev_a, b, dev_b) = canon().map_err(|e| e.in_phase("canonicalize"))?;
    let canonicalize = CanonicalizeSection {
        parent_a: summary(&a, dev_a),
        parent_b: summary(&b, dev_b),
    };

    // phase 2
    let align = || -> Result<_> {
        let ta = a.forward(g)?;
        let tb = b.forward(g)?;
        let mut plan = build_plan(&a, &ta, &b, &tb, &cfg.align)?;
        if cfg.toggles.no_transport {
            identity_plan(&mut plan, &a)?;
        }
        Ok(plan)
    };
    let plan = align().map_err(|e| e.in_phase("align"))?;
    let align = AlignSection {
        gamma: plan.gamma,
        nodes_used: plan.nodes_used,
        cka: plan.cka.rows().into_iter().map(|r| r.to_vec()).collect(),
        matches: plan.matches.clone(),
        layout: plan.layout.clone(),
        maps: plan
            .boundary_maps
            .iter()
            .enumerate()
            .map(|(t, r)| MapSummary {
                boundary: t,
                rows: r.nrows(),
                cols: r.ncols(),
                orientation: orientation(r),
                orthogonality_error: orthogonality_error(r),
            })
            .collect(),
    };

    // phase 3
    let transport = || -> Result<_> {
        let (pa, pb) = pad_to_layout(&a, &b, &plan.layout)?;
        let moved = transport_model(&pa, &plan)?;
        Ok((pa, pb, moved))
    };
    let (pa, pb, moved) = transport().map_err(|e| e.in_phase("transport"))?;
    let transport = TransportSection {
        skipped: cfg.toggles.no_transport,
        padding_a: plan.padding_a(),
        padding_b: plan.padding_b(),
        attention: moved.attention.clone(),
    };

    // phase 4
    let fuse = || -> Result<_> {
        let ta = moved.model.forward(g)?;
        let tb = pb.forward(g)?;
        let padding: Vec<PadSide> = moved.model.layers.iter().zip(&pb.layers).map(|(x, y)| PadSide::of(x, y)).collect();
        let alphas = select_alphas(&ta, &tb, ta.logits(), tb.logits(), &padding, &cfg.fusion)?;
        let traces = (!cfg.toggles.no_gate_regress).then_some((&ta, &tb, g));
        let fused = fuse_models(&moved.model, &pb, &alphas.alphas, traces, &cfg.fusion)?;
        Ok((alphas, fused))
    };
    let (alphas, fused) = fuse().map_err(|e| e.in_phase("fuse"))?;
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let fuse = FuseSection {
        alpha_mode: cfg.fusion.alpha_mode,
        gate_regression: !cfg.toggles.no_gate_regress,
        alphas: alphas.alphas.clone(),
        raw_alphas: alphas.raw_alphas.clone(),
        s_a: alphas.s_a.clone(),
        s_b: alphas.s_b.clone(),
        mean_discrepancy: alphas.d.iter().map(|d| mean(d)).collect(),
        mean_confidence_a: mean(&alphas.c_a),
        mean_confidence_b: mean(&alphas.c_b),
        layers: fused.layers.clone(),
    };

    // phase 5
    let mut child = fused.model;
    let calibrate = |child: &mut UmpmModel| -> Result<Vec<LfnormLayerReport>> {
        if cfg.toggles.no_lfnorm {
            return Ok(Vec::new());
        }
        let gran = cfg.lfnorm.granularity.resolve(g.csr);
        let mut out = Vec::new();
        for k in cfg.lfnorm.layers.resolve(child.layers.len()) {
            if k >= child.layers.len() {
                return Err(Error::invalid(format!("lfnorm layer {k} out of range")));
            }
            let skip = |why: &str| LfnormLayerReport {
                layer: k,
                applied: false,
                granularity: None,
                skipped: Some(why.into()),
            };
            if fused.layers[k].kind == FusionKind::Union {
                log::info!("lfnorm: layer {k} stacks both parents' messages; skipped");
                out.push(skip("union layer"));
                continue;
            }
            if !child.layers[k].has_edge_bases() {
                out.push(skip("no edge bases"));
                continue;
            }
            // A's messages move to B's frame through the message-space map
            let (r_in, r_out) = &moved.applied_maps[k];
            let map = if pa.layers[k].post_mlp.is_some() { r_in } else { r_out };
            let sa = lfnorm::stream_moments_with(&pa, g, k, &gran, Some(map), None)?;
            let sb = lfnorm::stream_moments(&pb, g, k, &gran)?;
            let targets = lfnorm::mix_targets(&sa, &sb, alphas.alphas[k])?;
            let sc = lfnorm::stream_moments(child, g, k, &gran)?;
            let params = lfnorm::folded_params(&sc, &targets, cfg.lfnorm.eps)?;
            let applied = lfnorm::apply_folded(child, params, k)?;
            out.push(LfnormLayerReport {
                layer: k,
                applied,
                granularity: Some(gran.label()),
                skipped: None,
            });
        }
        Ok(out)
    };
    let lf_layers = calibrate(&mut child).map_err(|e| e.in_phase("lfnorm"))?;
    child.validate().map_err(|e| e.in_phase("lfnorm"))?;

    let report = MergeReport {
        config: cfg.clone(),
        canonical: if cfg.toggles.swap_canonical { "a" } else { "b" }.into(),
        phases: Phases {
            canonicalize,
            align,
            transport,
            fuse,
            lfnorm: LfnormSection {
                enabled: !cfg.toggles.no_lfnorm,
                layers: lf_layers,
            },
        },
    };
    Ok(MergeOutcome { child, plan, report })
}

/// Writes the child checkpoint, `merge_report.json`, the alignment plan and
/// `run_config.json` into `dir`.
pub fn save_outcome(outcome: &MergeOutcome, dir: impl AsRef<std::path::Path>) -> Result<()> {
    let dir = dir.as_ref();
    crate::umpm::save_umpm(&outcome.child, dir)?;
    outcome.report.save(dir.join("merge_report.json"))?;
    outcome.plan.save(dir.join("plan.json"))?;
    crate::binio::write_json(&dir.join("run_config.json"), &outcome.report.config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs_diff;
    use crate::model::{Arch, InitOptions, ParentModel};
    use crate::synthetic::{sbm_bundle, SbmSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn config_round_trips_and_defaults() {
        let cfg = RunConfig::default();
        let s = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"fusion":{"lambda":0.5},"lfnorm":{"layers":"0,1"}}"#).unwrap();
        assert_eq!(partial.fusion.lambda, 0.5);
        assert_eq!(partial.fusion.eps, 1e-8);
        assert_eq!(partial.lfnorm.layers, LfnormLayers::Only(vec![0, 1]));
    }

    #[test]
    fn degenerate_pipeline_returns_the_parent() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bundle = sbm_bundle(&SbmSpec { nodes: 80, ..Default::default() }, &mut rng);
        let p = ParentModel::random(Arch::Sage, &[16, 12, 4], &InitOptions::default(), &mut rng);
        let any = AnyModel::Parent(p.clone());
        let mut cfg = RunConfig::default();
        cfg.toggles = Toggles { no_transport: true, no_gate_regress: true, no_lfnorm: true, swap_canonical: false };
        let out = run_merge_pipeline(bundle.view(), &any, &any, &cfg).unwrap();
        let d = max_abs_diff(out.child.predict(bundle.view()).unwrap().view(), p.predict(bundle.view()).unwrap().view());
        assert_eq!(d, 0.0);
    }

    #[test]
    fn phase_errors_are_tagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bundle = sbm_bundle(&SbmSpec { nodes: 40, ..Default::default() }, &mut rng);
        let a = AnyModel::Parent(ParentModel::random(Arch::Gcn, &[16, 8, 4], &InitOptions::default(), &mut rng));
        let b = AnyModel::Parent(ParentModel::random(Arch::Gcn, &[16, 6, 4], &InitOptions::default(), &mut rng));
        let mut cfg = RunConfig::default();
        cfg.toggles.no_transport = true;
        let err = run_merge_pipeline(bundle.view(), &a, &b, &cfg).unwrap_err();
        assert!(err.to_string().starts_with("align:"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }
}
