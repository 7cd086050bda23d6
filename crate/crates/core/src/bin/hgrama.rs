//! Command-line front end. Exit codes: 0 ok, 2 invalid input, 3 numerical
//! failure, 4 missing input.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use hgrama::alignment::{build_plan, AlignmentPlan};
use hgrama::eval::{retention, speedup, sweep, RetentionReport, SpeedupReport, SweepGrid};
use hgrama::fusion::AlphaMode;
use hgrama::graph::{build_specialist_split, default_class_groups, load_bundle, parse_class_groups, SpecialistSplit};
use hgrama::lfnorm::GranularitySpec;
use hgrama::pipeline::{canonicalize_any, run_merge_pipeline, save_outcome, LfnormLayers, RunConfig};
use hgrama::transport::{pad_to_layout, transport_model};
use hgrama::umpm::{save_umpm, AnyModel};
use hgrama::{Error, GraphModel, Result};

#[derive(Parser)]
#[command(name = "hgrama", version, about = "Training-free merging of GNN specialists")]
struct Cli {
    /// Full run configuration (JSON); flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the two-specialist split of a bundle.
    Split {
        #[arg(long)]
        bundle: PathBuf,
        /// `0-3:4-6` (A's classes before the colon) or `default` (lower half to A).
        #[arg(long)]
        groups: Option<String>,
        #[arg(long, default_value_t = 0.8)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory; `split.json` is written inside.
        #[arg(long)]
        out: PathBuf,
    },
    /// Rewrite a parent as an operator mixture and verify it.
    Canonicalize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Layer matching and transport maps.
    Align {
        #[command(flatten)]
        pair: Pair,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Move parent A into B's coordinates according to a plan.
    Transport {
        #[arg(long)]
        plan: PathBuf,
        #[command(flatten)]
        pair: Pair,
        #[arg(long)]
        out: PathBuf,
    },
    /// The whole merge.
    Merge(MergeArgs),
    /// Retention and speedup of a child against its parents.
    Eval {
        #[arg(long)]
        child: PathBuf,
        /// `DIR_A,DIR_B`
        #[arg(long, value_delimiter = ',', required = true)]
        parents: Vec<PathBuf>,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Timing repeats; 0 skips timing.
        #[arg(long, default_value_t = 30)]
        repeats: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
    },
    /// Merge and evaluate every cell of a grid (resumable).
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forward pass; writes the per-layer pre-activation trace.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Pair {
    #[arg(long)]
    parent_a: PathBuf,
    #[arg(long)]
    parent_b: PathBuf,
}

#[derive(Args)]
struct MergeArgs {
    #[command(flatten)]
    pair: Pair,
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    alpha_mode: Option<AlphaMode>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    /// `last`, `all`, `none` or a comma list of layer indices.
    #[arg(long)]
    lfnorm_layers: Option<LfnormLayers>,
    /// `auto`, `per_node`, `bucket:K` or `global`.
    #[arg(long)]
    lfnorm_granularity: Option<GranularitySpec>,
    #[arg(long)]
    no_gate_regress: bool,
    #[arg(long)]
    no_transport: bool,
    #[arg(long)]
    no_lfnorm: bool,
    #[arg(long)]
    swap_canonical: bool,
}

fn base_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    std::fs::write(path, text + "\n").map_err(|e| Error::Io { path: path.into(), source: e })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })
}

fn load_pair(p: &Pair) -> Result<(AnyModel, AnyModel)> {
    Ok((AnyModel::load(&p.parent_a)?, AnyModel::load(&p.parent_b)?))
}

#[derive(Serialize)]
struct CanonReport<'a> {
    provenance: &'a str,
    deviation: f64,
    eps: f64,
}

#[derive(Serialize)]
struct EvalReport {
    retention: RetentionReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    speedup: Option<SpeedupReport>,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = base_config(cli.config.as_deref())?;
    match cli.cmd {
        Cmd::Split { bundle, groups, ratio, seed, out } => {
            let b = load_bundle(&bundle)?;
            let groups = match groups {
                Some(s) => parse_class_groups(&s, b.num_classes())?,
                None => default_class_groups(b.num_classes()),
            };
            let split = build_specialist_split(&b, &groups, ratio, seed)?;
            ensure_dir(&out)?;
            split.save(out.join("split.json"))?;
            println!("A: {} train / {} eval, B: {} train / {} eval", split.a_train.len(), split.a_eval.len(), split.b_train.len(), split.b_eval.len());
        }
        Cmd::Canonicalize { model, bundle, out, eps } => {
            let eps = eps.unwrap_or(cfg.canonical_eps);
            let b = load_bundle(&bundle)?;
            let (umpm, dev) = canonicalize_any(&AnyModel::load(&model)?, b.view(), eps)?;
            ensure_dir(&out)?;
            save_umpm(&umpm, &out)?;
            write_json(&out.join("canonicalize_report.json"), &CanonReport { provenance: &umpm.provenance, deviation: dev, eps })?;
            println!("{}: max deviation {dev:.3e}", umpm.provenance);
        }
        Cmd::Align { pair, bundle, gamma, out } => {
            if let Some(g) = gamma {
                cfg.align.gamma = g;
            }
            let b = load_bundle(&bundle)?;
            let (pa, pb) = load_pair(&pair)?;
            let (a, _) = canonicalize_any(&pa, b.view(), cfg.canonical_eps).map_err(|e| e.in_phase("canonicalize"))?;
            let (bm, _) = canonicalize_any(&pb, b.view(), cfg.canonical_eps).map_err(|e| e.in_phase("canonicalize"))?;
            let plan = build_plan(&a, &a.forward(b.view())?, &bm, &bm.forward(b.view())?, &cfg.align).map_err(|e| e.in_phase("align"))?;
            plan.save(&out)?;
            write_json(&out.with_extension("config.json"), &cfg)?;
            println!("matches {:?}", plan.matches);
        }
        Cmd::Transport { plan, pair, out } => {
            let plan = AlignmentPlan::load(&plan)?;
            let (pa, pb) = load_pair(&pair)?;
            let canon = |m: &AnyModel| match m {
                AnyModel::Parent(p) => hgrama::umpm::canonicalize(p),
                AnyModel::Umpm(u) => Ok(u.clone()),
            };
            let (a, b) = (canon(&pa)?, canon(&pb)?);
            let (padded_a, padded_b) = pad_to_layout(&a, &b, &plan.layout).map_err(|e| e.in_phase("transport"))?;
            let moved = transport_model(&padded_a, &plan).map_err(|e| e.in_phase("transport"))?;
            ensure_dir(&out)?;
            save_umpm(&moved.model, out.join("parent_a"))?;
            save_umpm(&padded_b, out.join("parent_b"))?;
            #[derive(Serialize)]
            struct TransportReport<'a> {
                padding_a: &'a [usize],
                padding_b: Vec<usize>,
                attention: &'a [Option<hgrama::transport::AttentionTransport>],
            }
            write_json(
                &out.join("transport_report.json"),
                &TransportReport { padding_a: &moved.padding_positions, padding_b: plan.padding_b(), attention: &moved.attention },
            )?;
            println!("depth {} (padding in A at {:?})", moved.model.layers.len(), moved.padding_positions);
        }
        Cmd::Merge(m) => {
            if let Some(mode) = m.alpha_mode {
                cfg.fusion.alpha_mode = mode;
            }
            if let Some(a) = m.alpha {
                cfg.fusion.fixed_alpha = Some(a);
                if m.alpha_mode.is_none() {
                    cfg.fusion.alpha_mode = AlphaMode::Fixed;
                }
            }
            if let Some(l) = m.lambda {
                cfg.fusion.lambda = l;
            }
            if let Some(g) = m.gamma {
                cfg.align.gamma = g;
            }
            if m.top_k.is_some() {
                cfg.fusion.top_k = m.top_k;
            }
            if let Some(l) = m.lfnorm_layers {
                cfg.lfnorm.layers = l;
            }
            if let Some(g) = m.lfnorm_granularity {
                cfg.lfnorm.granularity = g;
            }
            let t = &mut cfg.toggles;
            t.no_gate_regress |= m.no_gate_regress;
            t.no_transport |= m.no_transport;
            t.no_lfnorm |= m.no_lfnorm;
            t.swap_canonical |= m.swap_canonical;
            cfg.paths.parent_a = Some(m.pair.parent_a.clone());
            cfg.paths.parent_b = Some(m.pair.parent_b.clone());
            cfg.paths.bundle = Some(m.bundle.clone());
            cfg.paths.out = Some(m.out.clone());

            let bundle = load_bundle(&m.bundle)?;
            let (a, b) = load_pair(&m.pair)?;
            let before = bundle.label_reads();
            // the pipeline only receives structure and features
            let outcome = run_merge_pipeline(bundle.view(), &a, &b, &cfg)?;
            debug_assert_eq!(bundle.label_reads(), before);
            ensure_dir(&m.out)?;
            save_outcome(&outcome, &m.out)?;
            println!("alphas {:?}", outcome.report.phases.fuse.alphas);
        }
        Cmd::Eval { child, parents, bundle, split, out, repeats, warmup } => {
            if parents.len() != 2 {
                return Err(Error::invalid("--parents takes exactly two directories, `A,B`"));
            }
            let b = load_bundle(&bundle)?;
            let split = SpecialistSplit::load(&split)?;
            let c = AnyModel::load(&child)?;
            let (pa, pb) = (AnyModel::load(&parents[0])?, AnyModel::load(&parents[1])?);
            let mut r = retention(c.as_model(), pa.as_model(), pb.as_model(), &b, &split)?;
            r.config = Some(cfg.clone());
            let s = if repeats > 0 { Some(speedup(c.as_model(), pa.as_model(), pb.as_model(), b.view(), repeats, warmup)?) } else { None };
            write_json(&out, &EvalReport { retention: r.clone(), speedup: s.clone() })?;
            println!("ret A {:?} B {:?} min {:?}", r.ret_a, r.ret_b, r.min_ret);
            if let Some(s) = s {
                println!("speedup {:.2}x", s.speedup);
            }
        }
        Cmd::Sweep { grid, out } => {
            let mut grid = SweepGrid::load(&grid)?;
            if cli.config.is_some() {
                grid.config = cfg;
            }
            let rows = sweep(&grid, &out)?;
            let ok = rows.iter().filter(|r| r.status == "ok").count();
            println!("{ok}/{} cells complete", rows.len());
        }
        Cmd::Infer { model, bundle, out } => {
            let b = load_bundle(&bundle)?;
            let m = AnyModel::load(&model)?;
            let trace = m.as_model().forward(b.view())?;
            let refs: Vec<_> = trace.pre.iter().collect();
            hgrama::binio::write_matrix_list(&out, &refs)?;
            println!("{} trace entries written", refs.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = std::env::var("HGRAMA_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("HGRAMA_THREADS ignored: {e}");
        }
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
