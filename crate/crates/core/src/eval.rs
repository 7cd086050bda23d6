//! Retention, inference speedup and grid sweeps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{load_bundle, GraphBundle, GraphView, SpecialistSplit};
use crate::linalg::{argmax, Matrix};
use crate::model::GraphModel;
use crate::pipeline::{run_merge_pipeline, RunConfig};
use crate::umpm::AnyModel;

/// How the two-parent baseline combines predictions.
pub const ENSEMBLE_RULE: &str = "mean of softmax probabilities";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionReport {
    pub acc_parent_a: f64,
    pub acc_parent_b: f64,
    pub acc_child_on_a_eval: f64,
    pub acc_child_on_b_eval: f64,
    /// `None` when the parent scores 0 on its own eval set.
    pub ret_a: Option<f64>,
    pub ret_b: Option<f64>,
    pub min_ret: Option<f64>,
    pub n_eval_a: usize,
    pub n_eval_b: usize,
    pub split_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<RunConfig>,
}

fn accuracy(logits: &Matrix, labels: &[u16], nodes: &[u32]) -> f64 {
    let hits = nodes
        .iter()
        .filter(|&&v| argmax(logits.row(v as usize)) == labels[v as usize] as usize)
        .count();
    hits as f64 / nodes.len() as f64
}

fn ratio(child: f64, parent: f64, who: &str) -> Option<f64> {
    if parent == 0.0 {
        log::warn!("parent {who} has zero accuracy on its eval set; retention undefined");
        None
    } else {
        Some(child / parent)
    }
}

/// Accuracy of each model on its own specialist eval subset, and the
/// child's accuracy on both.
pub fn retention(child: &dyn GraphModel, parent_a: &dyn GraphModel, parent_b: &dyn GraphModel, bundle: &GraphBundle, split: &SpecialistSplit) -> Result<RetentionReport> {
    if split.num_nodes != bundle.num_nodes() {
        return Err(Error::dims(format!(
            "split covers {} nodes, bundle has {}",
            split.num_nodes,
            bundle.num_nodes()
        )));
    }
    if split.a_eval.is_empty() || split.b_eval.is_empty() {
        return Err(Error::invalid("empty eval mask"));
    }
    let g = bundle.view();
    let (lc, la, lb) = (child.predict(g)?, parent_a.predict(g)?, parent_b.predict(g)?);
    let labels = bundle.labels();
    let acc_parent_a = accuracy(&la, labels, &split.a_eval);
    let acc_parent_b = accuracy(&lb, labels, &split.b_eval);
    let acc_child_on_a_eval = accuracy(&lc, labels, &split.a_eval);
    let acc_child_on_b_eval = accuracy(&lc, labels, &split.b_eval);
    let ret_a = ratio(acc_child_on_a_eval, acc_parent_a, "A");
    let ret_b = ratio(acc_child_on_b_eval, acc_parent_b, "B");
    let min_ret = match (ret_a, ret_b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        _ => None,
    };
    Ok(RetentionReport {
        acc_parent_a,
        acc_parent_b,
        acc_child_on_a_eval,
        acc_child_on_b_eval,
        ret_a,
        ret_b,
        min_ret,
        n_eval_a: split.a_eval.len(),
        n_eval_b: split.b_eval.len(),
        split_seed: split.seed,
        config: None,
    })
}

pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for mut r in p.rows_mut() {
        let m = r.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        r.mapv_inplace(|x| (x - m).exp());
        let z = r.sum();
        r /= z;
    }
    p
}

/// The two-parent baseline: one forward of each parent, probabilities averaged.
pub fn ensemble_predict(a: &dyn GraphModel, b: &dyn GraphModel, g: GraphView<'_>) -> Result<Matrix> {
    let pa = softmax_rows(&a.predict(g)?);
    let pb = softmax_rows(&b.predict(g)?);
    Ok((pa + pb) * 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub child_ms: f64,
    pub ensemble_ms: f64,
    pub speedup: f64,
    pub repeats: usize,
    pub warmup: usize,
    pub ensemble_rule: String,
}

fn median(mut t: Vec<f64>) -> f64 {
    t.sort_by(f64::total_cmp);
    let m = t.len() / 2;
    if t.len() % 2 == 1 {
        t[m]
    } else {
        0.5 * (t[m - 1] + t[m])
    }
}

fn time_ms(f: &mut impl FnMut() -> Result<()>) -> Result<f64> {
    let start = Instant::now();
    f()?;
    Ok(start.elapsed().as_secs_f64() * 1e3)
}

/// Median wall time of the child versus the two-parent ensemble.
pub fn speedup(child: &dyn GraphModel, parent_a: &dyn GraphModel, parent_b: &dyn GraphModel, g: GraphView<'_>, repeats: usize, warmup: usize) -> Result<SpeedupReport> {
    if repeats < 3 {
        return Err(Error::invalid("speedup needs at least 3 repeats"));
    }
    let mut run_child = || child.predict(g).map(drop);
    let mut run_ens = || ensemble_predict(parent_a, parent_b, g).map(drop);
    for _ in 0..warmup {
        run_child()?;
        run_ens()?;
    }
    // interleaved so drift in machine load hits both sides alike
    let (mut tc, mut te) = (Vec::with_capacity(repeats), Vec::with_capacity(repeats));
    for _ in 0..repeats {
        tc.push(time_ms(&mut run_child)?);
        te.push(time_ms(&mut run_ens)?);
    }
    let floor = 1e-6;
    let (child_ms, ensemble_ms) = (median(tc).max(floor), median(te).max(floor));
    Ok(SpeedupReport {
        child_ms,
        ensemble_ms,
        speedup: ensemble_ms / child_ms,
        repeats,
        warmup,
        ensemble_rule: ENSEMBLE_RULE.into(),
    })
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub pair: String,
    pub depth_a: usize,
    pub depth_b: usize,
    pub width_a: usize,
    pub width_b: usize,
    pub seed: u64,
    pub parent_a: PathBuf,
    pub parent_b: PathBuf,
    /// Per-cell split; falls back to the grid's.
    #[serde(default)]
    pub split: Option<PathBuf>,
}

/// `grid.json`. Relative paths resolve against the grid file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepGrid {
    pub bundle: PathBuf,
    #[serde(default)]
    pub split: Option<PathBuf>,
    pub cells: Vec<SweepCell>,
    #[serde(default)]
    pub config: RunConfig,
    /// 0 disables timing.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
}

fn default_repeats() -> usize {
    5
}

fn default_warmup() -> usize {
    1
}

impl SweepGrid {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut grid: SweepGrid = crate::binio::read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut grid.bundle);
        if let Some(s) = grid.split.as_mut() {
            fix(s);
        }
        for c in &mut grid.cells {
            fix(&mut c.parent_a);
            fix(&mut c.parent_b);
            if let Some(s) = c.split.as_mut() {
                fix(s);
            }
        }
        Ok(grid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub pair: String,
    pub depth_a: usize,
    pub depth_b: usize,
    pub width_a: usize,
    pub width_b: usize,
    pub seed: u64,
    pub ret_a: Option<f64>,
    pub ret_b: Option<f64>,
    pub min_ret: Option<f64>,
    pub speedup: Option<f64>,
    /// `ok`, `absent` (missing checkpoint) or `failed`.
    pub status: String,
}

type CellKey = (String, usize, usize, usize, usize, u64);

impl SweepRow {
    fn key(&self) -> CellKey {
        (self.pair.clone(), self.depth_a, self.depth_b, self.width_a, self.width_b, self.seed)
    }

    fn empty(cell: &SweepCell, status: &str) -> Self {
        SweepRow {
            pair: cell.pair.clone(),
            depth_a: cell.depth_a,
            depth_b: cell.depth_b,
            width_a: cell.width_a,
            width_b: cell.width_b,
            seed: cell.seed,
            ret_a: None,
            ret_b: None,
            min_ret: None,
            speedup: None,
            status: status.into(),
        }
    }
}

fn cell_key(c: &SweepCell) -> CellKey {
    (c.pair.clone(), c.depth_a, c.depth_b, c.width_a, c.width_b, c.seed)
}

pub fn read_rows(path: &Path) -> Result<Vec<SweepRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    rd.deserialize().map(|r| r.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::invalid(format!("{}: {other:?}", path.display())),
    }
}

pub fn write_rows(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean and sample standard deviation over seeds per configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub pair: String,
    pub depth_a: usize,
    pub depth_b: usize,
    pub width_a: usize,
    pub width_b: usize,
    pub seeds: usize,
    pub min_ret_mean: Option<f64>,
    pub min_ret_std: Option<f64>,
    pub ret_a_mean: Option<f64>,
    pub ret_b_mean: Option<f64>,
    pub speedup_mean: Option<f64>,
    pub speedup_std: Option<f64>,
}

pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Some((m, var.sqrt()))
}

pub fn summarize(rows: &[SweepRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, usize, usize, usize, usize), Vec<&SweepRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.status == "ok") {
        groups.entry((r.pair.clone(), r.depth_a, r.depth_b, r.width_a, r.width_b)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((pair, depth_a, depth_b, width_a, width_b), rs)| {
            let col = |f: fn(&SweepRow) -> Option<f64>| mean_std(&rs.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            let min_ret = col(|r| r.min_ret);
            let speed = col(|r| r.speedup);
            SummaryRow {
                pair,
                depth_a,
                depth_b,
                width_a,
                width_b,
                seeds: rs.len(),
                min_ret_mean: min_ret.map(|x| x.0),
                min_ret_std: min_ret.map(|x| x.1),
                ret_a_mean: col(|r| r.ret_a).map(|x| x.0),
                ret_b_mean: col(|r| r.ret_b).map(|x| x.0),
                speedup_mean: speed.map(|x| x.0),
                speedup_std: speed.map(|x| x.1),
            }
        })
        .collect()
}

/// Path of the per-configuration summary written next to `out`.
pub fn summary_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("results");
    out.with_file_name(format!("{stem}.summary.csv"))
}

/// Runs merge and retention for every cell not already recorded as `ok` in
/// `out`, then rewrites `out` in grid order plus a summary file.
pub fn sweep(grid: &SweepGrid, out: &Path) -> Result<Vec<SweepRow>> {
    let done: BTreeMap<CellKey, SweepRow> = if out.exists() {
        read_rows(out)?.into_iter().filter(|r| r.status == "ok").map(|r| (r.key(), r)).collect()
    } else {
        BTreeMap::new()
    };
    let bundle = load_bundle(&grid.bundle)?;
    let grid_split = grid.split.as_ref().map(SpecialistSplit::load).transpose()?;

    struct Ready {
        idx: usize,
        child: crate::umpm::UmpmModel,
        a: AnyModel,
        b: AnyModel,
    }

    let todo: Vec<usize> = (0..grid.cells.len()).filter(|&i| !done.contains_key(&cell_key(&grid.cells[i]))).collect();
    // merges and retention in parallel
    let results: Vec<(usize, SweepRow, Option<Ready>)> = todo
        .par_iter()
        .map(|&i| {
            let cell = &grid.cells[i];
            let load = || -> Result<(AnyModel, AnyModel)> { Ok((AnyModel::load(&cell.parent_a)?, AnyModel::load(&cell.parent_b)?)) };
            let (a, b) = match load() {
                Ok(x) => x,
                Err(Error::MissingInput(p)) => {
                    log::warn!("sweep cell {i}: missing {}", p.display());
                    return (i, SweepRow::empty(cell, "absent"), None);
                }
                Err(e) => {
                    log::warn!("sweep cell {i}: {e}");
                    return (i, SweepRow::empty(cell, "failed"), None);
                }
            };
            let run = || -> Result<(SweepRow, crate::umpm::UmpmModel)> {
                let split = match &cell.split {
                    Some(p) => SpecialistSplit::load(p)?,
                    None => grid_split.clone().ok_or_else(|| Error::invalid("no split for sweep cell"))?,
                };
                let outcome = run_merge_pipeline(bundle.view(), &a, &b, &grid.config)?;
                let r = retention(&outcome.child, a.as_model(), b.as_model(), &bundle, &split)?;
                let mut row = SweepRow::empty(cell, "ok");
                row.ret_a = r.ret_a;
                row.ret_b = r.ret_b;
                row.min_ret = r.min_ret;
                Ok((row, outcome.child))
            };
            match run() {
                Ok((row, child)) => (i, row, Some(Ready { idx: i, child, a, b })),
                Err(e) => {
                    log::warn!("sweep cell {i}: {e}");
                    (i, SweepRow::empty(cell, "failed"), None)
                }
            }
        })
        .collect();

    let mut fresh: BTreeMap<usize, SweepRow> = BTreeMap::new();
    for (i, mut row, ready) in results {
        // timing one cell at a time
        if let (Some(r), true) = (ready, grid.repeats >= 3) {
            debug_assert_eq!(r.idx, i);
            match speedup(&r.child, r.a.as_model(), r.b.as_model(), bundle.view(), grid.repeats, grid.warmup) {
                Ok(s) => row.speedup = Some(s.speedup),
                Err(e) => log::warn!("sweep cell {i}: timing failed: {e}"),
            }
        }
        fresh.insert(i, row);
    }
    let rows: Vec<SweepRow> = grid
        .cells
        .iter()
        .enumerate()
        .map(|(i, c)| fresh.remove(&i).unwrap_or_else(|| done[&cell_key(c)].clone()))
        .collect();
    write_rows(out, &rows)?;
    let summary = summarize(&rows);
    let sp = summary_path(out);
    let mut w = csv::Writer::from_path(&sp).map_err(|e| csv_error(&sp, e))?;
    for s in &summary {
        w.serialize(s).map_err(|e| csv_error(&sp, e))?;
    }
    w.flush().map_err(|e| Error::io(&sp, e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_specialist_split, Csr};
    use crate::model::{Arch, InitOptions, ParentModel};
    use crate::synthetic::{sbm_bundle, SbmSpec};
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Always predicts class `k`.
    struct Constant(usize, usize, usize);

    impl GraphModel for Constant {
        fn input_dim(&self) -> usize {
            self.1
        }
        fn output_dim(&self) -> usize {
            self.2
        }
        fn depth(&self) -> usize {
            1
        }
        fn forward(&self, _: GraphView<'_>) -> Result<crate::model::ActivationTrace> {
            unimplemented!()
        }
        fn predict(&self, g: GraphView<'_>) -> Result<Matrix> {
            let mut m = Array2::zeros((g.num_nodes(), self.2));
            m.column_mut(self.0).fill(1.0);
            Ok(m)
        }
    }

    fn fixture() -> (GraphBundle, SpecialistSplit, ParentModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bundle = sbm_bundle(&SbmSpec { nodes: 120, ..Default::default() }, &mut rng);
        let split = build_specialist_split(&bundle, &crate::graph::default_class_groups(4), 0.5, 0).unwrap();
        let p = ParentModel::random(Arch::Gcn, &[16, 8, 4], &InitOptions::default(), &mut rng);
        (bundle, split, p)
    }

    #[test]
    fn self_merge_child_retains_everything() {
        let (bundle, split, p) = fixture();
        let r = retention(&p, &p, &p, &bundle, &split).unwrap();
        if r.acc_parent_a > 0.0 {
            assert_eq!(r.ret_a, Some(1.0));
        }
        if r.acc_parent_b > 0.0 {
            assert_eq!(r.ret_b, Some(1.0));
        }
    }

    #[test]
    fn constant_child_matches_counting_oracle() {
        let (bundle, split, _) = fixture();
        let labels = bundle.labels().to_vec();
        let parent = Constant(0, 16, 4);
        let child = Constant(1, 16, 4);
        let r = retention(&child, &parent, &parent, &bundle, &split).unwrap();
        let share = |nodes: &[u32], k: u16| nodes.iter().filter(|&&v| labels[v as usize] == k).count() as f64 / nodes.len() as f64;
        let (pa, ca) = (share(&split.a_eval, 0), share(&split.a_eval, 1));
        assert!((r.acc_parent_a - pa).abs() < 1e-15);
        match r.ret_a {
            Some(x) => assert!((x - ca / pa).abs() < 1e-12),
            None => assert_eq!(pa, 0.0),
        }
    }

    #[test]
    fn zero_parent_accuracy_gives_null() {
        let csr = Csr::from_edges(4, &[(0, 1)]).unwrap();
        let bundle = GraphBundle::new(2, csr, Array2::zeros((4, 1)), vec![1, 1, 1, 1], vec![]).unwrap();
        let split = SpecialistSplit {
            num_nodes: 4,
            class_group: vec![0, 1],
            ratio: 0.5,
            seed: 0,
            a_train: vec![],
            b_train: vec![],
            a_eval: vec![0, 1],
            b_eval: vec![2, 3],
        };
        let r = retention(&Constant(1, 1, 2), &Constant(0, 1, 2), &Constant(1, 1, 2), &bundle, &split).unwrap();
        assert_eq!((r.ret_a, r.ret_b, r.min_ret), (None, Some(1.0), None));
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"ret_a\":null"));
        assert_eq!(serde_json::from_str::<RetentionReport>(&json).unwrap(), r);
    }

    #[test]
    fn speedup_smoke() {
        let (bundle, _, p) = fixture();
        let s = speedup(&p, &p, &p, bundle.view(), 3, 0).unwrap();
        assert!(s.speedup > 0.0 && s.speedup.is_finite());
        assert!(speedup(&p, &p, &p, bundle.view(), 2, 0).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_rows(&array![[1.0, 2.0, 3.0], [1000.0, 0.0, -1000.0]]);
        for r in p.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_round_trip_and_summary() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let cell = SweepCell { pair: "gcn-gat".into(), depth_a: 2, depth_b: 2, width_a: 64, width_b: 64, seed: 0, parent_a: "a".into(), parent_b: "b".into(), split: None };
        let mut r0 = SweepRow::empty(&cell, "ok");
        r0.ret_a = Some(0.9);
        r0.ret_b = Some(0.8);
        r0.min_ret = Some(0.8);
        let mut r1 = r0.clone();
        r1.seed = 1;
        let absent = SweepRow::empty(&SweepCell { seed: 2, ..cell }, "absent");
        let rows = vec![r0, r1, absent];
        write_rows(&path, &rows).unwrap();
        assert_eq!(read_rows(&path).unwrap(), rows);
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("pair,depth_a,depth_b,width_a,width_b,seed,ret_a,ret_b,min_ret,speedup"));
        let s = summarize(&rows);
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].seeds, s[0].min_ret_std), (2, Some(0.0)));
    }
}
