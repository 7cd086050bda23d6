//! Layer similarity, monotone layer matching and Procrustes transport maps.

use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::TensorStore;
use crate::error::{Error, Result};
use crate::linalg::{center_columns, frobenius, thin_svd, Matrix};
use crate::model::ActivationTrace;
use crate::umpm::UmpmModel;

/// Linear CKA of two representations of the same nodes. Constant inputs
/// have no defined similarity and score 0.
pub fn compute_cka(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(Error::dims(format!("cka over {} and {} rows", a.nrows(), b.nrows())));
    }
    Ok(cka_centered(&center_columns(a), &center_columns(b)))
}

fn cka_centered(a: &Matrix, b: &Matrix) -> f64 {
    let (aa, bb) = (self_norm(a), self_norm(b));
    cka_with_norms(a, b, aa, bb)
}

fn self_norm(a: &Matrix) -> f64 {
    frobenius(a.t().dot(a).view())
}

fn cka_with_norms(a: &Matrix, b: &Matrix, aa: f64, bb: f64) -> f64 {
    if aa <= f64::MIN_POSITIVE || bb <= f64::MIN_POSITIVE {
        log::warn!("cka: zero-variance representation, similarity set to 0");
        return 0.0;
    }
    let cross = frobenius(b.t().dot(a).view());
    (cross * cross / (aa * bb)).clamp(0.0, 1.0)
}

/// `S[i, j] = CKA(a[i], b[j])` over every pair of layers.
pub fn cka_matrix(a: &[Matrix], b: &[Matrix]) -> Result<Matrix> {
    let ca: Vec<Matrix> = a.iter().map(|m| center_columns(m.view())).collect();
    let cb: Vec<Matrix> = b.iter().map(|m| center_columns(m.view())).collect();
    if let (Some(x), Some(y)) = (ca.first(), cb.first()) {
        if x.nrows() != y.nrows() {
            return Err(Error::dims("traces cover different node counts"));
        }
    }
    let na: Vec<f64> = ca.iter().map(self_norm).collect();
    let nb: Vec<f64> = cb.iter().map(self_norm).collect();
    let cells: Vec<f64> = (0..ca.len() * cb.len())
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / cb.len(), k % cb.len());
            cka_with_norms(&ca[i], &cb[j], na[i], nb[j])
        })
        .collect();
    Ok(Array2::from_shape_vec((ca.len(), cb.len()), cells).expect("shape"))
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Move {
    Start,
    Diag,
    Up,
    Left,
}

/// Anchored monotone matching of layer indices `0..=L_A` to `0..=L_B`.
///
/// `dp[i,j] = S[i,j] + max(dp[i-1,j-1], dp[i-1,j] - g d(i,j), dp[i,j-1] - g d(i,j))`
/// with `d(i,j) = |i/L_A - j/L_B|`. The path starts at `(0,0)` and enters
/// `(L_A,L_B)` diagonally so both anchors are matched. Only cells entered by
/// a diagonal move (plus the start) are returned. Ties go diagonal, up, left.
pub fn monotone_align(s: &Matrix, gamma: f64) -> Vec<(usize, usize)> {
    let (ra, rb) = s.dim();
    assert!(ra >= 2 && rb >= 2, "both models need at least one layer");
    let (la, lb) = (ra - 1, rb - 1);
    let delta = |i: usize, j: usize| (i as f64 / la as f64 - j as f64 / lb as f64).abs();
    let mut dp = Array2::from_elem((ra, rb), f64::NEG_INFINITY);
    let mut mv = Array2::from_elem((ra, rb), Move::Start);
    dp[[0, 0]] = s[[0, 0]];
    for i in 0..ra {
        for j in 0..rb {
            if i == 0 && j == 0 {
                continue;
            }
            let end = i == la && j == lb;
            let pen = gamma * delta(i, j);
            let mut best = (f64::NEG_INFINITY, Move::Start);
            let mut consider = |score: f64, m: Move| {
                if score > best.0 {
                    best = (score, m);
                }
            };
            if i > 0 && j > 0 {
                consider(dp[[i - 1, j - 1]], Move::Diag);
            }
            if !end {
                if i > 0 {
                    consider(dp[[i - 1, j]] - pen, Move::Up);
                }
                if j > 0 {
                    consider(dp[[i, j - 1]] - pen, Move::Left);
                }
            }
            dp[[i, j]] = s[[i, j]] + best.0;
            mv[[i, j]] = best.1;
        }
    }
    let mut out = Vec::new();
    let (mut i, mut j) = (la, lb);
    loop {
        match mv[[i, j]] {
            Move::Start => {
                out.push((0, 0));
                break;
            }
            Move::Diag => {
                out.push((i, j));
                i -= 1;
                j -= 1;
            }
            Move::Up => i -= 1,
            Move::Left => j -= 1,
        }
    }
    out.reverse();
    out
}

/// Minimizer of `|A R - B|_F` over semi-orthogonal `R`. Starts from the
/// polar factor `U Vᵀ` of `Aᵀ B`, which is already optimal unless `R` is
/// tall.
pub fn procrustes(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<Matrix> {
    if a.nrows() != b.nrows() {
        return Err(Error::dims(format!("procrustes over {} and {} rows", a.nrows(), b.nrows())));
    }
    let cross = a.t().dot(&b);
    let polar = |m: &Matrix| thin_svd(m.view()).map(|s| s.u.dot(&s.v_t));
    let svd = thin_svd(cross.view())?;
    let sv = &svd.singular_values;
    let top = sv.iter().fold(0.0f64, |m, &x| m.max(x));
    let mut r = if sv.iter().all(|&x| x > RANK_TOL * top) {
        svd.u.dot(&svd.v_t)
    } else {
        // R is free on the null space; a tiny pull toward the identity
        // embedding picks that minimizer
        let mut tied = cross.clone();
        for k in 0..tied.nrows().min(tied.ncols()) {
            tied[[k, k]] += TIE_BREAK * top.max(f64::MIN_POSITIVE);
        }
        polar(&tied)?
    };
    if a.ncols() <= b.ncols() {
        // RRᵀ = I keeps ‖AR‖ fixed, so the polar factor is the minimizer
        return Ok(r);
    }
    // tall maps: ‖AR‖ varies with R, so refine by majorization; each step
    // never raises the residual, so the result is at least as good as polar
    let gram = a.t().dot(&a);
    let lambda = thin_svd(gram.view())?.singular_values.fold(0.0f64, |m, &x| m.max(x));
    let residual = |r: &Matrix| (a.dot(r) - &b).mapv(|x| x * x).sum();
    let mut f = residual(&r);
    for _ in 0..PROCRUSTES_ITERS {
        let step = polar(&(&cross + &(lambda * &r - gram.dot(&r))))?;
        let g = residual(&step);
        if !(g < f) {
            break;
        }
        let done = f - g <= 1e-14 * f.max(1.0);
        (r, f) = (step, g);
        if done {
            break;
        }
    }
    Ok(r)
}

const PROCRUSTES_ITERS: usize = 500;
const TIE_BREAK: f64 = 1e-9;
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    /// `d_i >= d_j`, columns orthonormal.
    Tall,
    /// `d_i < d_j`, rows orthonormal.
    Wide,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportMap {
    pub r: Matrix,
    pub src_layer: usize,
    pub dst_layer: usize,
}

impl TransportMap {
    pub fn orientation(&self) -> Orientation {
        orientation(&self.r)
    }

    /// Max deviation of `RᵀR` (tall) or `RRᵀ` (wide) from the identity.
    pub fn orthogonality_error(&self) -> f64 {
        orthogonality_error(&self.r)
    }
}

pub fn orientation(r: &Matrix) -> Orientation {
    if r.nrows() >= r.ncols() {
        Orientation::Tall
    } else {
        Orientation::Wide
    }
}

pub fn orthogonality_error(r: &Matrix) -> f64 {
    let g = match orientation(r) {
        Orientation::Tall => r.t().dot(r),
        Orientation::Wide => r.dot(&r.t()),
    };
    let eye = Array2::<f64>::eye(g.nrows());
    crate::linalg::max_abs_diff(g.view(), eye.view())
}

fn is_identity(r: &Matrix) -> bool {
    r.nrows() == r.ncols() && r.indexed_iter().all(|((i, j), &x)| x == if i == j { 1.0 } else { 0.0 })
}

/// One slot of the common-depth layout: native layer indices (0-based) or
/// `None` where that side is padded with an identity layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub a: Option<usize>,
    pub b: Option<usize>,
}

/// Common-depth layout for a match list. In each gap between consecutive
/// matches the shallower side is padded right after its matched layer.
pub fn slot_layout(matches: &[(usize, usize)]) -> Vec<Slot> {
    let mut slots = Vec::new();
    for w in matches.windows(2) {
        let ((i0, j0), (i1, j1)) = (w[0], w[1]);
        let (ga, gb) = (i1 - i0, j1 - j0);
        let d = ga.max(gb);
        for s in 0..d {
            let a = (s >= d - ga).then(|| i0 + s - (d - ga));
            let b = (s >= d - gb).then(|| j0 + s - (d - gb));
            slots.push(Slot { a, b });
        }
    }
    slots
}

/// Native boundary index on each side for every slot boundary `0..=L_C`.
/// Boundary `i` is the output of native layer `i` (1-based); 0 is the input.
pub fn boundary_sources(layout: &[Slot]) -> Vec<(usize, usize)> {
    let mut out = vec![(0, 0)];
    let (mut ia, mut ib) = (0, 0);
    for s in layout {
        ia += s.a.is_some() as usize;
        ib += s.b.is_some() as usize;
        out.push((ia, ib));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub gamma: f64,
    /// Traces are subsampled to this many nodes on larger graphs.
    pub max_nodes: usize,
    pub seed: u64,
    /// Fit a Procrustes map on the logits instead of using the identity.
    pub fit_output_map: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            gamma: 0.5,
            max_nodes: 20_000,
            seed: 0,
            fit_output_map: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentPlan {
    pub gamma: f64,
    pub cka: Matrix,
    pub matches: Vec<(usize, usize)>,
    pub layout: Vec<Slot>,
    /// `R_t` for every slot boundary, `width_a(t) x width_b(t)`.
    pub boundary_maps: Vec<Matrix>,
    /// Intermediate update-MLP maps for each slot whose A side has one.
    pub mlp_maps: Vec<Option<Vec<Matrix>>>,
    pub widths_a: Vec<usize>,
    pub widths_b: Vec<usize>,
    /// Number of nodes the traces were reduced to (all nodes if not subsampled).
    pub nodes_used: usize,
}

impl AlignmentPlan {
    pub fn depth(&self) -> usize {
        self.layout.len()
    }

    /// The map of every matched pair, in match order.
    pub fn match_maps(&self) -> Vec<TransportMap> {
        let sources = boundary_sources(&self.layout);
        self.matches
            .iter()
            .map(|&(i, j)| {
                let t = sources.iter().position(|&p| p == (i, j)).expect("matches lie on the layout");
                TransportMap {
                    r: self.boundary_maps[t].clone(),
                    src_layer: i,
                    dst_layer: j,
                }
            })
            .collect()
    }

    pub fn padding_a(&self) -> Vec<usize> {
        self.layout.iter().enumerate().filter(|(_, s)| s.a.is_none()).map(|(t, _)| t).collect()
    }

    pub fn padding_b(&self) -> Vec<usize> {
        self.layout.iter().enumerate().filter(|(_, s)| s.b.is_none()).map(|(t, _)| t).collect()
    }
}

/// Shared seeded node subsample, or `None` when every node is used.
pub fn subsample_rows(n: usize, max_nodes: usize, seed: u64) -> Option<Vec<usize>> {
    if n <= max_nodes {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, max_nodes).into_vec();
    idx.sort_unstable();
    Some(idx)
}

fn take(m: &Matrix, rows: Option<&[usize]>) -> Matrix {
    match rows {
        Some(r) => m.select(Axis(0), r),
        None => m.clone(),
    }
}

/// Map for one boundary. Concatenated attention layers with the same head
/// layout on both sides get a map that sends each head of A to one head of
/// B; heads are interchangeable, so the pairing is part of the fit.
// Fitted on raw pre-activations: centering would leave the mean (bias)
// direction unconstrained whenever the centered data is rank deficient.
fn boundary_map(a: &Matrix, b: &Matrix, heads: Option<(usize, usize)>) -> Result<Matrix> {
    let Some((h, dh)) = heads else {
        return procrustes(a.view(), b.view());
    };
    let cols = |k: usize| s![.., k * dh..(k + 1) * dh];
    // fits[k][m]: block map from A's head k to B's head m and its objective gain
    let fits = (0..h)
        .map(|k| {
            (0..h)
                .map(|m| {
                    let r = procrustes(a.slice(cols(k)), b.slice(cols(m)))?;
                    let cross = a.slice(cols(k)).t().dot(&b.slice(cols(m)));
                    let gain = (&r * &cross).sum();
                    Ok((r, gain))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let gains: Vec<Vec<f64>> = fits.iter().map(|row| row.iter().map(|f| f.1).collect()).collect();
    let assign = best_assignment(&gains);
    let mut out = Array2::zeros((h * dh, h * dh));
    for (k, &m) in assign.iter().enumerate() {
        out.slice_mut(s![k * dh..(k + 1) * dh, m * dh..(m + 1) * dh]).assign(&fits[k][m].0);
    }
    Ok(out)
}

/// Maximum-weight perfect matching by DP over subsets (`h` is a head count,
/// so `2^h` stays small). Ties keep the lower column, which favors the
/// identity pairing.
pub(crate) fn best_assignment(w: &[Vec<f64>]) -> Vec<usize> {
    let h = w.len();
    assert!(h <= 20, "too many heads for exact assignment");
    let full = (1usize << h) - 1;
    let mut best = vec![f64::NEG_INFINITY; full + 1];
    let mut choice = vec![usize::MAX; full + 1];
    best[0] = 0.0;
    for mask in 0..full {
        if best[mask] == f64::NEG_INFINITY {
            continue;
        }
        let k = mask.count_ones() as usize;
        for m in 0..h {
            if mask & (1 << m) != 0 {
                continue;
            }
            let next = mask | (1 << m);
            let score = best[mask] + w[k][m];
            if score > best[next] {
                best[next] = score;
                choice[next] = m;
            }
        }
    }
    let mut out = vec![0; h];
    let mut mask = full;
    for k in (0..h).rev() {
        let m = choice[mask];
        out[k] = m;
        mask &= !(1 << m);
    }
    out
}

fn concat_heads(model: &UmpmModel, layer: usize) -> Option<(usize, usize)> {
    let l = &model.layers[layer];
    match (&l.att, !l.has_update()) {
        (Some(att), true) if att.concat && l.present().count() == 1 => Some((att.heads, att.head_dim())),
        _ => None,
    }
}

/// Runs similarity, matching and all Procrustes fits for a pair of
/// canonical parents and their traces.
pub fn build_plan(
    model_a: &UmpmModel,
    trace_a: &ActivationTrace,
    model_b: &UmpmModel,
    trace_b: &ActivationTrace,
    cfg: &AlignConfig,
) -> Result<AlignmentPlan> {
    if !(cfg.gamma > 0.0) {
        return Err(Error::invalid(format!("gamma must be positive, got {}", cfg.gamma)));
    }
    let n = trace_a.pre[0].nrows();
    if trace_b.pre[0].nrows() != n {
        return Err(Error::dims("parent traces cover different node counts"));
    }
    let rows = subsample_rows(n, cfg.max_nodes, cfg.seed);
    let rows = rows.as_deref();
    let pa: Vec<Matrix> = trace_a.pre.iter().map(|m| take(m, rows)).collect();
    let pb: Vec<Matrix> = trace_b.pre.iter().map(|m| take(m, rows)).collect();
    let cka = cka_matrix(&pa, &pb)?;
    let matches = monotone_align(&cka, cfg.gamma);
    let layout = slot_layout(&matches);
    let sources = boundary_sources(&layout);
    let last = layout.len();

    let boundary_maps = sources
        .par_iter()
        .enumerate()
        .map(|(t, &(i, j))| {
            let (wa, wb) = (pa[i].ncols(), pb[j].ncols());
            if t == 0 || (t == last && !cfg.fit_output_map) {
                if wa != wb {
                    return Err(Error::dims(format!(
                        "boundary {t} widths differ ({wa} vs {wb}) but the map must be the identity"
                    )));
                }
                return Ok(Array2::eye(wa));
            }
            let heads = match (i.checked_sub(1), j.checked_sub(1)) {
                (Some(li), Some(lj)) => match (concat_heads(model_a, li), concat_heads(model_b, lj)) {
                    (Some(ha), Some(hb)) if ha == hb => Some(ha),
                    _ => None,
                },
                _ => None,
            };
            boundary_map(&pa[i], &pb[j], heads)
        })
        .collect::<Result<Vec<_>>>()?;

    let mlp_maps = layout
        .iter()
        .map(|slot| {
            let Some(i) = slot.a else { return Ok(None) };
            let Some(mlp_a) = &model_a.layers[i].post_mlp else { return Ok(None) };
            let inner = mlp_a.layers.len() - 1;
            let b_mlp = slot.b.and_then(|j| model_b.layers[j].post_mlp.as_ref().map(|m| (j, m)));
            let maps = match b_mlp {
                Some((j, mlp_b)) if mlp_b.layers.len() == mlp_a.layers.len() => (0..inner)
                    .map(|k| {
                        let ha = take(&trace_a.mlp_hidden[i][k], rows);
                        let hb = take(&trace_b.mlp_hidden[j][k], rows);
                        boundary_map(&ha, &hb, None)
                    })
                    .collect::<Result<Vec<_>>>()?,
                _ => {
                    if inner > 0 {
                        log::warn!("layer {i} of A: no matching update MLP on B, hidden maps set to identity");
                    }
                    mlp_a.layers[..inner].iter().map(|l| Array2::eye(l.w.ncols())).collect()
                }
            };
            Ok(Some(maps))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(AlignmentPlan {
        gamma: cfg.gamma,
        cka,
        matches,
        layout,
        boundary_maps,
        mlp_maps,
        widths_a: trace_a.pre.iter().map(|m| m.ncols()).collect(),
        widths_b: trace_b.pre.iter().map(|m| m.ncols()).collect(),
        nodes_used: rows.map_or(n, |r| r.len()),
    })
}

// ---------------------------------------------------------------------------
// plan.json + sibling tensor blob

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum MapRef {
    Identity { identity: usize },
    Tensor { tensor: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct PlanMeta {
    gamma: f64,
    depth_a: usize,
    depth_b: usize,
    widths_a: Vec<usize>,
    widths_b: Vec<usize>,
    nodes_used: usize,
    cka: Vec<Vec<f64>>,
    matches: Vec<[usize; 2]>,
    layout: Vec<Slot>,
    boundary_maps: Vec<MapRef>,
    mlp_maps: Vec<Option<Vec<MapRef>>>,
    tensor_file: String,
}

fn put_map(store: &mut TensorStore, name: String, r: &Matrix) -> MapRef {
    if is_identity(r) {
        MapRef::Identity { identity: r.nrows() }
    } else {
        store.put_matrix(name.clone(), r);
        MapRef::Tensor { tensor: name }
    }
}

fn get_map(store: &TensorStore, m: &MapRef) -> Result<Matrix> {
    match m {
        MapRef::Identity { identity } => Ok(Array2::eye(*identity)),
        MapRef::Tensor { tensor } => store.matrix(tensor),
    }
}

fn blob_path(json: &Path) -> std::path::PathBuf {
    json.with_extension("bin")
}

impl AlignmentPlan {
    /// Writes `path` (JSON) and a sibling `.bin` with the non-identity maps.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut store = TensorStore::default();
        let boundary_maps = self
            .boundary_maps
            .iter()
            .enumerate()
            .map(|(t, r)| put_map(&mut store, format!("boundary{t}.R"), r))
            .collect();
        let mlp_maps = self
            .mlp_maps
            .iter()
            .enumerate()
            .map(|(t, m)| {
                m.as_ref().map(|maps| {
                    maps.iter()
                        .enumerate()
                        .map(|(k, r)| put_map(&mut store, format!("slot{t}.mlp{k}.R"), r))
                        .collect()
                })
            })
            .collect();
        let bin = blob_path(path);
        let meta = PlanMeta {
            gamma: self.gamma,
            depth_a: self.widths_a.len() - 1,
            depth_b: self.widths_b.len() - 1,
            widths_a: self.widths_a.clone(),
            widths_b: self.widths_b.clone(),
            nodes_used: self.nodes_used,
            cka: self.cka.outer_iter().map(|r| r.to_vec()).collect(),
            matches: self.matches.iter().map(|&(i, j)| [i, j]).collect(),
            layout: self.layout.clone(),
            boundary_maps,
            mlp_maps,
            tensor_file: bin.file_name().expect("file name").to_string_lossy().into_owned(),
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        store.save_files(path, &bin, &meta)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (meta, store): (PlanMeta, TensorStore) = TensorStore::load_files(path, &blob_path(path))?;
        let rows = meta.cka.len();
        let cols = meta.cka.first().map_or(0, Vec::len);
        let cka = Array2::from_shape_vec((rows, cols), meta.cka.concat())
            .map_err(|_| Error::dims("plan: ragged similarity matrix"))?;
        let boundary_maps = meta
            .boundary_maps
            .iter()
            .map(|m| get_map(&store, m))
            .collect::<Result<Vec<_>>>()?;
        let mlp_maps = meta
            .mlp_maps
            .iter()
            .map(|m| m.as_ref().map(|v| v.iter().map(|r| get_map(&store, r)).collect::<Result<Vec<_>>>()).transpose())
            .collect::<Result<Vec<_>>>()?;
        store.ensure_all_used()?;
        let plan = AlignmentPlan {
            gamma: meta.gamma,
            cka,
            matches: meta.matches.iter().map(|m| (m[0], m[1])).collect(),
            layout: meta.layout,
            boundary_maps,
            mlp_maps,
            widths_a: meta.widths_a,
            widths_b: meta.widths_b,
            nodes_used: meta.nodes_used,
        };
        if plan.boundary_maps.len() != plan.layout.len() + 1 || plan.mlp_maps.len() != plan.layout.len() {
            return Err(Error::dims("plan: map count disagrees with the layout"));
        }
        Ok(plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs_diff;
    use ndarray::array;
    use rand::Rng;

    fn random(n: usize, d: usize, rng: &mut impl Rng) -> Matrix {
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn cka_hand_example() {
        let a = array![[1.0, 0.0], [-1.0, 0.0], [0.0, 0.0]];
        let b = a.slice(s![.., 0..1]).to_owned();
        assert!((compute_cka(a.view(), b.view()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cka_invariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = random(40, 5, &mut rng);
        let q = procrustes(random(40, 5, &mut rng).view(), random(40, 5, &mut rng).view()).unwrap();
        assert!((compute_cka(u.view(), u.view()).unwrap() - 1.0).abs() < 1e-12);
        assert!((compute_cka(u.view(), u.dot(&q).view()).unwrap() - 1.0).abs() < 1e-10);
        assert!((compute_cka(u.view(), (&u * -3.0).view()).unwrap() - 1.0).abs() < 1e-12);
        let v = random(40, 3, &mut rng);
        let (x, y) = (compute_cka(u.view(), v.view()).unwrap(), compute_cka(v.view(), u.view()).unwrap());
        assert!((x - y).abs() < 1e-9);
    }

    #[test]
    fn constant_input_scores_zero() {
        let a = Array2::from_elem((5, 2), 3.0);
        let b = array![[1.0], [2.0], [3.0], [4.0], [5.0]];
        assert_eq!(compute_cka(a.view(), b.view()).unwrap(), 0.0);
    }

    #[test]
    fn equal_depths_match_diagonally() {
        let s = array![[1.0, 0.1, 0.1], [0.1, 1.0, 0.1], [0.1, 0.1, 1.0]];
        assert_eq!(monotone_align(&s, 0.5), vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn anchors_survive_hostile_similarities() {
        let s = array![[0.0, 1.0, 1.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [1.0, 1.0, 0.0]];
        let m = monotone_align(&s, 0.5);
        assert_eq!(m.first(), Some(&(0, 0)));
        assert_eq!(m.last(), Some(&(3, 2)));
        assert!(m.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1));
    }

    #[test]
    fn layout_pads_shallower_side_early() {
        let slots = slot_layout(&[(0, 0), (1, 1), (2, 3)]);
        assert_eq!(
            slots,
            vec![
                Slot { a: Some(0), b: Some(0) },
                Slot { a: None, b: Some(1) },
                Slot { a: Some(1), b: Some(2) },
            ]
        );
        assert_eq!(boundary_sources(&slots), vec![(0, 0), (1, 1), (1, 2), (2, 3)]);
    }

    #[test]
    fn procrustes_identity_and_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = random(30, 4, &mut rng);
        let r = procrustes(u.view(), u.view()).unwrap();
        assert!(max_abs_diff(r.view(), Array2::<f64>::eye(4).view()) < 1e-10);
        let q = procrustes(random(30, 4, &mut rng).view(), random(30, 4, &mut rng).view()).unwrap();
        let r = procrustes(u.view(), u.dot(&q).view()).unwrap();
        assert!(max_abs_diff(r.view(), q.view()) < 1e-10);
    }

    #[test]
    fn tall_refinement_beats_polar_and_ties_go_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (random(40, 6, &mut rng), random(40, 2, &mut rng));
        let svd = thin_svd(a.t().dot(&b).view()).unwrap();
        let polar = svd.u.dot(&svd.v_t);
        let r = procrustes(a.view(), b.view()).unwrap();
        let obj = |r: &Matrix| frobenius((a.dot(r) - &b).view());
        assert!(orthogonality_error(&r) < 1e-10);
        assert!(obj(&r) <= obj(&polar) + 1e-12);

        // rank 3 in 5 columns: the two null directions stay put
        let low = random(40, 3, &mut rng).dot(&random(3, 5, &mut rng));
        let r = procrustes(low.view(), low.view()).unwrap();
        assert!(max_abs_diff(r.view(), Array2::<f64>::eye(5).view()) < 1e-6);
    }

    #[test]
    fn assignment_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for h in 1..=5 {
            let w: Vec<Vec<f64>> = (0..h).map(|_| (0..h).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let got = best_assignment(&w);
            let score = |p: &[usize]| p.iter().enumerate().map(|(k, &m)| w[k][m]).sum::<f64>();
            let mut perm: Vec<usize> = (0..h).collect();
            let mut best = f64::NEG_INFINITY;
            permute(&mut perm, 0, &mut |p| best = best.max(score(p)));
            assert!((score(&got) - best).abs() < 1e-12);
        }
        assert_eq!(best_assignment(&[vec![1.0, 1.0], vec![1.0, 1.0]]), vec![0, 1]);
    }

    fn permute(p: &mut Vec<usize>, i: usize, f: &mut impl FnMut(&[usize])) {
        if i == p.len() {
            return f(p);
        }
        for j in i..p.len() {
            p.swap(i, j);
            permute(p, i + 1, f);
            p.swap(i, j);
        }
    }

    #[test]
    fn shuffled_heads_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let (h, dh) = (3, 4);
        let a = Array2::from_shape_fn((60, h * dh), |_| rng.random_range(-1.0..1.0));
        // B = A with heads reordered (2, 0, 1) and units inside head 1 reversed
        let mut p = Array2::<f64>::zeros((h * dh, h * dh));
        for (k, m) in [(0, 1), (1, 2), (2, 0)] {
            for i in 0..dh {
                let j = if k == 1 { dh - 1 - i } else { i };
                p[[k * dh + i, m * dh + j]] = 1.0;
            }
        }
        let b = a.dot(&p);
        let r = boundary_map(&a, &b, Some((h, dh))).unwrap();
        assert!(crate::linalg::max_abs_diff(r.view(), p.view()) < 1e-9);
    }

    #[test]
    fn rank_deficient_map_is_still_semi_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(20, 1, &mut rng);
        let a = ndarray::concatenate![Axis(1), a, a, Array2::zeros((20, 2))];
        let b = random(20, 3, &mut rng);
        let r = procrustes(a.view(), b.view()).unwrap();
        assert!(orthogonality_error(&r) < 1e-10);
    }

    #[test]
    fn plan_round_trip() {
        let plan = AlignmentPlan {
            gamma: 0.5,
            cka: array![[1.0, 0.5], [0.5, 0.9]],
            matches: vec![(0, 0), (1, 1)],
            layout: vec![Slot { a: Some(0), b: Some(0) }],
            boundary_maps: vec![Array2::eye(3), array![[0.0, 1.0], [1.0, 0.0]]],
            mlp_maps: vec![Some(vec![Array2::eye(2)])],
            widths_a: vec![3, 2],
            widths_b: vec![3, 2],
            nodes_used: 10,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plan.json");
        plan.save(&path).unwrap();
        assert!(dir.path().join("plan.bin").exists());
        assert_eq!(AlignmentPlan::load(&path).unwrap(), plan);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"identity\": 3"));
    }
}
