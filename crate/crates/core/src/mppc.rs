//! Max pairwise Pearson correlation between two feature sets.
//!
//! For every side-A feature `i` the engine reports `max_j ρ(i, j)` over every
//! side-B feature of every layer. The F_A × F_B cross-moment matrix is never
//! held whole: it is split into tiles sized to a memory budget, each tile
//! streams all tokens, and per-feature maxima are merged across tiles with a
//! lowest-`j` tie-break.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harvest::corpus::TokenDocument;
use crate::harvest::{collect_aligned, ActivationStream};
use crate::io::write_atomic;
use crate::models::{HookKind, HookSite, Model};
use crate::par;
use crate::sae::FeatureRecords;

/// Raw-sum sufficient statistics for one (A-range × B-range) tile.
#[derive(Debug, Clone, PartialEq)]
pub struct PearsonAccumulator {
    pub n: u64,
    pub sum_x: Vec<f64>,
    pub sum_x2: Vec<f64>,
    pub sum_y: Vec<f64>,
    pub sum_y2: Vec<f64>,
    /// Row-major `fa × fb`.
    pub sum_xy: Vec<f64>,
}

impl PearsonAccumulator {
    pub fn new(fa: usize, fb: usize) -> Self {
        PearsonAccumulator {
            n: 0,
            sum_x: vec![0.0; fa],
            sum_x2: vec![0.0; fa],
            sum_y: vec![0.0; fb],
            sum_y2: vec![0.0; fb],
            sum_xy: vec![0.0; fa * fb],
        }
    }

    pub fn fa(&self) -> usize {
        self.sum_x.len()
    }

    pub fn fb(&self) -> usize {
        self.sum_y.len()
    }

    /// `xs` is `t × fa` and `ys` is `t × fb`, both token-major.
    pub fn accumulate_dense(&mut self, xs: &[f64], ys: &[f64]) -> Result<()> {
        let (fa, fb) = (self.fa(), self.fb());
        if fa == 0 || fb == 0 || !xs.len().is_multiple_of(fa) || !ys.len().is_multiple_of(fb) {
            return Err(Error::Shape("chunk width does not match accumulator".into()));
        }
        let t = xs.len() / fa;
        if ys.len() / fb != t {
            return Err(Error::Shape(format!(
                "misaligned chunk: {t} tokens on side A, {} on side B",
                ys.len() / fb
            )));
        }
        if t == 0 {
            return Ok(());
        }
        let xc = transpose(xs, t, fa);
        let yc = transpose(ys, t, fb);
        self.accumulate_columns(&xc, &yc, t);
        Ok(())
    }

    /// Feature-major columns of length `t`.
    fn accumulate_columns(&mut self, xc: &[f64], yc: &[f64], t: usize) {
        let (fa, fb) = (self.fa(), self.fb());
        for i in 0..fa {
            let x = &xc[i * t..(i + 1) * t];
            let (s, s2) = sums(x);
            self.sum_x[i] += s;
            self.sum_x2[i] += s2;
        }
        for j in 0..fb {
            let y = &yc[j * t..(j + 1) * t];
            let (s, s2) = sums(y);
            self.sum_y[j] += s;
            self.sum_y2[j] += s2;
        }
        let rows = &mut self.sum_xy;
        par::for_each_chunk_mut(rows, fb, |i, row| {
            let x = &xc[i * t..(i + 1) * t];
            if x.iter().all(|v| *v == 0.0) {
                return;
            }
            for (j, acc) in row.iter_mut().enumerate() {
                *acc += crate::numerics::dot(x, &yc[j * t..(j + 1) * t]);
            }
        });
        self.n += t as u64;
    }

    /// One token whose non-zero entries are given as (tile-local index, value).
    pub fn accumulate_sparse_token(&mut self, xs: &[(usize, f64)], ys: &[(usize, f64)]) {
        let fb = self.fb();
        for &(i, x) in xs {
            self.sum_x[i] += x;
            self.sum_x2[i] += x * x;
            for &(j, y) in ys {
                self.sum_xy[i * fb + j] += x * y;
            }
        }
        for &(j, y) in ys {
            self.sum_y[j] += y;
            self.sum_y2[j] += y * y;
        }
        self.n += 1;
    }

    pub fn merge(&mut self, other: &PearsonAccumulator) -> Result<()> {
        if self.fa() != other.fa() || self.fb() != other.fb() {
            return Err(Error::Shape("cannot merge accumulators of different tiles".into()));
        }
        self.n += other.n;
        for (a, b) in [
            (&mut self.sum_x, &other.sum_x),
            (&mut self.sum_x2, &other.sum_x2),
            (&mut self.sum_y, &other.sum_y),
            (&mut self.sum_y2, &other.sum_y2),
            (&mut self.sum_xy, &other.sum_xy),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    fn var_x(&self, i: usize) -> Option<f64> {
        variance_term(self.n, self.sum_x[i], self.sum_x2[i])
    }

    fn var_y(&self, j: usize) -> Option<f64> {
        variance_term(self.n, self.sum_y[j], self.sum_y2[j])
    }

    /// Pearson ρ of tile-local pair (i, j); `None` for zero-variance features.
    pub fn correlation(&self, i: usize, j: usize) -> Option<f64> {
        let n = self.n as f64;
        let vx = self.var_x(i)?;
        let vy = self.var_y(j)?;
        let cov = n * self.sum_xy[i * self.fb() + j] - self.sum_x[i] * self.sum_y[j];
        Some(cov / (vx.sqrt() * vy.sqrt()))
    }

    /// Best side-B match for every side-A row of the tile. `allowed(i, j)`
    /// filters candidate pairs.
    fn best_matches(&self, allowed: &dyn Fn(usize, usize) -> bool) -> Vec<TileBest> {
        let n = self.n as f64;
        let fb = self.fb();
        let sd_y: Vec<Option<f64>> = (0..fb).map(|j| self.var_y(j).map(f64::sqrt)).collect();
        (0..self.fa())
            .map(|i| {
                let Some(vx) = self.var_x(i) else {
                    return TileBest::Undefined;
                };
                let sx = vx.sqrt();
                let mut best: Option<(usize, f64)> = None;
                for (j, sy) in sd_y.iter().enumerate() {
                    let Some(sy) = sy else { continue };
                    if !allowed(i, j) {
                        continue;
                    }
                    let cov = n * self.sum_xy[i * fb + j] - self.sum_x[i] * self.sum_y[j];
                    let rho = cov / (sx * sy);
                    if best.is_none_or(|(_, b)| rho > b) {
                        best = Some((j, rho));
                    }
                }
                match best {
                    Some((j, r)) => TileBest::Found(j, r),
                    None => TileBest::NoCandidate,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum TileBest {
    Undefined,
    NoCandidate,
    Found(usize, f64),
}

/// `n Σx² − (Σx)²`, or `None` when it is zero up to rounding.
fn variance_term(n: u64, s: f64, s2: f64) -> Option<f64> {
    let n = n as f64;
    let v = n * s2 - s * s;
    if v <= 1e-12 * n * s2 || v <= 0.0 {
        None
    } else {
        Some(v)
    }
}

fn sums(x: &[f64]) -> (f64, f64) {
    x.iter().fold((0.0, 0.0), |(a, b), v| (a + v, b + v * v))
}

fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = m[r * cols + c];
        }
    }
    out
}

/// Feature activations of one layer on one side.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureData {
    Dense(ActivationStream),
    Sparse(FeatureRecords),
}

impl FeatureData {
    pub fn len(&self) -> usize {
        match self {
            FeatureData::Dense(s) => s.len(),
            FeatureData::Sparse(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_features(&self) -> usize {
        match self {
            FeatureData::Dense(s) => s.dim,
            FeatureData::Sparse(r) => r.n_features,
        }
    }

    fn density(&self) -> f64 {
        match self {
            FeatureData::Dense(_) => 1.0,
            FeatureData::Sparse(r) => r.density(),
        }
    }

    /// Write features `lo..hi` of token `t` into `out[k]` at stride `stride`.
    fn gather(&self, t: usize, lo: usize, hi: usize, out: &mut [f64], stride: usize) {
        match self {
            FeatureData::Dense(s) => {
                for (k, v) in s.row(t)[lo..hi].iter().enumerate() {
                    out[k * stride] = *v;
                }
            }
            FeatureData::Sparse(r) => {
                for k in 0..hi - lo {
                    out[k * stride] = 0.0;
                }
                let (idx, val) = r.row(t);
                let a = idx.partition_point(|&j| (j as usize) < lo);
                for (&j, &v) in idx[a..].iter().zip(&val[a..]) {
                    let j = j as usize;
                    if j >= hi {
                        break;
                    }
                    out[(j - lo) * stride] = v;
                }
            }
        }
    }

    fn sparse_entries(&self, t: usize, lo: usize, hi: usize, base: usize, out: &mut Vec<(usize, f64)>) {
        if let FeatureData::Sparse(r) = self {
            let (idx, val) = r.row(t);
            let a = idx.partition_point(|&j| (j as usize) < lo);
            for (&j, &v) in idx[a..].iter().zip(&val[a..]) {
                let j = j as usize;
                if j >= hi {
                    break;
                }
                out.push((base + j - lo, v));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSource {
    pub layer: usize,
    pub data: FeatureData,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Sae,
    Neuron,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationJob {
    pub side_a: Vec<LayerSource>,
    pub side_b: Vec<LayerSource>,
    /// e.g. `p->m`
    pub direction: String,
    pub mode: Mode,
}

impl CorrelationJob {
    pub fn new(side_a: Vec<LayerSource>, side_b: Vec<LayerSource>, direction: &str, mode: Mode) -> Self {
        CorrelationJob {
            side_a,
            side_b,
            direction: direction.to_string(),
            mode,
        }
    }

    /// Same sources with the sides exchanged.
    pub fn reversed(&self) -> CorrelationJob {
        let direction = match self.direction.split_once("->") {
            Some((a, b)) => format!("{b}->{a}"),
            None => format!("reverse({})", self.direction),
        };
        CorrelationJob {
            side_a: self.side_b.clone(),
            side_b: self.side_a.clone(),
            direction,
            mode: self.mode,
        }
    }

    pub fn n_tokens(&self) -> Result<usize> {
        let mut lens = self.side_a.iter().chain(&self.side_b).map(|s| s.data.len());
        let n = lens
            .next()
            .ok_or_else(|| Error::Config("correlation job has no sources".into()))?;
        if self.side_a.is_empty() || self.side_b.is_empty() {
            return Err(Error::Config("both sides need at least one source".into()));
        }
        if lens.any(|m| m != n) {
            return Err(Error::Data("sources are not index-aligned (different lengths)".into()));
        }
        Ok(n)
    }
}

/// Global feature index ↔ (source, local index) for one side.
struct SideIndex {
    starts: Vec<usize>,
    total: usize,
}

impl SideIndex {
    fn new(side: &[LayerSource]) -> Self {
        let mut starts = Vec::with_capacity(side.len());
        let mut total = 0;
        for s in side {
            starts.push(total);
            total += s.data.n_features();
        }
        SideIndex { starts, total }
    }

    fn locate(&self, g: usize) -> (usize, usize) {
        let s = self.starts.partition_point(|&st| st <= g) - 1;
        (s, g - self.starts[s])
    }

    /// Pieces `(source, local_lo, local_hi, offset_in_range)` covering `lo..hi`.
    fn pieces(&self, side: &[LayerSource], lo: usize, hi: usize) -> Vec<(usize, usize, usize, usize)> {
        let mut out = Vec::new();
        for (s, src) in side.iter().enumerate() {
            let a = self.starts[s];
            let b = a + src.data.n_features();
            let l = lo.max(a);
            let h = hi.min(b);
            if l < h {
                out.push((s, l - a, h - a, l - lo));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MppcOptions {
    /// Bytes available for cross-moment tiles across all workers.
    pub memory_budget: usize,
    pub tile_a: Option<usize>,
    pub tile_b: Option<usize>,
    pub token_chunk: usize,
    /// Both sides must be at most this dense for the co-activation path.
    pub sparse_threshold: f64,
    /// Only match features within the same layer index.
    pub same_layer_only: bool,
}

impl Default for MppcOptions {
    fn default() -> Self {
        MppcOptions {
            memory_budget: 1 << 30,
            tile_a: None,
            tile_b: None,
            token_chunk: 2048,
            sparse_threshold: 0.05,
            same_layer_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRow {
    pub feature_a: usize,
    pub layer_a: usize,
    pub best_feature_b: Option<usize>,
    pub layer_b: Option<usize>,
    /// `None` when feature A has zero variance or no candidate exists.
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchTable {
    pub direction: String,
    pub mode: Mode,
    pub n_tokens: usize,
    pub rows: Vec<MatchRow>,
}

impl MatchTable {
    pub fn defined(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().filter_map(|r| r.rho)
    }

    pub fn n_undefined(&self) -> usize {
        self.rows.iter().filter(|r| r.rho.is_none()).count()
    }

    /// Mean ρ over defined features; `None` if there are none.
    pub fn mean_rho(&self) -> Option<f64> {
        let v: Vec<f64> = self.defined().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn share_above(&self, threshold: f64) -> f64 {
        let v: Vec<f64> = self.defined().collect();
        if v.is_empty() {
            return 0.0;
        }
        v.iter().filter(|r| **r > threshold).count() as f64 / v.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("feature_a,layer_a,best_feature_b,layer_b,rho\n");
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.feature_a,
                r.layer_a,
                opt(r.best_feature_b),
                opt(r.layer_b),
                r.rho.map(|x| format!("{x:.17e}")).unwrap_or_default()
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn read_csv(path: &Path) -> Result<MatchTable> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |d: String| Error::Format {
            path: path.to_path_buf(),
            detail: d,
        };
        let mut lines = text.lines();
        if lines.next() != Some("feature_a,layer_a,best_feature_b,layer_b,rho") {
            return Err(bad("missing match-table header".into()));
        }
        let mut rows = Vec::new();
        for (k, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(format!("line {} has {} fields", k + 2, f.len())));
            }
            let num = |s: &str| -> Result<Option<usize>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad(format!("bad integer {s:?}")))
                }
            };
            rows.push(MatchRow {
                feature_a: num(f[0])?.ok_or_else(|| bad("empty feature_a".into()))?,
                layer_a: num(f[1])?.ok_or_else(|| bad("empty layer_a".into()))?,
                best_feature_b: num(f[2])?,
                layer_b: num(f[3])?,
                rho: if f[4].is_empty() {
                    None
                } else {
                    Some(f[4].parse().map_err(|_| bad(format!("bad rho {:?}", f[4])))?)
                },
            });
        }
        Ok(MatchTable {
            direction: String::new(),
            mode: Mode::Sae,
            n_tokens: 0,
            rows,
        })
    }
}

/// Streaming, tiled MPPC over a job.
pub fn run_mppc(job: &CorrelationJob, opts: &MppcOptions) -> Result<MatchTable> {
    let n = job.n_tokens()?;
    if n < 2 {
        return Err(Error::Data(format!("MPPC needs at least 2 tokens, got {n}")));
    }
    let ia = SideIndex::new(&job.side_a);
    let ib = SideIndex::new(&job.side_b);
    if ia.total == 0 || ib.total == 0 {
        return Err(Error::Config("a side has no features".into()));
    }
    let sparse = job
        .side_a
        .iter()
        .chain(&job.side_b)
        .all(|s| matches!(s.data, FeatureData::Sparse(_)) && s.data.density() <= opts.sparse_threshold);
    let (ta, tb) = tile_sizes(ia.total, ib.total, opts);
    let tiles_a: Vec<(usize, usize)> = (0..ia.total)
        .step_by(ta)
        .map(|lo| (lo, (lo + ta).min(ia.total)))
        .collect();
    let tiles_b: Vec<(usize, usize)> = (0..ib.total)
        .step_by(tb)
        .map(|lo| (lo, (lo + tb).min(ib.total)))
        .collect();
    let layer_a = |g: usize| job.side_a[ia.locate(g).0].layer;
    let layer_b = |g: usize| job.side_b[ib.locate(g).0].layer;

    let per_a_tile = par::map(&tiles_a, |&(a0, a1)| -> Result<Vec<TileBest>> {
        let mut best = vec![TileBest::NoCandidate; a1 - a0];
        let mut undefined = vec![false; a1 - a0];
        for &(b0, b1) in &tiles_b {
            let acc = if sparse {
                tile_sparse(job, &ia, &ib, (a0, a1), (b0, b1), n)
            } else {
                tile_dense(job, &ia, &ib, (a0, a1), (b0, b1), n, opts.token_chunk)?
            };
            let allowed = |i: usize, j: usize| !opts.same_layer_only || layer_a(a0 + i) == layer_b(b0 + j);
            for (i, tb) in acc.best_matches(&allowed).into_iter().enumerate() {
                match tb {
                    TileBest::Undefined => undefined[i] = true,
                    TileBest::NoCandidate => {}
                    TileBest::Found(j, r) => {
                        let better = match best[i] {
                            TileBest::Found(_, cur) => r > cur,
                            _ => true,
                        };
                        if better {
                            best[i] = TileBest::Found(b0 + j, r);
                        }
                    }
                }
            }
        }
        Ok(best
            .into_iter()
            .zip(undefined)
            .map(|(b, u)| if u { TileBest::Undefined } else { b })
            .collect())
    });

    let mut rows = Vec::with_capacity(ia.total);
    let mut g = 0;
    for tile in per_a_tile {
        for b in tile? {
            let (s, local) = ia.locate(g);
            let (best_feature_b, layer_b, rho) = match b {
                TileBest::Found(j, r) => {
                    let (sb, lb) = ib.locate(j);
                    (Some(lb), Some(job.side_b[sb].layer), Some(r.clamp(-1.0, 1.0)))
                }
                _ => (None, None, None),
            };
            rows.push(MatchRow {
                feature_a: local,
                layer_a: job.side_a[s].layer,
                best_feature_b,
                layer_b,
                rho,
            });
            g += 1;
        }
    }
    Ok(MatchTable {
        direction: job.direction.clone(),
        mode: job.mode,
        n_tokens: n,
        rows,
    })
}

fn tile_sizes(fa: usize, fb: usize, opts: &MppcOptions) -> (usize, usize) {
    let workers = par::threads().max(1);
    let per_worker = (opts.memory_budget / workers / 8).max(1);
    let tb = opts.tile_b.unwrap_or(fb).clamp(1, fb);
    let fit = (per_worker / tb).max(1);
    let spread = fa.div_ceil(workers).max(1);
    let ta = opts.tile_a.unwrap_or(fit.min(spread)).clamp(1, fa);
    (ta, tb)
}

fn tile_dense(
    job: &CorrelationJob,
    ia: &SideIndex,
    ib: &SideIndex,
    (a0, a1): (usize, usize),
    (b0, b1): (usize, usize),
    n: usize,
    chunk: usize,
) -> Result<PearsonAccumulator> {
    let (fa, fb) = (a1 - a0, b1 - b0);
    let mut acc = PearsonAccumulator::new(fa, fb);
    let pa = ia.pieces(&job.side_a, a0, a1);
    let pb = ib.pieces(&job.side_b, b0, b1);
    let chunk = chunk.max(1);
    let mut xc = vec![0.0; fa * chunk];
    let mut yc = vec![0.0; fb * chunk];
    for t0 in (0..n).step_by(chunk) {
        let t = chunk.min(n - t0);
        for k in 0..t {
            for &(s, lo, hi, off) in &pa {
                job.side_a[s].data.gather(t0 + k, lo, hi, &mut xc[off * t + k..], t);
            }
            for &(s, lo, hi, off) in &pb {
                job.side_b[s].data.gather(t0 + k, lo, hi, &mut yc[off * t + k..], t);
            }
        }
        par::sequential(|| acc.accumulate_columns(&xc[..fa * t], &yc[..fb * t], t));
    }
    Ok(acc)
}

fn tile_sparse(
    job: &CorrelationJob,
    ia: &SideIndex,
    ib: &SideIndex,
    (a0, a1): (usize, usize),
    (b0, b1): (usize, usize),
    n: usize,
) -> PearsonAccumulator {
    let mut acc = PearsonAccumulator::new(a1 - a0, b1 - b0);
    let pa = ia.pieces(&job.side_a, a0, a1);
    let pb = ib.pieces(&job.side_b, b0, b1);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for t in 0..n {
        xs.clear();
        ys.clear();
        for &(s, lo, hi, off) in &pa {
            job.side_a[s].data.sparse_entries(t, lo, hi, off, &mut xs);
        }
        for &(s, lo, hi, off) in &pb {
            job.side_b[s].data.sparse_entries(t, lo, hi, off, &mut ys);
        }
        acc.accumulate_sparse_token(&xs, &ys);
    }
    acc
}

/// Per-feature ρ(main) − ρ(skyline) with a distribution summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferenceReport {
    pub deltas: Vec<Option<f64>>,
    pub n_defined: usize,
    pub mean: Option<f64>,
    /// Nearest-rank quantiles at 5, 25, 50, 75 and 95 percent.
    pub quantiles: Vec<(f64, f64)>,
    /// Share of defined deltas with |δ| < 0.05.
    pub share_small: f64,
}

pub const DIFFERENCE_QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

/// Nearest-rank quantile of an ascending slice.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let k = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

pub fn mppc_difference(main: &MatchTable, skyline: &MatchTable) -> Result<DifferenceReport> {
    if main.rows.len() != skyline.rows.len()
        || main
            .rows
            .iter()
            .zip(&skyline.rows)
            .any(|(a, b)| (a.feature_a, a.layer_a) != (b.feature_a, b.layer_a))
    {
        return Err(Error::Data("tables cover different side-A feature sets".into()));
    }
    let deltas: Vec<Option<f64>> = main
        .rows
        .iter()
        .zip(&skyline.rows)
        .map(|(a, b)| Some(a.rho? - b.rho?))
        .collect();
    let mut d: Vec<f64> = deltas.iter().flatten().copied().collect();
    d.sort_by(f64::total_cmp);
    let n = d.len();
    Ok(DifferenceReport {
        n_defined: n,
        mean: (n > 0).then(|| d.iter().sum::<f64>() / n as f64),
        quantiles: if n > 0 {
            DIFFERENCE_QUANTILES.iter().map(|&q| (q, quantile(&d, q))).collect()
        } else {
            Vec::new()
        },
        share_small: if n > 0 {
            d.iter().filter(|x| x.abs() < 0.05).count() as f64 / n as f64
        } else {
            0.0
        },
        deltas,
    })
}

/// `counts[l_a][l_b]`: side-A features of layer `l_a` whose best match sits in
/// layer `l_b`. Undefined rows are skipped.
pub fn depth_histogram(table: &MatchTable, layers_a: usize, layers_b: usize) -> Result<Vec<Vec<usize>>> {
    let mut h = vec![vec![0usize; layers_b]; layers_a];
    for r in &table.rows {
        let Some(lb) = r.layer_b else { continue };
        if r.layer_a >= layers_a || lb >= layers_b {
            return Err(Error::Data(format!(
                "match ({}, {}) outside a {layers_a}×{layers_b} histogram",
                r.layer_a, lb
            )));
        }
        h[r.layer_a][lb] += 1;
    }
    Ok(h)
}

/// Raw neuron activations of every layer of both models on one corpus pass.
pub fn neuron_mode_sources(
    model_a: &Model,
    model_b: &Model,
    docs: &[TokenDocument],
    truncation: usize,
) -> Result<CorrelationJob> {
    let side = |m: &Model| -> Result<Vec<LayerSource>> {
        let kind = HookKind::neuron_site(m.arch());
        let sites: Vec<HookSite> = (0..m.n_layers()).map(|l| HookSite::new(l, kind)).collect();
        let streams = collect_aligned(m, docs, &sites, truncation)?;
        Ok(streams
            .into_iter()
            .enumerate()
            .map(|(layer, s)| LayerSource {
                layer,
                data: FeatureData::Dense(s),
            })
            .collect())
    };
    let a = side(model_a)?;
    let b = side(model_b)?;
    let tag = |m: &Model| match m.arch() {
        crate::models::Arch::Transformer => "p",
        crate::models::Arch::Mamba => "m",
    };
    Ok(CorrelationJob::new(
        a,
        b,
        &format!("{}->{}", tag(model_a), tag(model_b)),
        Mode::Neuron,
    ))
}

/// Neuron-mode job from explicit per-layer streams. Every layer on a side
/// must have the same width.
pub fn neuron_job(side_a: Vec<ActivationStream>, side_b: Vec<ActivationStream>, direction: &str) -> Result<CorrelationJob> {
    let widths: BTreeSet<usize> = side_a.iter().map(|s| s.dim).collect();
    let widths_b: BTreeSet<usize> = side_b.iter().map(|s| s.dim).collect();
    if widths.len() > 1 || widths_b.len() > 1 {
        return Err(Error::Config("neuron sites differ in width across layers".into()));
    }
    let wrap = |v: Vec<ActivationStream>| {
        v.into_iter()
            .enumerate()
            .map(|(layer, s)| LayerSource {
                layer,
                data: FeatureData::Dense(s),
            })
            .collect()
    };
    Ok(CorrelationJob::new(wrap(side_a), wrap(side_b), direction, Mode::Neuron))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkylineKind {
    /// Same architecture, different training seed.
    ModelSeedVariant,
    /// Second SAE set on the same model.
    SaeSeedVariant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Reverse,
}

/// Feature sources available to skyline experiments.
#[derive(Debug, Clone, Default)]
pub struct SkylineAssets {
    pub base: Vec<LayerSource>,
    pub model_variant: Option<Vec<LayerSource>>,
    pub sae_variant: Option<Vec<LayerSource>>,
}

pub fn skyline_job(kind: SkylineKind, assets: &SkylineAssets, direction: Direction) -> Result<CorrelationJob> {
    if assets.base.is_empty() {
        return Err(Error::Config("skyline needs base features".into()));
    }
    let (other, tag) = match kind {
        SkylineKind::ModelSeedVariant => (&assets.model_variant, "x->x'"),
        SkylineKind::SaeSeedVariant => (&assets.sae_variant, "x->x(sae')"),
    };
    let other = other
        .as_ref()
        .ok_or_else(|| Error::Config(format!("skyline {kind:?} requires its variant assets")))?;
    let job = CorrelationJob::new(assets.base.clone(), other.clone(), tag, Mode::Sae);
    Ok(match direction {
        Direction::Forward => job,
        Direction::Reverse => job.reversed(),
    })
}

#[cfg(test)]
mod tests;
