//! One-hidden-layer sparse autoencoders.
//!
//! `f = ReLU(W_enc x + b_enc)`, `x̂ = W_dec f + b_dec`, trained on
//! `‖x − x̂‖² + λ Σ f` with closed-form gradients and Adam. The input enters
//! the encoder raw; `b_dec` only appears in the decoder.

use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harvest::ActivationStream;
use crate::io::{read_tensor_file, take_tensor, write_tensor_file, TensorEntry};
use crate::numerics::Matrix;
use crate::{par, rng};

pub const SAE_MAGIC: &[u8; 8] = b"ULABSAE1";

/// Rows per gradient work unit. Partial gradients are summed in chunk order,
/// so results do not depend on the thread count.
const GRAD_CHUNK: usize = 64;

/// A feature never firing for this many consecutive samples counts as dead.
pub const DEAD_WINDOW: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    /// F × D
    pub w_enc: Matrix,
    pub b_enc: Vec<f64>,
    /// D × F
    pub w_dec: Matrix,
    pub b_dec: Vec<f64>,
}

/// Gradients share the parameter layout.
pub type SaeGrads = SaeParams;

impl SaeParams {
    pub fn zeros(d: usize, f: usize) -> Self {
        SaeParams {
            w_enc: Matrix::zeros(f, d),
            b_enc: vec![0.0; f],
            w_dec: Matrix::zeros(d, f),
            b_dec: vec![0.0; d],
        }
    }

    pub fn d(&self) -> usize {
        self.w_dec.rows()
    }

    pub fn f(&self) -> usize {
        self.w_dec.cols()
    }

    fn tensors(&self) -> [&[f64]; 4] {
        [self.w_enc.data(), &self.b_enc, self.w_dec.data(), &self.b_dec]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w_enc.data_mut(),
            &mut self.b_enc,
            self.w_dec.data_mut(),
            &mut self.b_dec,
        ]
    }

    fn add_assign(&mut self, other: &SaeParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn validate(&self) -> Result<()> {
        let (d, f) = (self.d(), self.f());
        if f <= d {
            return Err(Error::Config(format!("SAE must be overcomplete (F={f}, D={d})")));
        }
        if self.w_enc.shape() != (f, d) || self.b_enc.len() != f || self.b_dec.len() != d {
            return Err(Error::Shape("SAE tensor shapes disagree".into()));
        }
        if !self.is_finite() {
            return Err(Error::NonFinite("SAE parameters".into()));
        }
        Ok(())
    }

    /// Rescale every decoder column to unit norm, compensating in the encoder
    /// so that `x̂` is unchanged.
    pub fn normalize_decoder(&mut self) {
        let (d, f) = (self.d(), self.f());
        for j in 0..f {
            let n = (0..d).map(|r| self.w_dec.get(r, j).powi(2)).sum::<f64>().sqrt();
            if n > 0.0 {
                for r in 0..d {
                    let v = self.w_dec.get(r, j) / n;
                    self.w_dec.set(r, j, v);
                }
                for v in self.w_enc.row_mut(j) {
                    *v *= n;
                }
                self.b_enc[j] *= n;
            }
        }
    }
}

/// Decoder columns uniform on [-1, 1] then rescaled to norm √(2D/F);
/// encoder is the decoder transpose; zero biases.
pub fn sae_init(d: usize, f: usize, seed: u64) -> Result<SaeParams> {
    if f <= d || d == 0 {
        return Err(Error::Config(format!("SAE must be overcomplete (F={f}, D={d})")));
    }
    let mut r = rng::derived(seed, "sae-init");
    let mut w_dec = Matrix::from_fn(d, f, |_, _| r.random_range(-1.0..1.0));
    let target = (2.0 * d as f64 / f as f64).sqrt();
    for j in 0..f {
        let n = (0..d).map(|i| w_dec.get(i, j).powi(2)).sum::<f64>().sqrt();
        for i in 0..d {
            let v = w_dec.get(i, j) * target / n;
            w_dec.set(i, j, v);
        }
    }
    Ok(SaeParams {
        w_enc: w_dec.transpose(),
        b_enc: vec![0.0; f],
        w_dec,
        b_dec: vec![0.0; d],
    })
}

fn check_input(p: &SaeParams, x: &[f64]) -> Result<()> {
    if x.len() != p.d() {
        return Err(Error::Shape(format!("SAE expects D={}, got {}", p.d(), x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("SAE input".into()));
    }
    Ok(())
}

fn encode_into(p: &SaeParams, x: &[f64], pre: &mut [f64]) {
    p.w_enc.matvec_into(x, pre);
    for (v, b) in pre.iter_mut().zip(&p.b_enc) {
        *v += b;
    }
}

pub fn sae_encode(p: &SaeParams, x: &[f64]) -> Result<Vec<f64>> {
    check_input(p, x)?;
    let mut f = vec![0.0; p.f()];
    encode_into(p, x, &mut f);
    for v in &mut f {
        *v = v.max(0.0);
    }
    Ok(f)
}

pub fn sae_decode(p: &SaeParams, f: &[f64]) -> Result<Vec<f64>> {
    if f.len() != p.f() {
        return Err(Error::Shape(format!("SAE expects F={}, got {}", p.f(), f.len())));
    }
    let mut x = p.b_dec.clone();
    p.w_dec.matvec_add_into(f, &mut x);
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub mse: f64,
    pub l1: f64,
}

pub fn sae_loss(p: &SaeParams, x: &[f64], lambda_l1: f64) -> Result<LossTerms> {
    if !(lambda_l1 >= 0.0) {
        return Err(Error::Config(format!("lambda_l1 must be >= 0, got {lambda_l1}")));
    }
    let f = sae_encode(p, x)?;
    let xh = sae_decode(p, &f)?;
    let mse: f64 = x.iter().zip(&xh).map(|(a, b)| (a - b) * (a - b)).sum();
    let l1 = lambda_l1 * f.iter().sum::<f64>();
    Ok(LossTerms {
        total: mse + l1,
        mse,
        l1,
    })
}

/// Per-batch statistics gathered while computing gradients.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchStats {
    pub mse: f64,
    pub l0: f64,
    pub l1: f64,
}

/// Gradients of the batch-mean loss. `batch` holds `n` rows of width D.
pub fn sae_grad(p: &SaeParams, batch: &[f64], lambda_l1: f64) -> Result<SaeGrads> {
    Ok(sae_grad_with_stats(p, batch, lambda_l1, None)?.0)
}

fn sae_grad_with_stats(
    p: &SaeParams,
    batch: &[f64],
    lambda_l1: f64,
    fired: Option<&mut [bool]>,
) -> Result<(SaeGrads, BatchStats)> {
    let d = p.d();
    if batch.is_empty() || !batch.len().is_multiple_of(d) {
        return Err(Error::Shape(format!(
            "batch of {} values is not a non-empty multiple of D={d}",
            batch.len()
        )));
    }
    if !(lambda_l1 >= 0.0) {
        return Err(Error::Config(format!("lambda_l1 must be >= 0, got {lambda_l1}")));
    }
    if batch.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("SAE batch".into()));
    }
    let n = batch.len() / d;
    let scale = 1.0 / n as f64;
    let chunks: Vec<&[f64]> = batch.chunks(GRAD_CHUNK * d).collect();
    let parts = par::map(&chunks, |c| grad_chunk(p, c, lambda_l1, scale));
    let mut it = parts.into_iter();
    let (mut g, mut stats, mut active) = it.next().expect("non-empty batch");
    for (pg, ps, pa) in it {
        g.add_assign(&pg);
        stats.mse += ps.mse;
        stats.l0 += ps.l0;
        stats.l1 += ps.l1;
        active.extend(pa);
    }
    if let Some(fired) = fired {
        for j in active {
            fired[j] = true;
        }
    }
    stats.mse *= scale;
    stats.l0 *= scale;
    stats.l1 *= scale;
    Ok((g, stats))
}

fn grad_chunk(
    p: &SaeParams,
    rows: &[f64],
    lambda_l1: f64,
    scale: f64,
) -> (SaeGrads, BatchStats, Vec<usize>) {
    let (d, f) = (p.d(), p.f());
    let mut g = SaeParams::zeros(d, f);
    let mut stats = BatchStats::default();
    let mut pre = vec![0.0; f];
    let mut active: Vec<usize> = Vec::new();
    let mut resid = vec![0.0; d];
    let mut seen = vec![false; f];
    let wd = p.w_dec.data();
    for x in rows.chunks_exact(d) {
        encode_into(p, x, &mut pre);
        active.clear();
        active.extend((0..f).filter(|&j| pre[j] > 0.0));
        resid.copy_from_slice(&p.b_dec);
        for &j in &active {
            let a = pre[j];
            for (r, o) in resid.iter_mut().enumerate() {
                *o += wd[r * f + j] * a;
            }
            seen[j] = true;
            stats.l1 += lambda_l1 * a;
        }
        let mut sq = 0.0;
        for (o, xi) in resid.iter_mut().zip(x) {
            *o -= xi;
            sq += *o * *o;
        }
        stats.mse += sq;
        stats.l0 += active.len() as f64;
        // dL/dx̂ = 2 r / n
        for v in resid.iter_mut() {
            *v *= 2.0 * scale;
        }
        for (gb, r) in g.b_dec.iter_mut().zip(&resid) {
            *gb += r;
        }
        let gwd = g.w_dec.data_mut();
        for &j in &active {
            let a = pre[j];
            let mut df = lambda_l1 * scale;
            for (r, rv) in resid.iter().enumerate() {
                gwd[r * f + j] += rv * a;
                df += wd[r * f + j] * rv;
            }
            g.b_enc[j] += df;
            for (ge, xi) in g.w_enc.row_mut(j).iter_mut().zip(x) {
                *ge += df * xi;
            }
        }
    }
    let fired = (0..f).filter(|&j| seen[j]).collect();
    (g, stats, fired)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: SaeParams,
    pub v: SaeParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(p: &SaeParams) -> Self {
        AdamState {
            m: SaeParams::zeros(p.d(), p.f()),
            v: SaeParams::zeros(p.d(), p.f()),
            step: 0,
        }
    }
}

/// Bias-corrected Adam on flat slices; `t` is the 1-based step number.
pub fn adam_update(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    cfg: &AdamConfig,
) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        p[i] -= lr * mh / (vh.sqrt() + cfg.eps);
    }
}

pub fn adam_step(
    p: &mut SaeParams,
    g: &SaeGrads,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if g.w_enc.shape() != p.w_enc.shape() || state.m.w_enc.shape() != p.w_enc.shape() {
        return Err(Error::Shape("gradient/optimizer state shape differs from parameters".into()));
    }
    state.step += 1;
    let t = state.step;
    let AdamState { m, v, .. } = state;
    for (((pt, gt), mt), vt) in p
        .tensors_mut()
        .into_iter()
        .zip(g.tensors())
        .zip(m.tensors_mut())
        .zip(v.tensors_mut())
    {
        adam_update(pt, gt, mt, vt, t, lr, cfg);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaeTrainConfig {
    /// Dictionary size; `None` means 32·D.
    pub dict_size: Option<usize>,
    pub lambda_l1: f64,
    pub lr: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub total_steps: usize,
    /// Passes allowed over the stream, each in a fresh seeded order.
    pub epochs: usize,
    /// Fraction of steps over which λ ramps linearly from 0.
    pub warmup_frac: f64,
    /// Renormalize decoder columns to unit norm after every step.
    pub normalize_decoder: bool,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        SaeTrainConfig {
            dict_size: None,
            lambda_l1: 1e-3,
            lr: 8e-4,
            adam: AdamConfig::default(),
            batch_size: 1024,
            total_steps: 1000,
            epochs: 1,
            warmup_frac: 0.05,
            normalize_decoder: false,
            log_every: 100,
            seed: 0,
        }
    }
}

impl SaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_l1 >= 0.0) {
            return Err(Error::Config(format!("lambda_l1 must be >= 0, got {}", self.lambda_l1)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size, epochs and log_every must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("warmup_frac must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn lambda_at(&self, step: usize) -> f64 {
        let warm = (self.warmup_frac * self.total_steps as f64).ceil();
        if warm <= 0.0 {
            self.lambda_l1
        } else {
            self.lambda_l1 * ((step + 1) as f64 / warm).min(1.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub mse: f64,
    pub l0: f64,
    pub l1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub params: SaeParams,
    pub metrics: Vec<MetricsRow>,
    pub steps_run: usize,
    /// Set when the stream ran out before `total_steps`.
    pub exhausted: bool,
    /// Features that never fired in the last `DEAD_WINDOW` samples.
    pub dead_features: usize,
}

/// Init then batched gradient/Adam loop. Deterministic given the seed.
pub fn train_sae(stream: &ActivationStream, cfg: &SaeTrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let d = stream.dim;
    let f = cfg.dict_size.unwrap_or(32 * d);
    let mut params = sae_init(d, f, cfg.seed)?;
    if stream.is_empty() {
        return Err(Error::Data("empty activation stream".into()));
    }
    let mut adam = AdamState::new(&params);
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0;
    let mut cursor = 0;
    let mut batch = Vec::with_capacity(cfg.batch_size * d);
    let mut metrics = Vec::new();
    let mut acc = BatchStats::default();
    let mut acc_steps = 0usize;
    let mut last_fired = vec![0usize; f];
    let mut fired = vec![false; f];
    let mut seen = 0usize;
    let mut exhausted = false;
    let mut step = 0;
    while step < cfg.total_steps {
        batch.clear();
        while batch.len() < cfg.batch_size * d {
            if cursor == order.len() {
                if epoch == cfg.epochs {
                    break;
                }
                order = (0..stream.len()).collect();
                let mut r = rng::derived(cfg.seed, &format!("sae-epoch-{epoch}"));
                crate::harvest::corpus::shuffle(&mut order, &mut r);
                epoch += 1;
                cursor = 0;
            }
            batch.extend_from_slice(stream.row(order[cursor]));
            cursor += 1;
        }
        if batch.len() < cfg.batch_size * d {
            exhausted = true;
            log::warn!(
                "activation stream exhausted after {step} of {} steps",
                cfg.total_steps
            );
            break;
        }
        fired.iter_mut().for_each(|v| *v = false);
        let (g, stats) = sae_grad_with_stats(&params, &batch, cfg.lambda_at(step), Some(&mut fired))?;
        adam_step(&mut params, &g, &mut adam, cfg.lr, &cfg.adam)?;
        if cfg.normalize_decoder {
            params.normalize_decoder();
        }
        if !params.is_finite() {
            return Err(Error::NonFinite(format!("SAE parameters after step {step}")));
        }
        seen += cfg.batch_size;
        for (j, &fj) in fired.iter().enumerate() {
            if fj {
                last_fired[j] = seen;
            }
        }
        acc.mse += stats.mse;
        acc.l0 += stats.l0;
        acc.l1 += stats.l1;
        acc_steps += 1;
        step += 1;
        if step % cfg.log_every == 0 || step == cfg.total_steps {
            let k = acc_steps as f64;
            metrics.push(MetricsRow {
                step,
                mse: acc.mse / k,
                l0: acc.l0 / k,
                l1: acc.l1 / k,
            });
            acc = BatchStats::default();
            acc_steps = 0;
        }
    }
    if acc_steps > 0 {
        let k = acc_steps as f64;
        metrics.push(MetricsRow {
            step,
            mse: acc.mse / k,
            l0: acc.l0 / k,
            l1: acc.l1 / k,
        });
    }
    let dead_features = if seen >= DEAD_WINDOW {
        last_fired.iter().filter(|&&t| t + DEAD_WINDOW <= seen).count()
    } else {
        0
    };
    Ok(TrainReport {
        params,
        metrics,
        steps_run: step,
        exhausted,
        dead_features,
    })
}

/// Per-token sparse feature activations in compressed-row form. Only strictly
/// positive values are stored.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureRecords {
    pub n_features: usize,
    pub docs: Vec<u64>,
    pub positions: Vec<u32>,
    /// Row `i` occupies `indices[offsets[i]..offsets[i + 1]]`.
    pub offsets: Vec<usize>,
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl FeatureRecords {
    pub fn new(n_features: usize) -> Self {
        FeatureRecords {
            n_features,
            offsets: vec![0],
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    /// Append one token from a dense activation vector.
    pub fn push_dense(&mut self, doc: u64, position: u32, f: &[f64]) {
        for (j, &v) in f.iter().enumerate() {
            if v > 0.0 {
                self.indices.push(j as u32);
                self.values.push(v);
            }
        }
        self.docs.push(doc);
        self.positions.push(position);
        self.offsets.push(self.indices.len());
    }

    pub fn densify_row(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_features];
        let (idx, val) = self.row(i);
        for (&j, &v) in idx.iter().zip(val) {
            out[j as usize] = v;
        }
        out
    }

    /// Share of stored entries among all token × feature cells.
    pub fn density(&self) -> f64 {
        if self.is_empty() || self.n_features == 0 {
            return 0.0;
        }
        self.values.len() as f64 / (self.len() * self.n_features) as f64
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }
}

/// Encode every record of a stream, preserving order and (doc, position) tags.
pub fn encode_stream(p: &SaeParams, stream: &ActivationStream) -> Result<FeatureRecords> {
    if stream.dim != p.d() {
        return Err(Error::Shape(format!(
            "stream dim {} differs from SAE input dim {}",
            stream.dim,
            p.d()
        )));
    }
    const BLOCK: usize = 256;
    let n = stream.len();
    let blocks = n.div_ceil(BLOCK);
    let parts = par::map_range(blocks, |b| -> Result<FeatureRecords> {
        let mut rec = FeatureRecords::new(p.f());
        for i in b * BLOCK..((b + 1) * BLOCK).min(n) {
            let f = sae_encode(p, stream.row(i))?;
            rec.push_dense(stream.docs[i], stream.positions[i], &f);
        }
        Ok(rec)
    });
    let mut out = FeatureRecords::new(p.f());
    for part in parts {
        let part = part?;
        let base = out.indices.len();
        out.docs.extend(part.docs);
        out.positions.extend(part.positions);
        out.indices.extend(part.indices);
        out.values.extend(part.values);
        out.offsets.extend(part.offsets[1..].iter().map(|o| o + base));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub d: usize,
    pub f: usize,
    pub config_hash: String,
    pub step: usize,
    pub version: String,
}

pub fn save_checkpoint(path: &Path, p: &SaeParams, config_hash: &str, step: usize) -> Result<()> {
    let (d, f) = (p.d(), p.f());
    let meta = CheckpointMeta {
        d,
        f,
        config_hash: config_hash.to_string(),
        step,
        version: crate::ARTIFACT_VERSION.to_string(),
    };
    let tensors = [
        TensorEntry::new("w_enc", vec![f, d], p.w_enc.data().to_vec()),
        TensorEntry::new("b_enc", vec![f], p.b_enc.clone()),
        TensorEntry::new("w_dec", vec![d, f], p.w_dec.data().to_vec()),
        TensorEntry::new("b_dec", vec![d], p.b_dec.clone()),
    ];
    write_tensor_file(path, SAE_MAGIC, serde_json::to_value(meta)?, &tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<(SaeParams, CheckpointMeta)> {
    let (meta, mut t) = read_tensor_file(path, SAE_MAGIC)?;
    let meta: CheckpointMeta = serde_json::from_value(meta)?;
    let (d, f) = (meta.d, meta.f);
    let p = SaeParams {
        w_enc: Matrix::new(f, d, take_tensor(&mut t, "w_enc", &[f, d])?)?,
        b_enc: take_tensor(&mut t, "b_enc", &[f])?,
        w_dec: Matrix::new(d, f, take_tensor(&mut t, "w_dec", &[d, f])?)?,
        b_dec: take_tensor(&mut t, "b_dec", &[d])?,
    };
    if !t.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("unexpected tensor {}", t[0].name),
        });
    }
    p.validate()?;
    Ok((p, meta))
}

/// Append rows to a `step,mse,l0,l1` CSV, writing the header for a new file.
pub fn append_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let new = !path.exists();
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut s = String::new();
    if new {
        s.push_str("step,mse,l0,l1\n");
    }
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.mse, r.l0, r.l1));
    }
    file.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
