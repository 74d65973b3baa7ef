//! Random initializations and hand-wired models with known circuits.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    argmax, logits, Arch, Block, ConstructionInfo, MambaBlockParams, Model, ModelConfig, SsmParams,
    TransformerBlockParams,
};
use crate::error::{Error, Result};
use crate::harvest::corpus::{self, BOS};
use crate::numerics::{silu_scalar, softplus_inv, Matrix};
use crate::par;
use crate::rng::{self, Rng};

/// Positional table length of the constructed Transformer.
pub const INDUCTION_MAX_LEN: usize = 64;

const PROBE_DISTANCES: [usize; 3] = [8, 16, 32];
const PROBES_PER_DISTANCE: usize = 100;
const PROBE_THRESHOLD: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomModelConfig {
    pub arch: Arch,
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub d_state: usize,
    pub d_mlp: usize,
    pub n_heads: usize,
    pub max_len: usize,
    /// Multiplier on every block's output projection.
    pub out_scale: f64,
    pub seed: u64,
}

impl Default for RandomModelConfig {
    fn default() -> Self {
        RandomModelConfig {
            arch: Arch::Mamba,
            vocab: 64,
            d_model: 32,
            n_layers: 4,
            d_state: 8,
            d_mlp: 128,
            n_heads: 4,
            max_len: 1024,
            out_scale: 1.0,
            seed: 0,
        }
    }
}

fn gaussian(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

fn random_mamba_block(
    rng: &mut Rng,
    d: usize,
    e: usize,
    n: usize,
    d_conv: usize,
    out_scale: f64,
) -> MambaBlockParams {
    let w_in = gaussian(rng, e, d, (1.0 / d as f64).sqrt());
    let w_g = gaussian(rng, e, d, (1.0 / d as f64).sqrt());
    let w_o = gaussian(rng, d, e, out_scale / (e as f64).sqrt());
    let conv_kernel = gaussian(rng, e, d_conv, (1.0 / d_conv as f64).sqrt());
    let w_delta = gaussian(rng, e, e, 0.1 / (e as f64).sqrt());
    let b_delta = (0..e)
        .map(|_| {
            let dt = (rng.random_range((1e-3f64).ln()..(1e-1f64).ln())).exp();
            softplus_inv(dt)
        })
        .collect();
    let w_b = gaussian(rng, n, e, (1.0 / e as f64).sqrt());
    let w_c = gaussian(rng, n, e, (1.0 / e as f64).sqrt());
    MambaBlockParams {
        norm: Some(vec![1.0; d]),
        w_in,
        w_g,
        w_o,
        conv_kernel,
        conv_bias: vec![0.0; e],
        ssm: SsmParams {
            a: Matrix::from_fn(e, n, |_, k| -((k + 1) as f64)),
            w_delta,
            b_delta,
            w_b,
            w_c,
            w_d: vec![1.0; e],
        },
    }
}

fn check_random_config(cfg: &RandomModelConfig) -> Result<()> {
    if cfg.vocab < 2 || cfg.d_model == 0 || cfg.n_layers == 0 {
        return Err(Error::Config(
            "random model needs vocab >= 2, d_model >= 1, n_layers >= 1".into(),
        ));
    }
    Ok(())
}

/// Mamba stack with Gaussian weights and RMS pre-norms.
pub fn random_mamba(cfg: &RandomModelConfig) -> Result<Model> {
    check_random_config(cfg)?;
    if cfg.d_state == 0 {
        return Err(Error::Config("d_state must be positive".into()));
    }
    let mut rng = rng::derived(cfg.seed, "random-mamba");
    let config = ModelConfig {
        arch: Arch::Mamba,
        n_layers: cfg.n_layers,
        d_model: cfg.d_model,
        vocab: cfg.vocab,
        max_len: None,
        d_conv: 4,
        d_state: cfg.d_state,
        expand: 2,
        n_heads: 1,
        d_mlp: 0,
    };
    let d = cfg.d_model;
    let embed = gaussian(&mut rng, cfg.vocab, d, 1.0);
    let blocks = (0..cfg.n_layers)
        .map(|_| {
            Block::Mamba(random_mamba_block(
                &mut rng,
                d,
                config.d_inner(),
                cfg.d_state,
                config.d_conv,
                cfg.out_scale,
            ))
        })
        .collect();
    let unembed = gaussian(&mut rng, cfg.vocab, d, (1.0 / d as f64).sqrt());
    let model = Model {
        config,
        embed,
        pos_embed: None,
        blocks,
        final_norm: Some(vec![1.0; d]),
        unembed,
        construction: None,
    };
    model.validate()?;
    Ok(model)
}

/// Pre-norm Transformer with learned positions and Gaussian weights.
pub fn random_transformer(cfg: &RandomModelConfig) -> Result<Model> {
    check_random_config(cfg)?;
    if cfg.n_heads == 0 || !cfg.d_model.is_multiple_of(cfg.n_heads) || cfg.d_mlp == 0 {
        return Err(Error::Config(
            "n_heads must divide d_model and d_mlp must be positive".into(),
        ));
    }
    let mut rng = rng::derived(cfg.seed, "random-transformer");
    let d = cfg.d_model;
    let m = cfg.d_mlp;
    let config = ModelConfig {
        arch: Arch::Transformer,
        n_layers: cfg.n_layers,
        d_model: d,
        vocab: cfg.vocab,
        max_len: Some(cfg.max_len),
        d_conv: 0,
        d_state: 0,
        expand: 0,
        n_heads: cfg.n_heads,
        d_mlp: m,
    };
    let embed = gaussian(&mut rng, cfg.vocab, d, 1.0);
    let pos = gaussian(&mut rng, cfg.max_len, d, 0.1);
    let sd = (1.0 / d as f64).sqrt();
    let blocks = (0..cfg.n_layers)
        .map(|_| {
            Block::Transformer(TransformerBlockParams {
                norm_attn: Some(vec![1.0; d]),
                norm_mlp: Some(vec![1.0; d]),
                w_q: gaussian(&mut rng, d, d, sd),
                w_k: gaussian(&mut rng, d, d, sd),
                w_v: gaussian(&mut rng, d, d, sd),
                w_o: gaussian(&mut rng, d, d, cfg.out_scale * sd),
                w_up: gaussian(&mut rng, m, d, sd),
                b_up: vec![0.0; m],
                w_down: gaussian(&mut rng, d, m, cfg.out_scale / (m as f64).sqrt()),
                b_down: vec![0.0; d],
            })
        })
        .collect();
    let unembed = gaussian(&mut rng, cfg.vocab, d, sd);
    let model = Model {
        config,
        embed,
        pos_embed: Some(pos),
        blocks,
        final_norm: Some(vec![1.0; d]),
        unembed,
        construction: None,
    };
    model.validate()?;
    Ok(model)
}

/// A token sequence whose last position should predict `answer`.
#[derive(Debug, Clone, PartialEq)]
pub struct InductionProbe {
    pub tokens: Vec<usize>,
    pub answer: usize,
}

impl InductionProbe {
    pub fn suite(vocab: usize, distance: usize, n: usize, seed: u64) -> Result<Vec<InductionProbe>> {
        let mut rng = rng::derived(seed, &format!("probe-{distance}"));
        (0..n)
            .map(|_| {
                let s = corpus::induction_sample(&mut rng, vocab, distance)?;
                Ok(InductionProbe {
                    answer: s.b,
                    tokens: s.clean,
                })
            })
            .collect()
    }
}

/// Fraction of probes whose final-position argmax equals the answer.
pub fn induction_accuracy(model: &Model, probes: &[InductionProbe]) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::Data("empty probe set".into()));
    }
    let hits = par::map(probes, |p| -> Result<bool> {
        let l = logits(model, &p.tokens)?;
        Ok(argmax(l.row(l.len() - 1)) == p.answer)
    });
    let mut n = 0usize;
    for h in hits {
        n += h? as usize;
    }
    Ok(n as f64 / probes.len() as f64)
}

fn sanity_probe(model: &Model, seed: u64) -> Result<()> {
    for d in PROBE_DISTANCES {
        let probes = InductionProbe::suite(model.vocab(), d, PROBES_PER_DISTANCE, seed)?;
        let acc = induction_accuracy(model, &probes)?;
        if acc < PROBE_THRESHOLD {
            return Err(Error::Probe(format!(
                "induction accuracy {acc:.3} at distance {d} is below {PROBE_THRESHOLD}"
            )));
        }
    }
    Ok(())
}

/// Two-layer attention-only induction model.
///
/// Residual layout: `tok[V] | prev[V] | out[V] | pos[64] | const | sink`.
/// Layer 0 is a previous-token head copying `tok` of position i-1 into
/// `prev`. Layer 1 queries with `tok`, keys on `prev`, and copies the attended
/// position's `tok` into `out`, which the unembedding reads. The bos token
/// carries a `sink` key at half strength so a query without a match lands on
/// bos instead of spreading over the context.
pub fn build_induction_transformer(vocab: usize, seed: u64) -> Result<Model> {
    if vocab < 8 {
        return Err(Error::Config(format!("induction models need vocab >= 8, got {vocab}")));
    }
    const BETA: f64 = 30.0;
    const GAIN: f64 = 10.0;
    let v = vocab;
    let p_len = INDUCTION_MAX_LEN;
    let tok = |t: usize| t;
    let prev = |t: usize| v + t;
    let out = |t: usize| 2 * v + t;
    let pos = |p: usize| 3 * v + p;
    let konst = 3 * v + p_len;
    let sink = konst + 1;
    let d = sink + 1;
    let q_gain = BETA * (d as f64).sqrt();

    let embed = Matrix::from_fn(v, d, |t, j| {
        if j == tok(t) || j == konst || (t == BOS && j == sink) {
            1.0
        } else {
            0.0
        }
    });
    let pos_embed = Matrix::from_fn(p_len, d, |p, j| if j == pos(p) { 1.0 } else { 0.0 });

    let zero_mlp = |blk: &mut TransformerBlockParams| {
        blk.w_up = Matrix::zeros(4, d);
        blk.b_up = vec![0.0; 4];
        blk.w_down = Matrix::zeros(d, 4);
        blk.b_down = vec![0.0; d];
    };
    let empty = || TransformerBlockParams {
        norm_attn: None,
        norm_mlp: None,
        w_q: Matrix::zeros(d, d),
        w_k: Matrix::zeros(d, d),
        w_v: Matrix::zeros(d, d),
        w_o: Matrix::zeros(d, d),
        w_up: Matrix::zeros(0, 0),
        b_up: vec![],
        w_down: Matrix::zeros(0, 0),
        b_down: vec![],
    };

    let mut l0 = empty();
    zero_mlp(&mut l0);
    for p in 1..p_len {
        l0.w_q.set(pos(p - 1), pos(p), q_gain);
    }
    for p in 0..p_len {
        l0.w_k.set(pos(p), pos(p), 1.0);
    }
    for t in 0..v {
        l0.w_v.set(tok(t), tok(t), 1.0);
        l0.w_o.set(prev(t), tok(t), 1.0);
    }

    let mut l1 = empty();
    zero_mlp(&mut l1);
    for t in 0..v {
        l1.w_q.set(prev(t), tok(t), q_gain);
        l1.w_k.set(prev(t), prev(t), 1.0);
        l1.w_v.set(tok(t), tok(t), 1.0);
        l1.w_o.set(out(t), tok(t), GAIN);
    }
    l1.w_q.set(sink, konst, q_gain / 2.0);
    l1.w_k.set(sink, sink, 1.0);

    let unembed = Matrix::from_fn(v, d, |t, j| if j == out(t) { 1.0 } else { 0.0 });
    let model = Model {
        config: ModelConfig {
            arch: Arch::Transformer,
            n_layers: 2,
            d_model: d,
            vocab: v,
            max_len: Some(p_len),
            d_conv: 0,
            d_state: 0,
            expand: 0,
            n_heads: 1,
            d_mlp: 4,
        },
        embed,
        pos_embed: Some(pos_embed),
        blocks: vec![Block::Transformer(l0), Block::Transformer(l1)],
        final_norm: None,
        unembed,
        construction: Some(ConstructionInfo {
            kind: "induction_transformer".into(),
            designated_layer: Some(1),
        }),
    };
    model.validate()?;
    sanity_probe(&model, seed)?;
    Ok(model)
}

/// Layers and the planted layer of the constructed Mamba models.
const MAMBA_LAYERS: usize = 4;
const MAMBA_DESIGNATED: usize = 2;
/// Output scale of the random filler layers.
const FILLER_SCALE: f64 = 0.02;
const X_GAIN: f64 = 4.0;
const GATE_GAIN: f64 = 8.0;
const DECAY: f64 = -1e-3;

/// Shared skeleton: residual `tok[V] | out[V] | const`, E = 2D, filler layers
/// around a hand-wired layer produced by `designated`.
fn mamba_skeleton(
    v: usize,
    d_state: usize,
    seed: u64,
    kind: &str,
    designated: MambaBlockParams,
) -> Result<Model> {
    let d = 2 * v + 1;
    let konst = 2 * v;
    let config = ModelConfig {
        arch: Arch::Mamba,
        n_layers: MAMBA_LAYERS,
        d_model: d,
        vocab: v,
        max_len: None,
        d_conv: 4,
        d_state,
        expand: 2,
        n_heads: 1,
        d_mlp: 0,
    };
    let e = config.d_inner();
    let mut rng = rng::derived(seed, kind);
    let mut designated = Some(designated);
    let blocks = (0..MAMBA_LAYERS)
        .map(|l| {
            if l == MAMBA_DESIGNATED {
                Block::Mamba(designated.take().unwrap())
            } else {
                Block::Mamba(random_mamba_block(&mut rng, d, e, d_state, 4, FILLER_SCALE))
            }
        })
        .collect();
    let embed = Matrix::from_fn(v, d, |t, j| if j == t || j == konst { 1.0 } else { 0.0 });
    let unembed = Matrix::from_fn(v, d, |t, j| if j == v + t { 1.0 } else { 0.0 });
    let model = Model {
        config,
        embed,
        pos_embed: None,
        blocks,
        final_norm: None,
        unembed,
        construction: Some(ConstructionInfo {
            kind: kind.into(),
            designated_layer: Some(MAMBA_DESIGNATED),
        }),
    };
    model.validate()?;
    Ok(model)
}

fn blank_designated(d: usize, e: usize, n: usize) -> MambaBlockParams {
    MambaBlockParams {
        norm: None,
        w_in: Matrix::zeros(e, d),
        w_g: Matrix::zeros(e, d),
        w_o: Matrix::zeros(d, e),
        conv_kernel: Matrix::zeros(e, 4),
        conv_bias: vec![0.0; e],
        ssm: SsmParams {
            a: Matrix::from_fn(e, n, |_, _| DECAY),
            w_delta: Matrix::zeros(e, e),
            // Δ = softplus(b_Δ) = 1
            b_delta: vec![softplus_inv(1.0); e],
            w_b: Matrix::zeros(n, e),
            w_c: Matrix::zeros(n, e),
            w_d: vec![0.0; e],
        },
    }
}

/// Four-layer Mamba whose layer 2 implements induction through the conv.
///
/// Inner channels come in three copies of the current token, shifted by the
/// conv to lags 0, 1 and 2. At position i the state stores key = token(i-2)
/// with value = token(i-1), so the pair (A₁, B₁) is written one step late, at
/// B₁+1. At A₂ the query is token(A₂) = A, which reads back B.
pub fn build_induction_mamba(vocab: usize, seed: u64) -> Result<Model> {
    if vocab < 8 {
        return Err(Error::Config(format!("induction models need vocab >= 8, got {vocab}")));
    }
    const TARGET_LOGIT: f64 = 10.0;
    let v = vocab;
    let d = 2 * v + 1;
    let e = 2 * d;
    let n = v;
    let konst = 2 * v;
    let lag = |g: usize, t: usize| g * v + t;
    let mut p = blank_designated(d, e, n);
    for t in 0..v {
        for g in 0..3 {
            p.w_in.set(lag(g, t), t, X_GAIN);
            p.conv_kernel.set(lag(g, t), g, 1.0);
        }
        p.ssm.w_b.set(t, lag(2, t), 1.0);
        p.ssm.w_c.set(t, lag(0, t), 1.0);
    }
    for ch in 0..e {
        p.w_g.set(ch, konst, GATE_GAIN);
    }
    let s = silu_scalar(X_GAIN);
    let omega = TARGET_LOGIT / (s * s * s * silu_scalar(GATE_GAIN));
    for t in 0..v {
        p.w_o.set(v + t, lag(1, t), omega);
    }
    let model = mamba_skeleton(v, n, seed, "induction_mamba", p)?;
    sanity_probe(&model, seed)?;
    Ok(model)
}

/// Four-layer Mamba whose layer 2 binds names to the token after them.
///
/// Two state slots: slot 0 keys on "the current token is `and`", slot 1 on a
/// constant. Every position stores its predecessor token under these keys; the
/// query weighs slot 0 by +1 and slot 1 by -0.5. The name before `and` (IO)
/// therefore reads back at +0.5 and each later mention of S at -0.5, giving a
/// positive IO-minus-S logit gap at the final position. Each name enters the
/// state at the token after it.
pub fn build_ioi_mamba(seed: u64) -> Result<Model> {
    const TARGET_DIFF: f64 = 6.0;
    let vocab = corpus::ioi_vocab();
    let v = vocab.size();
    let d = 2 * v + 1;
    let e = 2 * d;
    let n = 2;
    let konst = 2 * v;
    let ch_const = 2 * v;
    let and = vocab.token("and")?;
    let mut p = blank_designated(d, e, n);
    for t in 0..v {
        for g in 0..2 {
            p.w_in.set(g * v + t, t, X_GAIN);
            p.conv_kernel.set(g * v + t, g, 1.0);
        }
    }
    p.w_in.set(ch_const, konst, X_GAIN);
    p.conv_kernel.set(ch_const, 0, 1.0);
    p.ssm.w_b.set(0, and, 1.0);
    p.ssm.w_b.set(1, ch_const, 1.0);
    p.ssm.w_c.set(0, ch_const, 1.0);
    p.ssm.w_c.set(1, ch_const, -0.5);
    for ch in 0..e {
        p.w_g.set(ch, konst, GATE_GAIN);
    }
    let s = silu_scalar(X_GAIN);
    let omega = TARGET_DIFF / (1.5 * s * s * s * silu_scalar(GATE_GAIN));
    for t in 0..v {
        p.w_o.set(v + t, v + t, omega);
    }
    let model = mamba_skeleton(v, n, seed, "ioi_mamba", p)?;

    let mut rng = rng::derived(seed, "ioi-probe");
    for _ in 0..64 {
        let task = corpus::ioi_sample(&mut rng)?;
        let l = logits(&model, &task.clean)?;
        let last = l.row(l.len() - 1);
        if last[task.io] - last[task.s] <= 0.0 || argmax(last) != task.io {
            return Err(Error::Probe(format!(
                "name-binding model prefers {} over IO {} on {:?}",
                argmax(last),
                task.io,
                task.clean
            )));
        }
    }
    Ok(model)
}
