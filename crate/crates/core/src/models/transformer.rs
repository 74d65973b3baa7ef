//! Pre-norm decoder block: causal multi-head attention then a GELU MLP, each
//! added back into the residual stream.

use std::collections::BTreeSet;

use super::{normed_input, Arch, ForwardTrace, HookKind, HookSite, Interventions, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{dot, gelu_scalar, softmax_in_place, Matrix, SequenceTensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlockParams {
    pub norm_attn: Option<Vec<f64>>,
    pub norm_mlp: Option<Vec<f64>>,
    /// Query/key/value projections, (n_heads·head_dim) × D with head h in rows
    /// `h·head_dim..(h+1)·head_dim`.
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    /// D × (n_heads·head_dim)
    pub w_o: Matrix,
    /// d_mlp × D
    pub w_up: Matrix,
    pub b_up: Vec<f64>,
    /// D × d_mlp
    pub w_down: Matrix,
    pub b_down: Vec<f64>,
}

impl TransformerBlockParams {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let d = cfg.d_model;
        if cfg.n_heads == 0 || !d.is_multiple_of(cfg.n_heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide d_model {d}",
                cfg.n_heads
            )));
        }
        let m = cfg.d_mlp;
        let norm_ok = |n: &Option<Vec<f64>>| n.as_ref().is_none_or(|v| v.len() == d);
        let ok = self.w_q.shape() == (d, d)
            && self.w_k.shape() == (d, d)
            && self.w_v.shape() == (d, d)
            && self.w_o.shape() == (d, d)
            && self.w_up.shape() == (m, d)
            && self.b_up.len() == m
            && self.w_down.shape() == (d, m)
            && self.b_down.len() == d
            && norm_ok(&self.norm_attn)
            && norm_ok(&self.norm_mlp);
        if !ok {
            return Err(Error::Shape(format!(
                "transformer block inconsistent with D={d}, d_mlp={m}"
            )));
        }
        Ok(())
    }
}

fn keep(capture: &BTreeSet<HookSite>, trace: &mut ForwardTrace, site: HookSite, t: &SequenceTensor) {
    if capture.contains(&site) {
        trace.sites.insert(site, t.clone());
    }
}

/// Run one Transformer block over a whole sequence.
pub fn transformer_block_forward(
    p: &TransformerBlockParams,
    cfg: &ModelConfig,
    layer: usize,
    residual_in: &SequenceTensor,
    capture: &BTreeSet<HookSite>,
    interventions: &Interventions,
) -> Result<(SequenceTensor, ForwardTrace)> {
    interventions.check_layer(layer, Arch::Transformer)?;
    if residual_in.dim() != cfg.d_model {
        return Err(Error::Shape(format!(
            "block {layer} expects residual dim {}, got {}",
            cfg.d_model,
            residual_in.dim()
        )));
    }
    let mut trace = ForwardTrace::default();
    let t = residual_in.len();
    let d = cfg.d_model;
    let hd = d / cfg.n_heads;
    let scale = 1.0 / (hd as f64).sqrt();

    let u = normed_input(&p.norm_attn, residual_in);
    let q = u.project(&p.w_q)?;
    let k = u.project(&p.w_k)?;
    let v = u.project(&p.w_v)?;
    let mut z = SequenceTensor::zeros(t, d);
    let mut scores = Vec::with_capacity(t);
    for head in 0..cfg.n_heads {
        let cols = head * hd..(head + 1) * hd;
        for i in 0..t {
            scores.clear();
            let qi = &q.row(i)[cols.clone()];
            for j in 0..=i {
                scores.push(dot(qi, &k.row(j)[cols.clone()]) * scale);
            }
            softmax_in_place(&mut scores);
            let zi = &mut z.row_mut(i)[cols.clone()];
            for (j, &a) in scores.iter().enumerate() {
                for (zv, vv) in zi.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *zv += a * vv;
                }
            }
        }
    }
    let mut mid = residual_in.clone();
    for i in 0..t {
        p.w_o.matvec_add_into(z.row(i), mid.row_mut(i));
    }

    let u2 = normed_input(&p.norm_mlp, &mid);
    let mut act = u2.project(&p.w_up)?;
    for i in 0..t {
        for (a, b) in act.row_mut(i).iter_mut().zip(&p.b_up) {
            *a = gelu_scalar(*a + b);
        }
    }
    let act_site = HookSite::new(layer, HookKind::MlpNeuronPostActivation);
    interventions.apply(act_site, &mut act)?;
    keep(capture, &mut trace, act_site, &act);

    let mut out = match interventions.frozen_delta(layer) {
        Some(delta) => {
            if delta.len() != t || delta.dim() != d {
                return Err(Error::Intervention(format!(
                    "frozen delta for layer {layer} has wrong shape"
                )));
            }
            let mut out = residual_in.clone();
            for (o, dv) in out.data_mut().iter_mut().zip(delta.data()) {
                *o += dv;
            }
            out
        }
        None => {
            for i in 0..t {
                let row = mid.row_mut(i);
                p.w_down.matvec_add_into(act.row(i), row);
                for (r, b) in row.iter_mut().zip(&p.b_down) {
                    *r += b;
                }
            }
            mid
        }
    };
    let site = HookSite::new(layer, HookKind::ResidualPostBlock);
    interventions.apply(site, &mut out)?;
    keep(capture, &mut trace, site, &out);
    Ok((out, trace))
}
