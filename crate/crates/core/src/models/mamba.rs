//! Mamba block.
//!
//! Per position `i` with residual `r`:
//!
//! ```text
//! u = norm(r)                         (identity when the block has no norm)
//! x = W_in u
//! g = SiLU(W_g u)
//! c = SiLU(conv1d_causal(x) + conv_bias)
//! Δ = softplus(W_Δ c + b_Δ)
//! h[e,n] = exp(Δ[e]·A[e,n]) · h_prev[e,n] + Δ[e]·(W_B c)[n]·c[e]
//! s[e] = Σ_n h[e,n]·(W_c c)[n] + W_d[e]·c[e]
//! out = r + W_o (s ∘ g)
//! ```
//!
//! `exp(Δ·A)` is the state decay F_a and `Δ·(W_B c)·c` the state input F_b.

use std::collections::BTreeSet;

use super::{normed_input, ForwardTrace, HookKind, HookSite, Interventions, ModelConfig, NORM_EPS};
use crate::error::{Error, Result};
use crate::numerics::{conv1d_causal, dot, rms_norm, silu_scalar, softplus, Matrix, SequenceTensor};

/// Selective-scan parameters of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    /// E × N, strictly negative.
    pub a: Matrix,
    /// E × E
    pub w_delta: Matrix,
    pub b_delta: Vec<f64>,
    /// N × E
    pub w_b: Matrix,
    /// N × E
    pub w_c: Matrix,
    /// Skip weight, length E.
    pub w_d: Vec<f64>,
}

impl SsmParams {
    pub fn d_inner(&self) -> usize {
        self.a.rows()
    }

    pub fn d_state(&self) -> usize {
        self.a.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (e, n) = self.a.shape();
        let ok = self.w_delta.shape() == (e, e)
            && self.b_delta.len() == e
            && self.w_b.shape() == (n, e)
            && self.w_c.shape() == (n, e)
            && self.w_d.len() == e;
        if !ok {
            return Err(Error::Shape(format!(
                "ssm parameters inconsistent with E={e}, N={n}"
            )));
        }
        if let Some(v) = self.a.data().iter().find(|v| !(**v < 0.0)) {
            return Err(Error::Config(format!(
                "ssm A entries must be strictly negative, found {v}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MambaBlockParams {
    /// RMS scale applied before the block; `None` feeds the raw residual.
    pub norm: Option<Vec<f64>>,
    /// E × D
    pub w_in: Matrix,
    /// E × D
    pub w_g: Matrix,
    /// D × E
    pub w_o: Matrix,
    /// E × d_conv; column k weighs the input k positions back.
    pub conv_kernel: Matrix,
    pub conv_bias: Vec<f64>,
    pub ssm: SsmParams,
}

impl MambaBlockParams {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let d = cfg.d_model;
        let e = cfg.d_inner();
        let shapes_ok = self.w_in.shape() == (e, d)
            && self.w_g.shape() == (e, d)
            && self.w_o.shape() == (d, e)
            && self.conv_kernel.shape() == (e, cfg.d_conv)
            && self.conv_bias.len() == e
            && self.ssm.a.shape() == (e, cfg.d_state)
            && self.norm.as_ref().is_none_or(|n| n.len() == d);
        if !shapes_ok {
            return Err(Error::Shape(format!(
                "mamba block inconsistent with D={d}, E={e}, d_conv={}, N={}",
                cfg.d_conv, cfg.d_state
            )));
        }
        self.ssm.validate()
    }
}

/// Incremental state for token-by-token evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MambaBlockState {
    /// Flattened E × N state.
    pub h: Vec<f64>,
    /// Last `d_conv - 1` conv inputs, most recent last.
    pub conv_tail: Vec<Vec<f64>>,
}

impl MambaBlockState {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let e = cfg.d_inner();
        MambaBlockState {
            h: vec![0.0; e * cfg.d_state],
            conv_tail: vec![vec![0.0; e]; cfg.d_conv.saturating_sub(1)],
        }
    }

    /// Advance by one token; returns the block output for that token.
    pub fn step(&mut self, p: &MambaBlockParams, r: &[f64]) -> Result<Vec<f64>> {
        let u = match &p.norm {
            Some(s) => rms_norm(r, s, NORM_EPS),
            None => r.to_vec(),
        };
        let x = p.w_in.matvec(&u)?;
        let g: Vec<f64> = p.w_g.matvec(&u)?.into_iter().map(silu_scalar).collect();
        let width = p.conv_kernel.cols();
        let e = x.len();
        let mut c = p.conv_bias.clone();
        for k in 0..width {
            let src = if k == 0 {
                &x
            } else {
                match self.conv_tail.len().checked_sub(k) {
                    Some(idx) => &self.conv_tail[idx],
                    None => continue,
                }
            };
            for ch in 0..e {
                c[ch] += p.conv_kernel.get(ch, k) * src[ch];
            }
        }
        for v in c.iter_mut() {
            *v = silu_scalar(*v);
        }
        if !self.conv_tail.is_empty() {
            self.conv_tail.remove(0);
            self.conv_tail.push(x);
        }
        let mut s = vec![0.0; e];
        ssm_step(&p.ssm, &c, &mut self.h, &mut s);
        if !self.h.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("ssm state (decay above one?)".into()));
        }
        let y: Vec<f64> = s.iter().zip(&g).map(|(a, b)| a * b).collect();
        let mut out = r.to_vec();
        p.w_o.matvec_add_into(&y, &mut out);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanOutput {
    /// T × E readout.
    pub s: SequenceTensor,
    /// T × (E·N) state after each position.
    pub h: SequenceTensor,
}

/// One recurrence step: update `h` in place from `c`, write the readout to `s`.
fn ssm_step(p: &SsmParams, c: &[f64], h: &mut [f64], s: &mut [f64]) {
    update_state(p, c, h);
    readout(p, c, h, s);
}

fn update_state(p: &SsmParams, c: &[f64], h: &mut [f64]) {
    let n = p.d_state();
    let bvec = mv(&p.w_b, c);
    for e in 0..p.d_inner() {
        let delta = softplus(dot(p.w_delta.row(e), c) + p.b_delta[e]);
        let arow = p.a.row(e);
        let drive = delta * c[e];
        let he = &mut h[e * n..(e + 1) * n];
        for k in 0..n {
            he[k] = (delta * arow[k]).exp() * he[k] + drive * bvec[k];
        }
    }
}

fn readout(p: &SsmParams, c: &[f64], h: &[f64], s: &mut [f64]) {
    let n = p.d_state();
    let cvec = mv(&p.w_c, c);
    for e in 0..p.d_inner() {
        s[e] = dot(&h[e * n..(e + 1) * n], &cvec) + p.w_d[e] * c[e];
    }
}

fn mv(m: &Matrix, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.rows()];
    m.matvec_into(x, &mut out);
    out
}

/// Elementwise linear recurrence `h_i = decay_i ∘ h_{i-1} + drive_i`, `h_{-1} = 0`.
pub fn linear_recurrence(decay: &SequenceTensor, drive: &SequenceTensor) -> Result<SequenceTensor> {
    if decay.len() != drive.len() || decay.dim() != drive.dim() {
        return Err(Error::Shape("decay and drive must have equal shapes".into()));
    }
    let mut out = SequenceTensor::zeros(decay.len(), decay.dim());
    let mut h = vec![0.0; decay.dim()];
    for i in 0..decay.len() {
        for ((hv, a), b) in h.iter_mut().zip(decay.row(i)).zip(drive.row(i)) {
            *hv = a * *hv + b;
        }
        out.row_mut(i).copy_from_slice(&h);
    }
    Ok(out)
}

/// Run the selective scan over `c` (T × E) from a zero state.
pub fn selective_ssm_scan(c: &SequenceTensor, p: &SsmParams) -> Result<ScanOutput> {
    p.validate()?;
    scan_with_edits(c, p, None)
}

fn scan_with_edits(
    c: &SequenceTensor,
    p: &SsmParams,
    edits: Option<(HookSite, &Interventions)>,
) -> Result<ScanOutput> {
    let e = p.d_inner();
    let n = p.d_state();
    if c.dim() != e {
        return Err(Error::Shape(format!(
            "scan input has {} channels, parameters expect {e}",
            c.dim()
        )));
    }
    let t = c.len();
    let mut s = SequenceTensor::zeros(t, e);
    let mut ht = SequenceTensor::zeros(t, e * n);
    let mut h = vec![0.0; e * n];
    for i in 0..t {
        let ci = c.row(i);
        update_state(p, ci, &mut h);
        if let Some((site, iv)) = edits {
            if let Some(v) = iv.state_at(site, i, t, e * n)? {
                h.copy_from_slice(v);
            }
        }
        if let Some(bad) = h.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "ssm state entry {bad} at position {i} (decay above one or exploding input?)"
            )));
        }
        readout(p, ci, &h, s.row_mut(i));
        ht.row_mut(i).copy_from_slice(&h);
    }
    Ok(ScanOutput { s, h: ht })
}

fn keep(
    capture: &BTreeSet<HookSite>,
    trace: &mut ForwardTrace,
    layer: usize,
    kind: HookKind,
    t: &SequenceTensor,
) {
    let site = HookSite::new(layer, kind);
    if capture.contains(&site) {
        trace.sites.insert(site, t.clone());
    }
}

/// Run one Mamba block over a whole sequence.
///
/// `interventions` may only reference sites on `layer`.
pub fn mamba_block_forward(
    p: &MambaBlockParams,
    cfg: &ModelConfig,
    layer: usize,
    residual_in: &SequenceTensor,
    capture: &BTreeSet<HookSite>,
    interventions: &Interventions,
) -> Result<(SequenceTensor, ForwardTrace)> {
    interventions.check_layer(layer, super::Arch::Mamba)?;
    if residual_in.dim() != cfg.d_model {
        return Err(Error::Shape(format!(
            "block {layer} expects residual dim {}, got {}",
            cfg.d_model,
            residual_in.dim()
        )));
    }
    let mut trace = ForwardTrace::default();
    let u = normed_input(&p.norm, residual_in);

    let mut x = u.project(&p.w_in)?;
    interventions.apply(HookSite::new(layer, HookKind::ConvInputX), &mut x)?;
    keep(capture, &mut trace, layer, HookKind::ConvInputX, &x);

    let mut g = u.project(&p.w_g)?;
    for v in g.data_mut() {
        *v = silu_scalar(*v);
    }

    let mut c = conv1d_causal(&x, &p.conv_kernel, &p.conv_bias, cfg.d_conv)?;
    for v in c.data_mut() {
        *v = silu_scalar(*v);
    }
    interventions.apply(HookSite::new(layer, HookKind::SsmInputC), &mut c)?;
    keep(capture, &mut trace, layer, HookKind::SsmInputC, &c);
    keep(capture, &mut trace, layer, HookKind::MambaPostSilu, &c);

    let h_site = HookSite::new(layer, HookKind::SsmStateH);
    let edits = interventions.touches(h_site).then_some((h_site, interventions));
    let scan = scan_with_edits(&c, &p.ssm, edits)?;
    if capture.contains(&h_site) {
        trace.sites.insert(h_site, scan.h);
    }

    let mut out = residual_in.clone();
    match interventions.frozen_delta(layer) {
        Some(delta) => {
            if delta.len() != out.len() || delta.dim() != out.dim() {
                return Err(Error::Intervention(format!(
                    "frozen delta for layer {layer} has wrong shape"
                )));
            }
            for (o, d) in out.data_mut().iter_mut().zip(delta.data()) {
                *o += d;
            }
        }
        None => {
            let mut y = vec![0.0; c.dim()];
            for i in 0..out.len() {
                for ((yv, sv), gv) in y.iter_mut().zip(scan.s.row(i)).zip(g.row(i)) {
                    *yv = sv * gv;
                }
                p.w_o.matvec_add_into(&y, out.row_mut(i));
            }
        }
    }
    interventions.apply(HookSite::new(layer, HookKind::ResidualPostBlock), &mut out)?;
    keep(capture, &mut trace, layer, HookKind::ResidualPostBlock, &out);
    Ok((out, trace))
}
