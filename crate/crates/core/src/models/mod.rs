//! Forward-only Transformer and Mamba engines with addressable hook sites.
//!
//! A forward pass threads the residual stream through every block and can both
//! capture intermediate tensors ([`ForwardTrace`]) and overwrite them
//! ([`Interventions`]) before they are consumed downstream. The intervention
//! machinery is what the path-patching engine is built on.

mod construct;
mod hooks;
mod mamba;
mod transformer;
mod weights;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{rms_norm, Matrix, SequenceTensor};

pub use construct::{
    build_induction_mamba, build_induction_transformer, build_ioi_mamba, induction_accuracy,
    random_mamba, random_transformer, InductionProbe, RandomModelConfig, INDUCTION_MAX_LEN,
};
pub use hooks::{ForwardTrace, HookKind, HookSite, Interventions};
pub use mamba::{
    linear_recurrence, mamba_block_forward, selective_ssm_scan, MambaBlockParams,
    MambaBlockState, ScanOutput, SsmParams,
};
pub use transformer::{transformer_block_forward, TransformerBlockParams};
pub use weights::{load_weights, load_weights_as, save_weights, weights_bytes, WEIGHTS_MAGIC};

pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Transformer,
    Mamba,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Arch::Transformer => f.write_str("transformer"),
            Arch::Mamba => f.write_str("mamba"),
        }
    }
}

/// Hyperparameters shared by every block of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub n_layers: usize,
    pub d_model: usize,
    pub vocab: usize,
    /// Learned positional table length; `None` means no positional embedding.
    pub max_len: Option<usize>,
    pub d_conv: usize,
    pub d_state: usize,
    pub expand: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
}

impl ModelConfig {
    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }
}

/// Ground-truth annotations of hand-constructed models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstructionInfo {
    pub kind: String,
    /// Layer holding the planted mechanism.
    pub designated_layer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Transformer(TransformerBlockParams),
    Mamba(MambaBlockParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// vocab × d_model
    pub embed: Matrix,
    /// max_len × d_model
    pub pos_embed: Option<Matrix>,
    pub blocks: Vec<Block>,
    pub final_norm: Option<Vec<f64>>,
    /// vocab × d_model
    pub unembed: Matrix,
    pub construction: Option<ConstructionInfo>,
}

impl Model {
    pub fn arch(&self) -> Arch {
        self.config.arch
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn vocab(&self) -> usize {
        self.config.vocab
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// The hook site carrying the model's output logits.
    pub fn logits_site(&self) -> HookSite {
        HookSite::new(self.n_layers().saturating_sub(1), HookKind::Logits)
    }

    /// Width of the tensor captured at `site`.
    pub fn site_dim(&self, site: HookSite) -> Result<usize> {
        self.validate_site(site)?;
        let c = &self.config;
        Ok(match site.kind {
            HookKind::ResidualPostBlock => c.d_model,
            HookKind::MlpNeuronPostActivation => c.d_mlp,
            HookKind::MambaPostSilu | HookKind::SsmInputC | HookKind::ConvInputX => c.d_inner(),
            HookKind::SsmStateH => c.d_inner() * c.d_state,
            HookKind::Logits => c.vocab,
        })
    }

    pub fn validate_site(&self, site: HookSite) -> Result<()> {
        let n = self.n_layers();
        if site.kind == HookKind::Logits {
            if site.layer + 1 != n {
                return Err(Error::HookSite(format!(
                    "{site}: logits live on the last layer ({})",
                    n - 1
                )));
            }
            return Ok(());
        }
        if site.layer >= n {
            return Err(Error::HookSite(format!("{site}: model has {n} layers")));
        }
        if !site.kind.valid_for(self.arch()) {
            return Err(Error::HookSite(format!(
                "{site}: not available on a {} model",
                self.arch()
            )));
        }
        Ok(())
    }

    /// Token plus positional embedding for every position.
    pub fn embed_tokens(&self, tokens: &[usize]) -> Result<SequenceTensor> {
        if tokens.is_empty() {
            return Err(Error::Data("empty token sequence".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::Data(format!(
                "token {t} out of vocabulary (size {})",
                self.config.vocab
            )));
        }
        if let Some(pe) = &self.pos_embed {
            if tokens.len() > pe.rows() {
                return Err(Error::Data(format!(
                    "sequence length {} exceeds positional table {}",
                    tokens.len(),
                    pe.rows()
                )));
            }
        }
        let d = self.config.d_model;
        let mut r = SequenceTensor::zeros(tokens.len(), d);
        for (i, &t) in tokens.iter().enumerate() {
            let row = r.row_mut(i);
            row.copy_from_slice(self.embed.row(t));
            if let Some(pe) = &self.pos_embed {
                for (x, p) in row.iter_mut().zip(pe.row(i)) {
                    *x += p;
                }
            }
        }
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        if self.embed.shape() != (c.vocab, c.d_model) || self.unembed.shape() != (c.vocab, c.d_model)
        {
            return Err(Error::Shape("embedding/unembedding shape".into()));
        }
        if self.blocks.len() != c.n_layers || c.n_layers == 0 {
            return Err(Error::Shape(format!(
                "config declares {} layers, model has {}",
                c.n_layers,
                self.blocks.len()
            )));
        }
        for (l, b) in self.blocks.iter().enumerate() {
            match (b, c.arch) {
                (Block::Mamba(p), Arch::Mamba) => p.validate(c)?,
                (Block::Transformer(p), Arch::Transformer) => p.validate(c)?,
                _ => {
                    return Err(Error::Architecture {
                        expected: c.arch.to_string(),
                        found: format!("mismatched block at layer {l}"),
                    })
                }
            }
        }
        Ok(())
    }
}

/// Embed, run every block, unembed.
///
/// The returned trace holds every requested site (across all layers) and the
/// full logits tensor.
pub fn run_model(
    model: &Model,
    tokens: &[usize],
    capture: &BTreeSet<HookSite>,
    interventions: &Interventions,
) -> Result<ForwardTrace> {
    for site in capture.iter().chain(interventions.sites()) {
        model.validate_site(*site)?;
    }
    for l in interventions.frozen_delta_layers() {
        if l >= model.n_layers() {
            return Err(Error::Intervention(format!(
                "frozen block delta for missing layer {l}"
            )));
        }
    }
    let mut residual = model.embed_tokens(tokens)?;
    let mut trace = ForwardTrace::default();
    let per_layer = interventions.split_by_layer(model.n_layers());
    for (l, block) in model.blocks.iter().enumerate() {
        let (out, sites) = match block {
            Block::Mamba(p) => {
                mamba_block_forward(p, &model.config, l, &residual, capture, &per_layer[l])?
            }
            Block::Transformer(p) => {
                transformer_block_forward(p, &model.config, l, &residual, capture, &per_layer[l])?
            }
        };
        trace.sites.extend(sites.sites);
        residual = out;
    }
    let d = model.config.d_model;
    let mut logits = SequenceTensor::zeros(residual.len(), model.config.vocab);
    for i in 0..residual.len() {
        let r = match &model.final_norm {
            Some(scale) => rms_norm(residual.row(i), scale, NORM_EPS),
            None => residual.row(i).to_vec(),
        };
        debug_assert_eq!(r.len(), d);
        model.unembed.matvec_into(&r, logits.row_mut(i));
    }
    let site = model.logits_site();
    interventions.apply(site, &mut logits)?;
    if capture.contains(&site) {
        trace.sites.insert(site, logits.clone());
    }
    trace.logits = logits;
    Ok(trace)
}

/// Convenience: logits only, no hooks.
pub fn logits(model: &Model, tokens: &[usize]) -> Result<SequenceTensor> {
    Ok(run_model(model, tokens, &BTreeSet::new(), &Interventions::default())?.logits)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Every site of `kind` across all layers.
pub fn all_layers(model: &Model, kind: HookKind) -> BTreeSet<HookSite> {
    (0..model.n_layers())
        .map(|l| HookSite::new(l, kind))
        .collect()
}

pub(crate) fn normed_input(norm: &Option<Vec<f64>>, residual: &SequenceTensor) -> SequenceTensor {
    match norm {
        None => residual.clone(),
        Some(scale) => {
            let mut out = SequenceTensor::zeros(residual.len(), residual.dim());
            for i in 0..residual.len() {
                out.row_mut(i)
                    .copy_from_slice(&rms_norm(residual.row(i), scale, NORM_EPS));
            }
            out
        }
    }
}

pub(crate) type SiteMap = BTreeMap<HookSite, SequenceTensor>;

#[cfg(test)]
mod tests;
