use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Arch, SiteMap};
use crate::error::{Error, Result};
use crate::numerics::SequenceTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookKind {
    ResidualPostBlock,
    MlpNeuronPostActivation,
    /// SiLU output of the convolution (the SSM input). Same tensor as
    /// [`HookKind::SsmInputC`]; kept as its own name for neuron-baseline jobs.
    MambaPostSilu,
    SsmInputC,
    /// Flattened SSM state, channel-major: entry `e * d_state + n`.
    SsmStateH,
    ConvInputX,
    Logits,
}

impl HookKind {
    pub const ALL: [HookKind; 7] = [
        HookKind::ResidualPostBlock,
        HookKind::MlpNeuronPostActivation,
        HookKind::MambaPostSilu,
        HookKind::SsmInputC,
        HookKind::SsmStateH,
        HookKind::ConvInputX,
        HookKind::Logits,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HookKind::ResidualPostBlock => "residual_post_block",
            HookKind::MlpNeuronPostActivation => "mlp_neuron_post_activation",
            HookKind::MambaPostSilu => "mamba_post_silu",
            HookKind::SsmInputC => "ssm_input_c",
            HookKind::SsmStateH => "ssm_state_h",
            HookKind::ConvInputX => "conv_input_x",
            HookKind::Logits => "logits",
        }
    }

    pub fn valid_for(self, arch: Arch) -> bool {
        match self {
            HookKind::ResidualPostBlock | HookKind::Logits => true,
            HookKind::MlpNeuronPostActivation => arch == Arch::Transformer,
            HookKind::MambaPostSilu
            | HookKind::SsmInputC
            | HookKind::SsmStateH
            | HookKind::ConvInputX => arch == Arch::Mamba,
        }
    }

    /// The per-architecture "neuron" site used by the neuron baseline.
    pub fn neuron_site(arch: Arch) -> HookKind {
        match arch {
            Arch::Transformer => HookKind::MlpNeuronPostActivation,
            Arch::Mamba => HookKind::MambaPostSilu,
        }
    }
}

/// A named tensor inside a forward pass, written `layer{n}.{kind}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HookSite {
    pub layer: usize,
    pub kind: HookKind,
}

impl HookSite {
    pub const fn new(layer: usize, kind: HookKind) -> Self {
        HookSite { layer, kind }
    }
}

impl fmt::Display for HookSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}.{}", self.layer, self.kind.name())
    }
}

impl FromStr for HookSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::HookSite(format!("expected `layer{{n}}.{{kind}}`, got `{s}`"));
        let (layer, kind) = s.split_once('.').ok_or_else(bad)?;
        let layer: usize = layer
            .strip_prefix("layer")
            .and_then(|n| n.parse().ok())
            .ok_or_else(bad)?;
        let kind = HookKind::ALL
            .into_iter()
            .find(|k| k.name() == kind)
            .ok_or_else(|| Error::HookSite(format!("unknown hook kind `{kind}`")))?;
        Ok(HookSite { layer, kind })
    }
}

/// Tensors captured during one forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardTrace {
    pub sites: SiteMap,
    /// sequence length × vocab
    pub logits: SequenceTensor,
}

impl ForwardTrace {
    pub fn get(&self, site: HookSite) -> Result<&SequenceTensor> {
        self.sites
            .get(&site)
            .ok_or_else(|| Error::HookSite(format!("{site} was not captured")))
    }
}

/// Overwrites applied during a forward pass.
///
/// Three kinds of edits are supported:
/// - position overwrites: replace one position of a site with a given vector;
/// - frozen sites: replace every position of a site with a stored tensor;
/// - frozen block deltas: make a block add a stored update to its (possibly
///   recomputed) input instead of its own output.
///
/// Position overwrites take precedence over frozen sites. On
/// `ssm_state_h` both are applied inside the recurrence, so later positions
/// continue from the edited state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Interventions {
    overwrites: BTreeMap<HookSite, BTreeMap<usize, Vec<f64>>>,
    frozen: BTreeMap<HookSite, SequenceTensor>,
    frozen_deltas: BTreeMap<usize, SequenceTensor>,
}

impl Interventions {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.overwrites.is_empty() && self.frozen.is_empty() && self.frozen_deltas.is_empty()
    }

    pub fn overwrite(&mut self, site: HookSite, position: usize, value: Vec<f64>) -> &mut Self {
        self.overwrites
            .entry(canonical(site))
            .or_default()
            .insert(position, value);
        self
    }

    pub fn freeze_site(&mut self, site: HookSite, value: SequenceTensor) -> &mut Self {
        self.frozen.insert(canonical(site), value);
        self
    }

    pub fn freeze_block_delta(&mut self, layer: usize, delta: SequenceTensor) -> &mut Self {
        self.frozen_deltas.insert(layer, delta);
        self
    }

    /// Every site touched by an overwrite or freeze.
    pub fn sites(&self) -> impl Iterator<Item = &HookSite> {
        self.overwrites.keys().chain(self.frozen.keys())
    }

    pub fn frozen_sites(&self) -> BTreeSet<HookSite> {
        self.frozen.keys().copied().collect()
    }

    pub fn overwritten_sites(&self) -> BTreeSet<HookSite> {
        self.overwrites.keys().copied().collect()
    }

    pub fn frozen_delta_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.frozen_deltas.keys().copied()
    }

    pub fn frozen_delta(&self, layer: usize) -> Option<&SequenceTensor> {
        self.frozen_deltas.get(&layer)
    }

    /// Layers referenced by any edit.
    pub fn layers(&self) -> BTreeSet<usize> {
        self.sites()
            .map(|s| s.layer)
            .chain(self.frozen_deltas.keys().copied())
            .collect()
    }

    pub(crate) fn split_by_layer(&self, n_layers: usize) -> Vec<Interventions> {
        let mut out = vec![Interventions::default(); n_layers];
        for (site, ow) in &self.overwrites {
            if site.kind != HookKind::Logits {
                out[site.layer].overwrites.insert(*site, ow.clone());
            }
        }
        for (site, t) in &self.frozen {
            if site.kind != HookKind::Logits {
                out[site.layer].frozen.insert(*site, t.clone());
            }
        }
        for (l, t) in &self.frozen_deltas {
            out[*l].frozen_deltas.insert(*l, t.clone());
        }
        out
    }

    pub(crate) fn check_layer(&self, layer: usize, arch: Arch) -> Result<()> {
        for site in self.sites() {
            if site.layer != layer {
                return Err(Error::Intervention(format!(
                    "{site} passed to block {layer}"
                )));
            }
            if !site.kind.valid_for(arch) || site.kind == HookKind::Logits {
                return Err(Error::Intervention(format!(
                    "{site} is not a {arch} block site"
                )));
            }
        }
        if let Some(l) = self.frozen_deltas.keys().find(|&&l| l != layer) {
            return Err(Error::Intervention(format!(
                "block delta for layer {l} passed to block {layer}"
            )));
        }
        Ok(())
    }

    /// Apply frozen values then position overwrites for `site` to `t`.
    pub(crate) fn apply(&self, site: HookSite, t: &mut SequenceTensor) -> Result<()> {
        let site = canonical(site);
        if let Some(f) = self.frozen.get(&site) {
            if f.len() != t.len() || f.dim() != t.dim() {
                return Err(Error::Intervention(format!(
                    "frozen {site} is {}x{}, live tensor is {}x{}",
                    f.len(),
                    f.dim(),
                    t.len(),
                    t.dim()
                )));
            }
            t.data_mut().copy_from_slice(f.data());
        }
        if let Some(ow) = self.overwrites.get(&site) {
            for (&pos, v) in ow {
                check_overwrite(site, pos, v, t.len(), t.dim())?;
                t.row_mut(pos).copy_from_slice(v);
            }
        }
        Ok(())
    }

    /// Per-position state edit used inside the SSM recurrence.
    pub(crate) fn state_at(
        &self,
        site: HookSite,
        pos: usize,
        len: usize,
        dim: usize,
    ) -> Result<Option<&[f64]>> {
        if let Some(v) = self.overwrites.get(&site).and_then(|m| m.get(&pos)) {
            check_overwrite(site, pos, v, len, dim)?;
            return Ok(Some(v));
        }
        if let Some(f) = self.frozen.get(&site) {
            if f.len() != len || f.dim() != dim {
                return Err(Error::Intervention(format!(
                    "frozen {site} has shape {}x{}, expected {len}x{dim}",
                    f.len(),
                    f.dim()
                )));
            }
            return Ok(Some(f.row(pos)));
        }
        Ok(None)
    }

    pub(crate) fn touches(&self, site: HookSite) -> bool {
        let site = canonical(site);
        self.overwrites.contains_key(&site) || self.frozen.contains_key(&site)
    }
}

fn check_overwrite(site: HookSite, pos: usize, v: &[f64], len: usize, dim: usize) -> Result<()> {
    if pos >= len {
        return Err(Error::Intervention(format!(
            "{site}: position {pos} outside sequence of length {len}"
        )));
    }
    if v.len() != dim {
        return Err(Error::Intervention(format!(
            "{site}: replacement has {} entries, site has {dim}",
            v.len()
        )));
    }
    Ok(())
}

/// `mamba_post_silu` and `ssm_input_c` name the same tensor; edits on either
/// land on one key.
fn canonical(site: HookSite) -> HookSite {
    match site.kind {
        HookKind::MambaPostSilu => HookSite::new(site.layer, HookKind::SsmInputC),
        _ => site,
    }
}
