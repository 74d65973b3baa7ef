//! Declarative pipeline description loaded from TOML.

use std::path::Path;

use anyhow::Context as _;
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use unilab::autointerp::{ClientConfig, ScoreKind};
use unilab::harvest::corpus::{CorpusParams, Corruption, DEFAULT_TRUNCATION};
use unilab::harvest::DEFAULT_BUFFER_CAPACITY;
use unilab::models::RandomModelConfig;
use unilab::mppc::MppcOptions;
use unilab::patching::FreezePolicy;
use unilab::pipeline::PlantedConfig;
use unilab::sae::SaeTrainConfig;

use crate::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    InductionMamba,
    InductionTransformer,
    IoiMamba,
    RandomMamba,
    RandomTransformer,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::InductionMamba => "induction_mamba",
            ModelKind::InductionTransformer => "induction_transformer",
            ModelKind::IoiMamba => "ioi_mamba",
            ModelKind::RandomMamba => "random_mamba",
            ModelKind::RandomTransformer => "random_transformer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsSection {
    pub kinds: Vec<ModelKind>,
    /// Vocabulary of the constructed induction models.
    pub vocab: usize,
    /// Probes per distance in the accuracy report.
    pub probes: usize,
    pub probe_distances: Vec<usize>,
    pub random: RandomModelConfig,
}

impl Default for ModelsSection {
    fn default() -> Self {
        ModelsSection {
            kinds: vec![ModelKind::InductionMamba, ModelKind::InductionTransformer, ModelKind::IoiMamba],
            vocab: 16,
            probes: 1000,
            probe_distances: vec![8, 16, 32],
            random: RandomModelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarvestSection {
    pub site: String,
    pub truncation: usize,
    /// Route records through the shuffle buffer. Streams used for MPPC must
    /// stay in corpus order.
    pub shuffle: bool,
    pub buffer_capacity: usize,
}

impl Default for HarvestSection {
    fn default() -> Self {
        HarvestSection {
            site: "layer0.residual_post_block".into(),
            truncation: DEFAULT_TRUNCATION,
            shuffle: false,
            buffer_capacity: DEFAULT_BUFFER_CAPACITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchSection {
    pub n_tasks: usize,
    pub distances: Vec<usize>,
    pub policy: FreezePolicy,
    pub corruption: Corruption,
    pub factor: f64,
    pub noise_floor: f64,
}

impl Default for PatchSection {
    fn default() -> Self {
        PatchSection {
            n_tasks: 128,
            distances: vec![8, 16, 32],
            policy: FreezePolicy::default(),
            corruption: Corruption::B,
            factor: 5.0,
            noise_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutointerpSection {
    pub client: ClientConfig,
    /// Features to score; empty means the first `top` live features.
    pub features: Vec<usize>,
    pub top: usize,
    pub kinds: Vec<ScoreKind>,
}

impl Default for AutointerpSection {
    fn default() -> Self {
        AutointerpSection {
            client: ClientConfig::default(),
            features: Vec::new(),
            top: 16,
            kinds: vec![ScoreKind::Complexity, ScoreKind::Consistency],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub models: ModelsSection,
    pub corpus: CorpusParams,
    pub harvest: HarvestSection,
    pub sae: SaeTrainConfig,
    pub mppc: MppcOptions,
    pub patch: PatchSection,
    pub autointerp: AutointerpSection,
    pub planted: PlantedConfig,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
    }

    /// Make `seed` the root of every stage seed.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.corpus.seed = seed;
        self.sae.seed = seed;
        self.planted.seed = seed;
        self.models.random.seed = seed;
    }
}
