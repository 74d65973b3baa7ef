//! End-to-end drivers shared by the command line and the acceptance suite.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harvest::synthetic::{gen_synthetic_pair, sample_codes, SparseCode, SyntheticFeatureModel};
use crate::harvest::ActivationStream;
use crate::mppc::{run_mppc, CorrelationJob, FeatureData, LayerSource, MatchTable, Mode, MppcOptions};
use crate::sae::{encode_stream, train_sae, FeatureRecords, SaeParams, SaeTrainConfig, TrainReport};

/// Planted-dictionary experiment: two dictionaries share one sparse code
/// stream, one SAE is trained per side and the SAE features are matched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedConfig {
    pub dim: usize,
    pub f_true: usize,
    /// Expected active planted features per sample.
    pub sparsity: f64,
    pub n_samples: usize,
    /// Side B is side A seen through a random rotation instead of an
    /// independent dictionary.
    pub rotated: bool,
    /// Minimum ρ between a planted code and its best SAE feature for the
    /// feature to count as recovered, and the match threshold.
    pub threshold: f64,
    pub sae: SaeTrainConfig,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            dim: 64,
            f_true: 256,
            sparsity: 5.0,
            n_samples: 200_000,
            rotated: false,
            threshold: 0.8,
            sae: SaeTrainConfig {
                dict_size: Some(512),
                lambda_l1: 0.15,
                lr: 2e-3,
                batch_size: 256,
                total_steps: 3000,
                epochs: 4,
                normalize_decoder: true,
                log_every: 500,
                ..Default::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSummary {
    pub n_planted: usize,
    /// Planted features whose best side-A SAE feature reaches the threshold.
    pub recovered: usize,
    /// Mean MPPC of the side-A features recovering planted features.
    pub mean_mppc_recovered: f64,
    /// Share of planted features recovered and matched above the threshold.
    pub share_matched: f64,
    /// Mean MPPC over every live side-A SAE feature.
    pub mean_mppc_all: f64,
    /// Mean MPPC of raw coordinates (neuron mode).
    pub neuron_mean_mppc: f64,
    pub final_l0_a: f64,
    pub final_l0_b: f64,
}

pub struct PlantedRun {
    pub table: MatchTable,
    pub neuron_table: MatchTable,
    pub recovery_table: MatchTable,
    pub sae_a: TrainReport,
    pub sae_b: TrainReport,
    pub summary: PlantedSummary,
}

pub struct PlantedData {
    pub codes: Vec<SparseCode>,
    pub a: ActivationStream,
    pub b: ActivationStream,
}

pub fn planted_data(cfg: &PlantedConfig) -> Result<PlantedData> {
    let model_a = SyntheticFeatureModel::random(cfg.dim, cfg.f_true, cfg.sparsity, cfg.seed)?;
    let model_b = if cfg.rotated {
        model_a.rotated(cfg.seed.wrapping_add(1))
    } else {
        SyntheticFeatureModel::random(cfg.dim, cfg.f_true, cfg.sparsity, cfg.seed.wrapping_add(1))?
    };
    let codes = sample_codes(cfg.f_true, cfg.sparsity, cfg.n_samples, cfg.seed);
    let pair = gen_synthetic_pair(&model_a, &model_b, &codes)?;
    Ok(PlantedData {
        codes,
        a: pair.a,
        b: pair.b,
    })
}

fn codes_as_records(codes: &[SparseCode], f_true: usize) -> FeatureRecords {
    let mut r = FeatureRecords::new(f_true);
    for (k, z) in codes.iter().enumerate() {
        for &(j, v) in z {
            r.indices.push(j as u32);
            r.values.push(v);
        }
        r.docs.push(k as u64);
        r.positions.push(1);
        r.offsets.push(r.indices.len());
    }
    r
}

fn single(data: FeatureData) -> Vec<LayerSource> {
    vec![LayerSource { layer: 0, data }]
}

pub fn sae_job(a: &SaeParams, sa: &ActivationStream, b: &SaeParams, sb: &ActivationStream) -> Result<CorrelationJob> {
    Ok(CorrelationJob::new(
        single(FeatureData::Sparse(encode_stream(a, sa)?)),
        single(FeatureData::Sparse(encode_stream(b, sb)?)),
        "a->b",
        Mode::Sae,
    ))
}

pub fn run_planted(cfg: &PlantedConfig) -> Result<PlantedRun> {
    if !(0.0..=1.0).contains(&cfg.threshold) {
        return Err(Error::Config("threshold must lie in [0, 1]".into()));
    }
    let data = planted_data(cfg)?;
    let sae_a = train_sae(&data.a, &SaeTrainConfig {
        seed: cfg.seed.wrapping_mul(2).wrapping_add(11),
        ..cfg.sae.clone()
    })?;
    let sae_b = train_sae(&data.b, &SaeTrainConfig {
        seed: cfg.seed.wrapping_mul(2).wrapping_add(12),
        ..cfg.sae.clone()
    })?;
    let opts = MppcOptions::default();
    let rec_a = encode_stream(&sae_a.params, &data.a)?;
    let rec_b = encode_stream(&sae_b.params, &data.b)?;
    let table = run_mppc(
        &CorrelationJob::new(
            single(FeatureData::Sparse(rec_a.clone())),
            single(FeatureData::Sparse(rec_b)),
            "a->b",
            Mode::Sae,
        ),
        &opts,
    )?;
    let recovery_table = run_mppc(
        &CorrelationJob::new(
            single(FeatureData::Sparse(codes_as_records(&data.codes, cfg.f_true))),
            single(FeatureData::Sparse(rec_a)),
            "planted->a",
            Mode::Sae,
        ),
        &opts,
    )?;
    let neuron_table = run_mppc(
        &CorrelationJob::new(
            single(FeatureData::Dense(data.a)),
            single(FeatureData::Dense(data.b)),
            "a->b",
            Mode::Neuron,
        ),
        &opts,
    )?;

    let mut recovered = 0;
    let mut matched = 0;
    let mut sum = 0.0;
    for r in &recovery_table.rows {
        let (Some(rho), Some(i)) = (r.rho, r.best_feature_b) else { continue };
        if rho < cfg.threshold {
            continue;
        }
        recovered += 1;
        let m = table.rows[i].rho.unwrap_or(0.0);
        sum += m;
        if m > cfg.threshold {
            matched += 1;
        }
    }
    let summary = PlantedSummary {
        n_planted: cfg.f_true,
        recovered,
        mean_mppc_recovered: if recovered > 0 { sum / recovered as f64 } else { 0.0 },
        share_matched: matched as f64 / cfg.f_true as f64,
        mean_mppc_all: table.mean_rho().unwrap_or(0.0),
        neuron_mean_mppc: neuron_table.mean_rho().unwrap_or(0.0),
        final_l0_a: sae_a.metrics.last().map_or(0.0, |m| m.l0),
        final_l0_b: sae_b.metrics.last().map_or(0.0, |m| m.l0),
    };
    Ok(PlantedRun {
        table,
        neuron_table,
        recovery_table,
        sae_a,
        sae_b,
        summary,
    })
}
