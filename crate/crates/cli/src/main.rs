//! `unilab`: build models, harvest activations, train SAEs, match features,
//! run patching sweeps, score features and emit reports.
//!
//! Exit codes: 0 success, 1 usage, 2 data or contract error, 3 external
//! service failure.

mod commands;
mod config;
mod stage;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use unilab::harvest::corpus::Corruption;
use unilab::patching::FreezePolicy;

use config::{ModelKind, PipelineConfig};

#[derive(Parser, Debug)]
#[command(name = "unilab", version, about = "Feature and circuit universality lab")]
struct Cli {
    /// TOML pipeline config; defaults apply to anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data-parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Replace outputs produced under a different config.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Construct or randomly initialize models and report probe accuracy.
    BuildModels(BuildArgs),
    /// Capture one hook site over a corpus into an activation stream.
    Harvest(HarvestArgs),
    /// Train a sparse autoencoder on an activation stream.
    TrainSae(TrainArgs),
    /// Max pairwise Pearson matching between two sets of streams.
    Mppc(MppcArgs),
    /// Path-patching sweeps.
    Patch(PatchArgs),
    /// Build feature evidence and score it with a chat-completion service.
    Autointerp(AutointerpArgs),
    /// Histograms and summaries for match tables.
    Report(ReportArgs),
    /// Planted-dictionary benchmark: SAEs on two synthetic sides, then MPPC.
    SynthBench(SynthArgs),
}

#[derive(Args, Debug)]
pub struct BuildArgs {
    #[arg(long = "kind", value_enum)]
    pub kinds: Vec<ModelKind>,
    #[arg(long)]
    pub vocab: Option<usize>,
}

#[derive(Args, Debug)]
pub struct HarvestArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Hook site, e.g. `layer2.ssm_input_c`.
    #[arg(long)]
    pub site: Option<String>,
    /// Corpus file (one JSON token list per line); generated from the config when omitted.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub shuffle: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub stream: PathBuf,
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Args, Debug)]
pub struct MppcArgs {
    /// Side A streams, one per layer.
    #[arg(long = "a", required = true)]
    pub a: Vec<PathBuf>,
    #[arg(long = "b", required = true)]
    pub b: Vec<PathBuf>,
    #[arg(long = "a-sae")]
    pub a_sae: Vec<PathBuf>,
    #[arg(long = "b-sae")]
    pub b_sae: Vec<PathBuf>,
    /// `sae` or `neuron`; defaults to `sae` when SAEs are given.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long, default_value = "match")]
    pub name: String,
    #[arg(long, default_value = "a->b")]
    pub direction: String,
}

#[derive(Args, Debug)]
pub struct PatchCommon {
    #[arg(long)]
    pub model: PathBuf,
    /// Layer to patch; defaults to the model's designated layer.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub corruption: Option<Corruption>,
    #[arg(long)]
    pub policy: Option<FreezePolicy>,
    /// Tasks per cell.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub distances: Vec<usize>,
    /// Use the clean input as the corrupted one; every delta should vanish.
    #[arg(long)]
    pub clean_control: bool,
}

#[derive(Args, Debug)]
pub struct PatchArgs {
    #[command(subcommand)]
    pub sweep: PatchCmd,
}

#[derive(Subcommand, Debug)]
pub enum PatchCmd {
    /// SSM state before the second A, every layer.
    SweepStates(PatchCommon),
    /// SSM input at A1, B1, B1+1..B1+3.
    SweepSsm(PatchCommon),
    /// Conv input at A1, B1, B1+1.
    SweepConv(PatchCommon),
    /// SSM input at the name positions and the tokens after them, every layer.
    Ioi(PatchCommon),
    /// Off-by-one verdict from an SSM-input (Mamba) or residual (Transformer) sweep.
    OffByOne(PatchCommon),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchKind {
    SweepStates,
    SweepSsm,
    SweepConv,
    Ioi,
    OffByOne,
}

impl PatchKind {
    pub fn name(self) -> &'static str {
        match self {
            PatchKind::SweepStates => "sweep_states",
            PatchKind::SweepSsm => "sweep_ssm",
            PatchKind::SweepConv => "sweep_conv",
            PatchKind::Ioi => "ioi",
            PatchKind::OffByOne => "off_by_one",
        }
    }
}

impl PatchArgs {
    pub fn split(&self) -> (PatchKind, &PatchCommon) {
        match &self.sweep {
            PatchCmd::SweepStates(c) => (PatchKind::SweepStates, c),
            PatchCmd::SweepSsm(c) => (PatchKind::SweepSsm, c),
            PatchCmd::SweepConv(c) => (PatchKind::SweepConv, c),
            PatchCmd::Ioi(c) => (PatchKind::Ioi, c),
            PatchCmd::OffByOne(c) => (PatchKind::OffByOne, c),
        }
    }
}

#[derive(Args, Debug)]
pub struct AutointerpArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub stream: PathBuf,
    #[arg(long)]
    pub sae: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub features: Vec<usize>,
    /// Score the first N live features when no list is given.
    #[arg(long)]
    pub top: Option<usize>,
    /// Match table to join scores against.
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long)]
    pub base_url: Option<String>,
    /// Render tokens with the name-binding vocabulary.
    #[arg(long)]
    pub ioi_text: bool,
    #[arg(long)]
    pub evidence_only: bool,
    #[arg(long, default_value = "features")]
    pub name: String,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long, required = true)]
    pub table: Vec<PathBuf>,
    #[arg(long)]
    pub layers_a: Option<usize>,
    #[arg(long)]
    pub layers_b: Option<usize>,
    /// Score records (JSON) to bin against each table.
    #[arg(long)]
    pub scores: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub rotated: bool,
    #[arg(long)]
    pub name: Option<String>,
}

/// Bad arguments or config.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<unilab::Error>() {
            return match e {
                unilab::Error::Config(_) | unilab::Error::HookSite(_) => 1,
                unilab::Error::Service(_) => 3,
                _ => 2,
            };
        }
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            anyhow::bail!(UsageError("--threads must be positive".into()));
        }
        unilab::par::init_threads(n);
    }
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    if cli.seed.is_some() {
        cfg.apply_seed(seed);
    }
    let ctx = commands::Ctx {
        cfg,
        seed,
        out_dir: cli.out_dir,
        force: cli.force,
    };
    match &cli.cmd {
        Command::BuildModels(a) => commands::build_models(&ctx, a),
        Command::Harvest(a) => commands::harvest(&ctx, a),
        Command::TrainSae(a) => commands::train(&ctx, a),
        Command::Mppc(a) => commands::mppc(&ctx, a),
        Command::Patch(a) => commands::patch(&ctx, a),
        Command::Autointerp(a) => commands::autointerp(&ctx, a),
        Command::Report(a) => commands::report(&ctx, a),
        Command::SynthBench(a) => commands::synth_bench(&ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
