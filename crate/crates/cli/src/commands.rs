use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use serde::Serialize;
use serde_json::json;

use unilab::autointerp::{
    score_all, score_vs_mppc_report, top_activating_samples, FeatureEvidence, LlmClient, ScoreCache, ScoreRecord,
};
use unilab::harvest::corpus::{gen_token_corpus, ioi_vocab, read_corpus, write_corpus, TokenDocument, BOS, EOS};
use unilab::harvest::{collect_activations, collect_aligned, read_stream, write_stream, ActivationStream, ShuffleBuffer};
use unilab::io::{read_json, write_atomic, write_json};
use unilab::models::{
    build_induction_mamba, build_induction_transformer, build_ioi_mamba, induction_accuracy, load_weights, logits,
    random_mamba, random_transformer, Arch, HookSite, InductionProbe, Model, RandomModelConfig,
};
use unilab::mppc::{depth_histogram, quantile, run_mppc, CorrelationJob, FeatureData, LayerSource, MatchTable, Mode};
use unilab::patching::{
    induction_tasks, ioi_sweep, ioi_tasks, off_by_one_detect, residual_position_probe, sweep_conv_inputs,
    sweep_ssm_inputs, sweep_states, OffByOneConfig, SweepResult, TaskInstance,
};
use unilab::pipeline::run_planted;
use unilab::sae::{append_metrics_csv, encode_stream, load_checkpoint, save_checkpoint, train_sae};
use unilab::{models, Error};

use crate::config::{ModelKind, PipelineConfig};
use crate::stage::Stage;
use crate::{
    AutointerpArgs, BuildArgs, HarvestArgs, MppcArgs, PatchArgs, PatchCommon, PatchKind, ReportArgs, SynthArgs,
    TrainArgs, UsageError,
};

pub struct Ctx {
    pub cfg: PipelineConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub force: bool,
}

impl Ctx {
    fn out(&self, sub: &str, file: &str) -> PathBuf {
        self.out_dir.join(sub).join(file)
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "artifact".into(), |s| s.to_string_lossy().into_owned())
}

fn up_to_date(what: &str) {
    println!("{what}: up to date");
}

fn id_text(t: usize) -> String {
    match t {
        BOS => "<bos>".into(),
        EOS => "<eos>".into(),
        _ => format!("t{t}"),
    }
}

fn site_layer(stream: &ActivationStream) -> usize {
    stream.site.parse::<HookSite>().map_or(0, |s| s.layer)
}

#[derive(Serialize)]
struct ProbeReport {
    kind: &'static str,
    vocab: usize,
    /// Induction: accuracy per distance. Name binding: share of tasks with
    /// logit(IO) > logit(S).
    accuracy: BTreeMap<String, f64>,
    mean_logit_diff: Option<f64>,
    passed: bool,
    config_hash: String,
    seed: u64,
    version: String,
}

const PROBE_BAR: f64 = 0.99;

pub fn build_models(ctx: &Ctx, args: &BuildArgs) -> anyhow::Result<()> {
    let mut sec = ctx.cfg.models.clone();
    if let Some(v) = args.vocab {
        sec.vocab = v;
    }
    if !args.kinds.is_empty() {
        sec.kinds = args.kinds.clone();
    }
    let constructs_induction = sec
        .kinds
        .iter()
        .any(|k| matches!(k, ModelKind::InductionMamba | ModelKind::InductionTransformer));
    if constructs_induction && sec.vocab < 8 {
        bail!(UsageError(format!("--vocab must be at least 8 for induction models, got {}", sec.vocab)));
    }
    let mut failed = Vec::new();
    for &kind in &sec.kinds {
        let name = kind.name();
        let weights = ctx.out("models", &format!("{name}.ulw"));
        let report_path = ctx.out("models", &format!("{name}.probe.json"));
        let random = RandomModelConfig {
            arch: if kind == ModelKind::RandomTransformer { Arch::Transformer } else { Arch::Mamba },
            ..sec.random.clone()
        };
        let stage = Stage::new(
            "build-models",
            &(kind, sec.vocab, sec.probes, &sec.probe_distances, &random),
            ctx.seed,
            &[],
            vec![weights.clone(), report_path.clone()],
        )?;
        if stage.is_fresh(ctx.force)? {
            up_to_date(name);
            continue;
        }
        stage.prepare()?;
        let model = match kind {
            ModelKind::InductionMamba => build_induction_mamba(sec.vocab, ctx.seed)?,
            ModelKind::InductionTransformer => build_induction_transformer(sec.vocab, ctx.seed)?,
            ModelKind::IoiMamba => build_ioi_mamba(ctx.seed)?,
            ModelKind::RandomMamba => random_mamba(&random)?,
            ModelKind::RandomTransformer => random_transformer(&random)?,
        };
        let mut accuracy = BTreeMap::new();
        let mut mean_logit_diff = None;
        match kind {
            ModelKind::InductionMamba | ModelKind::InductionTransformer => {
                for &d in &sec.probe_distances {
                    let probes = InductionProbe::suite(model.vocab(), d, sec.probes, ctx.seed.wrapping_add(1))?;
                    accuracy.insert(format!("distance_{d}"), induction_accuracy(&model, &probes)?);
                }
            }
            ModelKind::IoiMamba => {
                let tasks = ioi_tasks(sec.probes, ctx.seed.wrapping_add(1))?;
                let mut hits = 0usize;
                let mut sum = 0.0;
                for t in &tasks {
                    let m = t.metric(&logits(&model, &t.clean)?)?;
                    hits += (m > 0.0) as usize;
                    sum += m;
                }
                accuracy.insert("io_over_s".into(), hits as f64 / tasks.len() as f64);
                mean_logit_diff = Some(sum / tasks.len() as f64);
            }
            _ => {}
        }
        let passed = accuracy.values().all(|&a| a >= PROBE_BAR);
        models::save_weights(&model, &weights)?;
        write_json(
            &report_path,
            &ProbeReport {
                kind: name,
                vocab: model.vocab(),
                accuracy: accuracy.clone(),
                mean_logit_diff,
                passed,
                config_hash: stage.hash().to_string(),
                seed: ctx.seed,
                version: unilab::ARTIFACT_VERSION.to_string(),
            },
        )?;
        let acc: Vec<String> = accuracy.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
        println!("{name}: wrote {} {}", weights.display(), acc.join(" "));
        if passed {
            stage.finish()?;
        } else {
            failed.push(format!("{name} ({})", acc.join(", ")));
        }
    }
    if !failed.is_empty() {
        return Err(Error::Probe(format!("probe accuracy below {PROBE_BAR}: {}", failed.join("; "))).into());
    }
    Ok(())
}

fn corpus_for(ctx: &Ctx, given: Option<&Path>, truncation: usize) -> anyhow::Result<(PathBuf, Vec<TokenDocument>)> {
    if let Some(p) = given {
        return Ok((p.to_path_buf(), read_corpus(p, truncation)?));
    }
    let path = ctx.out("corpus", "corpus.jsonl");
    let stage = Stage::new("corpus", &ctx.cfg.corpus, ctx.seed, &[], vec![path.clone()])?;
    if !stage.is_fresh(ctx.force)? {
        stage.prepare()?;
        write_corpus(&path, &gen_token_corpus(&ctx.cfg.corpus)?)?;
        stage.finish()?;
    }
    Ok((path.clone(), read_corpus(&path, truncation)?))
}

pub fn harvest(ctx: &Ctx, args: &HarvestArgs) -> anyhow::Result<()> {
    let mut sec = ctx.cfg.harvest.clone();
    if let Some(s) = &args.site {
        sec.site = s.clone();
    }
    sec.shuffle |= args.shuffle;
    let site: HookSite = sec.site.parse().map_err(|e: Error| UsageError(e.to_string()))?;
    let (corpus_path, docs) = corpus_for(ctx, args.corpus.as_deref(), sec.truncation)?;
    let name = args.name.clone().unwrap_or_else(|| format!("{}.{site}", stem(&args.model)));
    let out = ctx.out("streams", &format!("{name}.act"));
    let stage = Stage::new("harvest", &sec, ctx.seed, &[&args.model, &corpus_path], vec![out.clone()])?;
    if stage.is_fresh(ctx.force)? {
        up_to_date(&name);
        return Ok(());
    }
    stage.prepare()?;
    let model = load_weights(&args.model)?;
    model.validate_site(site).map_err(|e| UsageError(e.to_string()))?;
    let stream = if sec.shuffle {
        let mut buf = ShuffleBuffer::new(sec.buffer_capacity, ctx.seed)?;
        collect_activations(&model, &docs, site, &mut buf, sec.truncation)?
    } else {
        collect_aligned(&model, &docs, &[site], sec.truncation)?.remove(0)
    };
    write_stream(&out, &stream, ctx.seed, stage.hash())?;
    stage.finish()?;
    println!("{name}: {} rows of width {} -> {}", stream.len(), stream.dim, out.display());
    Ok(())
}

pub fn train(ctx: &Ctx, args: &TrainArgs) -> anyhow::Result<()> {
    let name = args.name.clone().unwrap_or_else(|| stem(&args.stream));
    let ckpt = ctx.out("saes", &format!("{name}.ulsae"));
    let metrics = ctx.out("saes", &format!("{name}.metrics.csv"));
    let report = ctx.out("saes", &format!("{name}.report.json"));
    let stage = Stage::new(
        "train-sae",
        &ctx.cfg.sae,
        ctx.seed,
        &[&args.stream],
        vec![ckpt.clone(), metrics.clone(), report.clone()],
    )?;
    if stage.is_fresh(ctx.force)? {
        up_to_date(&name);
        return Ok(());
    }
    stage.prepare()?;
    let (stream, _) = read_stream(&args.stream)?;
    let rep = train_sae(&stream, &ctx.cfg.sae)?;
    if rep.exhausted {
        log::warn!("{name}: activation stream exhausted after {} steps", rep.steps_run);
    }
    save_checkpoint(&ckpt, &rep.params, stage.hash(), rep.steps_run)?;
    if metrics.exists() {
        std::fs::remove_file(&metrics).with_context(|| format!("replacing {}", metrics.display()))?;
    }
    append_metrics_csv(&metrics, &rep.metrics)?;
    let last = rep.metrics.last();
    write_json(
        &report,
        &json!({
            "steps_run": rep.steps_run,
            "exhausted": rep.exhausted,
            "dead_features": rep.dead_features,
            "dict_size": rep.params.f(),
            "final": last,
            "config_hash": stage.hash(),
            "seed": ctx.seed,
            "version": unilab::ARTIFACT_VERSION,
        }),
    )?;
    stage.finish()?;
    println!(
        "{name}: {} steps, final mse {:.6}, l0 {:.3} -> {}",
        rep.steps_run,
        last.map_or(f64::NAN, |m| m.mse),
        last.map_or(f64::NAN, |m| m.l0),
        ckpt.display()
    );
    Ok(())
}

fn load_side(streams: &[PathBuf], saes: &[PathBuf], mode: Mode) -> anyhow::Result<Vec<(LayerSource, ActivationStream)>> {
    if mode == Mode::Sae && saes.len() != streams.len() {
        bail!(UsageError(format!(
            "SAE mode needs one SAE per stream ({} streams, {} SAEs)",
            streams.len(),
            saes.len()
        )));
    }
    let mut out = Vec::new();
    for (i, p) in streams.iter().enumerate() {
        let (s, _) = read_stream(p)?;
        let layer = site_layer(&s);
        let data = match mode {
            Mode::Sae => {
                let (sae, _) = load_checkpoint(&saes[i])?;
                if sae.d() != s.dim {
                    return Err(Error::Shape(format!(
                        "SAE {} expects width {}, stream {} has {}",
                        saes[i].display(),
                        sae.d(),
                        p.display(),
                        s.dim
                    ))
                    .into());
                }
                FeatureData::Sparse(encode_stream(&sae, &s)?)
            }
            Mode::Neuron => FeatureData::Dense(s.clone()),
        };
        out.push((LayerSource { layer, data }, s));
    }
    Ok(out)
}

pub fn mppc(ctx: &Ctx, args: &MppcArgs) -> anyhow::Result<()> {
    let mode = match args.mode.as_deref() {
        Some("sae") => Mode::Sae,
        Some("neuron") => Mode::Neuron,
        Some(m) => bail!(UsageError(format!("unknown mode `{m}` (sae or neuron)"))),
        None if args.a_sae.is_empty() => Mode::Neuron,
        None => Mode::Sae,
    };
    let out = ctx.out("tables", &format!("{}.csv", args.name));
    let inputs: Vec<&Path> = args
        .a
        .iter()
        .chain(&args.b)
        .chain(&args.a_sae)
        .chain(&args.b_sae)
        .map(PathBuf::as_path)
        .collect();
    let stage = Stage::new(
        "mppc",
        &(&ctx.cfg.mppc, format!("{mode:?}"), &args.direction),
        ctx.seed,
        &inputs,
        vec![out.clone()],
    )?;
    if stage.is_fresh(ctx.force)? {
        up_to_date(&args.name);
        return Ok(());
    }
    stage.prepare()?;
    let a = load_side(&args.a, &args.a_sae, mode)?;
    let b = load_side(&args.b, &args.b_sae, mode)?;
    let first = &a[0].1;
    for (_, s) in a.iter().chain(&b) {
        if s.docs != first.docs || s.positions != first.positions {
            return Err(Error::Data(format!(
                "stream {} is not aligned with {} (harvest both in corpus order over the same corpus)",
                s.site, first.site
            ))
            .into());
        }
    }
    let job = CorrelationJob::new(
        a.into_iter().map(|x| x.0).collect(),
        b.into_iter().map(|x| x.0).collect(),
        &args.direction,
        mode,
    );
    let table = run_mppc(&job, &ctx.cfg.mppc)?;
    table.write_csv(&out)?;
    stage.finish()?;
    println!(
        "{}: {} features, mean MPPC {:.4}, {} undefined -> {}",
        args.name,
        table.rows.len(),
        table.mean_rho().unwrap_or(f64::NAN),
        table.n_undefined(),
        out.display()
    );
    Ok(())
}

fn designated(model: &Model, given: Option<usize>) -> anyhow::Result<usize> {
    given
        .or_else(|| model.construction.as_ref().and_then(|c| c.designated_layer))
        .ok_or_else(|| UsageError("model has no designated layer; pass --layer".into()).into())
}

pub fn patch(ctx: &Ctx, args: &PatchArgs) -> anyhow::Result<()> {
    let (kind, common): (PatchKind, &PatchCommon) = args.split();
    let mut sec = ctx.cfg.patch.clone();
    if let Some(n) = common.n {
        sec.n_tasks = n;
    }
    if !common.distances.is_empty() {
        sec.distances = common.distances.clone();
    }
    if let Some(p) = common.policy {
        sec.policy = p;
    }
    if let Some(c) = common.corruption {
        sec.corruption = c;
    }
    if sec.n_tasks == 0 {
        bail!(UsageError("--n must be positive".into()));
    }
    let mut name = format!("{}-{}", kind.name(), stem(&common.model));
    if matches!(kind, PatchKind::SweepConv | PatchKind::SweepSsm | PatchKind::SweepStates) {
        name.push_str(&format!("-{}", sec.corruption));
    }
    if common.clean_control {
        name.push_str("-clean");
    }
    let csv = ctx.out("sweeps", &format!("{name}.csv"));
    let mut outputs = vec![csv.clone()];
    let verdict_path = ctx.out("sweeps", &format!("{name}.verdict.json"));
    if kind == PatchKind::OffByOne {
        outputs.push(verdict_path.clone());
    }
    let stage = Stage::new(
        "patch",
        &(&sec, kind.name(), common.layer, common.clean_control),
        ctx.seed,
        &[&common.model],
        outputs,
    )?;
    if stage.is_fresh(ctx.force)? {
        up_to_date(&name);
        return Ok(());
    }
    stage.prepare()?;
    let model = load_weights(&common.model)?;
    let control = |ts: Vec<TaskInstance>| -> Vec<TaskInstance> {
        if common.clean_control {
            ts.iter().map(TaskInstance::clean_as_corrupted).collect()
        } else {
            ts
        }
    };
    let induction = || -> anyhow::Result<Vec<(usize, Vec<TaskInstance>)>> {
        sec.distances
            .iter()
            .map(|&d| Ok((d, control(induction_tasks(model.vocab(), d, sec.n_tasks, sec.corruption, ctx.seed)?))))
            .collect()
    };
    let mut verdicts = None;
    let sweep: SweepResult = match kind {
        PatchKind::SweepStates => {
            let layers: Vec<usize> = (0..model.n_layers()).collect();
            sweep_states(&model, &induction()?, &layers, sec.policy)?
        }
        PatchKind::SweepSsm => sweep_ssm_inputs(&model, &induction()?, designated(&model, common.layer)?, sec.policy)?,
        PatchKind::SweepConv => sweep_conv_inputs(&model, &induction()?, designated(&model, common.layer)?, sec.policy)?,
        PatchKind::Ioi => ioi_sweep(&model, &control(ioi_tasks(sec.n_tasks, ctx.seed)?), sec.policy)?,
        PatchKind::OffByOne => {
            let s = match model.arch() {
                Arch::Mamba => sweep_ssm_inputs(&model, &induction()?, designated(&model, common.layer)?, sec.policy)?,
                Arch::Transformer => residual_position_probe(&model, &induction()?, common.layer.unwrap_or(0), sec.policy)?,
            };
            let cfg = OffByOneConfig {
                factor: sec.factor,
                noise_floor: sec.noise_floor,
            };
            verdicts = Some(off_by_one_detect(&s, &["B1"], &cfg)?);
            s
        }
    };
    sweep.write(&csv)?;
    if let Some(v) = &verdicts {
        let map: BTreeMap<&str, String> = v.iter().map(|(k, v)| (k.as_str(), v.to_string())).collect();
        write_json(
            &verdict_path,
            &json!({"verdicts": map, "factor": sec.factor, "noise_floor": sec.noise_floor, "config_hash": stage.hash()}),
        )?;
        for (k, v) in v {
            println!("{name}: {k} -> {v}");
        }
    }
    stage.finish()?;
    println!(
        "{name}: {}×{} grid, max |Δ| {:.4} -> {}",
        sweep.rows.len(),
        sweep.cols.len(),
        sweep.max_abs(),
        csv.display()
    );
    Ok(())
}

pub fn autointerp(ctx: &Ctx, args: &AutointerpArgs) -> anyhow::Result<()> {
    let mut sec = ctx.cfg.autointerp.clone();
    if !args.features.is_empty() {
        sec.features = args.features.clone();
    }
    if let Some(t) = args.top {
        sec.top = t;
    }
    if let Some(u) = &args.base_url {
        sec.client.base_url = u.clone();
    }
    let evidence_path = ctx.out("autointerp", &format!("{}.evidence.json", args.name));
    let stage = Stage::new(
        "autointerp-evidence",
        &(&sec.features, sec.top, args.ioi_text),
        ctx.seed,
        &[&args.corpus, &args.stream, &args.sae],
        vec![evidence_path.clone()],
    )?;
    let evidence: Vec<FeatureEvidence> = if stage.is_fresh(ctx.force)? {
        read_json(&evidence_path)?
    } else {
        stage.prepare()?;
        let docs = read_corpus(&args.corpus, usize::MAX)?;
        let (stream, _) = read_stream(&args.stream)?;
        let (sae, _) = load_checkpoint(&args.sae)?;
        let records = encode_stream(&sae, &stream)?;
        let layer = site_layer(&stream);
        let features = if sec.features.is_empty() {
            let mut fired = vec![false; records.n_features];
            for &j in &records.indices {
                fired[j as usize] = true;
            }
            (0..records.n_features).filter(|&j| fired[j]).take(sec.top).collect()
        } else {
            sec.features.clone()
        };
        let text = |t: usize| {
            if args.ioi_text {
                ioi_vocab().text(t).to_string()
            } else {
                id_text(t)
            }
        };
        let ev = features
            .iter()
            .map(|&f| top_activating_samples(layer, f, &records, &docs, &text))
            .collect::<unilab::Result<Vec<_>>>()?;
        write_json(&evidence_path, &ev)?;
        stage.finish()?;
        ev
    };
    println!("{}: evidence for {} features -> {}", args.name, evidence.len(), evidence_path.display());
    if args.evidence_only {
        return Ok(());
    }
    let client = LlmClient::new(sec.client.clone())?;
    let cache = ScoreCache::open(&ctx.out("autointerp", "scores.jsonl"))?;
    let scores = score_all(&client, Some(&cache), &evidence, &sec.kinds)?;
    let scores_path = ctx.out("autointerp", &format!("{}.scores.json", args.name));
    write_json(&scores_path, &scores)?;
    let missing = scores.iter().filter(|s| s.score.is_none()).count();
    println!("{}: {} scores ({missing} missing) -> {}", args.name, scores.len(), scores_path.display());
    if let Some(t) = &args.table {
        score_reports(ctx, &MatchTable::read_csv(t)?, &scores, &args.name)?;
    }
    Ok(())
}

fn score_reports(ctx: &Ctx, table: &MatchTable, scores: &[ScoreRecord], name: &str) -> anyhow::Result<()> {
    let kinds: std::collections::BTreeSet<_> = scores.iter().map(|s| s.kind).collect();
    for kind in kinds {
        match score_vs_mppc_report(scores, table, kind) {
            Ok(r) => {
                let json_path = ctx.out("reports", &format!("{name}.{kind}.json"));
                std::fs::create_dir_all(json_path.parent().unwrap())?;
                write_json(&json_path, &r)?;
                write_atomic(&ctx.out("reports", &format!("{name}.{kind}.csv")), r.to_csv().as_bytes())?;
                println!(
                    "{name}: {kind} report over {} features, {} below MPPC {}",
                    r.n_joined, r.split.n_below, r.split.threshold
                );
            }
            Err(e) => log::warn!("{name}: no {kind} report: {e}"),
        }
    }
    Ok(())
}

const HIST_BINS: usize = 40;

fn histogram(values: &[f64]) -> Vec<usize> {
    let mut h = vec![0usize; HIST_BINS];
    for &v in values {
        let b = (((v + 1.0) / 2.0) * HIST_BINS as f64).floor() as isize;
        h[b.clamp(0, HIST_BINS as isize - 1) as usize] += 1;
    }
    h
}

pub fn report(ctx: &Ctx, args: &ReportArgs) -> anyhow::Result<()> {
    if args.table.is_empty() {
        bail!(UsageError("report needs at least one --table".into()));
    }
    let scores: Option<Vec<ScoreRecord>> = args.scores.as_deref().map(read_json).transpose()?;
    for path in &args.table {
        let name = stem(path);
        let hist_csv = ctx.out("reports", &format!("{name}.hist.csv"));
        let hist_json = ctx.out("reports", &format!("{name}.hist.json"));
        let depth_csv = ctx.out("reports", &format!("{name}.depth.csv"));
        let stage = Stage::new(
            "report",
            &(args.layers_a, args.layers_b),
            ctx.seed,
            &[path],
            vec![hist_csv.clone(), hist_json.clone(), depth_csv.clone()],
        )?;
        let table = MatchTable::read_csv(path)?;
        if !stage.is_fresh(ctx.force)? {
            stage.prepare()?;
            let mut vals: Vec<f64> = table.defined().collect();
            vals.sort_by(f64::total_cmp);
            let h = histogram(&vals);
            let mut csv = String::from("lo,hi,count\n");
            for (i, c) in h.iter().enumerate() {
                let lo = -1.0 + 2.0 * i as f64 / HIST_BINS as f64;
                csv.push_str(&format!("{lo:.2},{:.2},{c}\n", lo + 2.0 / HIST_BINS as f64));
            }
            write_atomic(&hist_csv, csv.as_bytes())?;
            let qs: BTreeMap<String, f64> = if vals.is_empty() {
                BTreeMap::new()
            } else {
                [0.05, 0.25, 0.5, 0.75, 0.95].iter().map(|&q| (format!("q{q}"), quantile(&vals, q))).collect()
            };
            write_json(
                &hist_json,
                &json!({
                    "bins": h,
                    "n_features": table.rows.len(),
                    "n_undefined": table.n_undefined(),
                    "mean": table.mean_rho(),
                    "share_above_0.8": table.share_above(0.8),
                    "share_above_0.95": table.share_above(0.95),
                    "quantiles": qs,
                    "config_hash": stage.hash(),
                }),
            )?;
            let la = args.layers_a.unwrap_or_else(|| table.rows.iter().map(|r| r.layer_a + 1).max().unwrap_or(1));
            let lb = args
                .layers_b
                .unwrap_or_else(|| table.rows.iter().filter_map(|r| r.layer_b.map(|l| l + 1)).max().unwrap_or(1));
            let depth = depth_histogram(&table, la, lb)?;
            let mut d = String::from("layer_a");
            for j in 0..lb {
                d.push_str(&format!(",b{j}"));
            }
            d.push('\n');
            for (i, row) in depth.iter().enumerate() {
                d.push_str(&format!("a{i}"));
                for c in row {
                    d.push_str(&format!(",{c}"));
                }
                d.push('\n');
            }
            write_atomic(&depth_csv, d.as_bytes())?;
            stage.finish()?;
            println!(
                "{name}: mean MPPC {:.4}, share > 0.95 {:.4} -> {}",
                table.mean_rho().unwrap_or(f64::NAN),
                table.share_above(0.95),
                hist_csv.display()
            );
        } else {
            up_to_date(&name);
        }
        if let Some(s) = &scores {
            score_reports(ctx, &table, s, &name)?;
        }
    }
    Ok(())
}

pub fn synth_bench(ctx: &Ctx, args: &SynthArgs) -> anyhow::Result<()> {
    let mut cfg = ctx.cfg.planted.clone();
    cfg.rotated |= args.rotated;
    let name = args
        .name
        .clone()
        .unwrap_or_else(|| if cfg.rotated { "planted_rotated".into() } else { "planted".into() });
    let files = ["sae.csv", "neuron.csv", "recovery.csv", "summary.json"].map(|f| ctx.out("synth", &format!("{name}.{f}")));
    let stage = Stage::new("synth-bench", &cfg, ctx.seed, &[], files.to_vec())?;
    if stage.is_fresh(ctx.force)? {
        up_to_date(&name);
        return Ok(());
    }
    stage.prepare()?;
    let run = run_planted(&cfg)?;
    run.table.write_csv(&files[0])?;
    run.neuron_table.write_csv(&files[1])?;
    run.recovery_table.write_csv(&files[2])?;
    write_json(&files[3], &json!({"summary": run.summary, "config_hash": stage.hash(), "seed": ctx.seed}))?;
    stage.finish()?;
    let s = &run.summary;
    println!(
        "{name}: recovered {}/{}, mean MPPC over recovered {:.4}, share matched {:.4}, neuron mean {:.4}",
        s.recovered, s.n_planted, s.mean_mppc_recovered, s.share_matched, s.neuron_mean_mppc
    );
    Ok(())
}
