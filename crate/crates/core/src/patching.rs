//! Three-pass path patching and the induction / name-binding sweeps.
//!
//! Pass 1 runs the clean input and records everything a freeze policy needs.
//! Pass 2 runs the corrupted input and records the patched node. Pass 3 reruns
//! the clean input with the node overwritten by its corrupted value while the
//! policy pins other paths to their clean values. The reported delta is
//! `metric(pass 3) − metric(pass 1)` at the final position.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harvest::corpus::{self, Corruption, InductionSample, IoiSample};
use crate::io::{write_atomic, write_json};
use crate::models::{run_model, Arch, ForwardTrace, HookKind, HookSite, Interventions, Model};
use crate::numerics::SequenceTensor;
use crate::{par, rng};

/// A labeled position plus an offset, written `B1`, `B1+1`, `S2-1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PositionRef {
    pub label: String,
    pub offset: i64,
}

impl PositionRef {
    pub fn new(label: &str, offset: i64) -> Self {
        PositionRef {
            label: label.to_string(),
            offset,
        }
    }
}

impl fmt::Display for PositionRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.offset {
            0 => write!(f, "{}", self.label),
            o if o > 0 => write!(f, "{}+{o}", self.label),
            o => write!(f, "{}{o}", self.label),
        }
    }
}

impl FromStr for PositionRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad position `{s}` (expected LABEL, LABEL+k or LABEL-k)"));
        let (label, offset) = match s.find(['+', '-']) {
            Some(i) => {
                let off: i64 = s[i + 1..].parse().map_err(|_| bad())?;
                (&s[..i], if &s[i..i + 1] == "-" { -off } else { off })
            }
            None => (s, 0),
        };
        if label.is_empty() || !label.chars().all(|c| c.is_ascii_alphanumeric()) {
            return Err(bad());
        }
        Ok(PositionRef::new(label, offset))
    }
}

/// Clean/corrupted pair with labeled positions and the metric tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: u64,
    pub clean: Vec<usize>,
    pub corrupted: Vec<usize>,
    pub labels: BTreeMap<String, usize>,
    /// Token whose logit is measured (B for induction, IO for name binding).
    pub answer: usize,
    /// Subtracted token (S for name binding).
    pub negative: Option<usize>,
    pub distance: usize,
}

impl TaskInstance {
    pub fn induction(id: u64, s: &InductionSample, corruption: Corruption) -> Self {
        let labels = [("A1", s.a1), ("B1", s.b1), ("A2", s.a2), ("END", s.clean.len() - 1)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        TaskInstance {
            id,
            clean: s.clean.clone(),
            corrupted: s.corrupted(corruption).to_vec(),
            labels,
            answer: s.b,
            negative: None,
            distance: s.distance,
        }
    }

    pub fn ioi(id: u64, s: &IoiSample) -> Self {
        let labels = [
            ("IO", s.io_pos),
            ("S1", s.s1_pos),
            ("S2", s.s2_pos),
            ("END", s.clean.len() - 1),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        TaskInstance {
            id,
            clean: s.clean.clone(),
            corrupted: s.corrupted.clone(),
            labels,
            answer: s.io,
            negative: Some(s.s),
            distance: s.s2_pos - s.io_pos,
        }
    }

    /// Same task with the corrupted input replaced by the clean one.
    pub fn clean_as_corrupted(&self) -> Self {
        TaskInstance {
            corrupted: self.clean.clone(),
            ..self.clone()
        }
    }

    pub fn resolve(&self, p: &PositionRef) -> Result<usize> {
        let base = *self
            .labels
            .get(&p.label)
            .ok_or_else(|| Error::Data(format!("task {} has no position label {}", self.id, p.label)))?;
        let pos = base as i64 + p.offset;
        if pos < 0 || pos as usize >= self.clean.len() {
            return Err(Error::Data(format!(
                "position {p} = {pos} outside sequence of length {}",
                self.clean.len()
            )));
        }
        Ok(pos as usize)
    }

    pub fn metric(&self, logits: &SequenceTensor) -> Result<f64> {
        let last = logits.row(logits.len() - 1);
        logit_diff(last, self.answer, self.negative)
    }

    fn validate(&self, model: &Model) -> Result<()> {
        if self.clean.len() != self.corrupted.len() {
            return Err(Error::Data(format!(
                "task {}: clean and corrupted lengths differ ({} vs {})",
                self.id,
                self.clean.len(),
                self.corrupted.len()
            )));
        }
        let v = model.vocab();
        if self.clean.iter().chain(&self.corrupted).any(|&t| t >= v)
            || self.answer >= v
            || self.negative.is_some_and(|n| n >= v)
        {
            return Err(Error::Data(format!("task {} uses tokens outside vocabulary {v}", self.id)));
        }
        Ok(())
    }
}

/// `logit[positive] − logit[negative]`, or the plain logit without a negative.
pub fn logit_diff(logits: &[f64], positive: usize, negative: Option<usize>) -> Result<f64> {
    let get = |t: usize| {
        logits
            .get(t)
            .copied()
            .ok_or_else(|| Error::Data(format!("token {t} outside logits of width {}", logits.len())))
    };
    Ok(get(positive)? - negative.map(get).transpose()?.unwrap_or(0.0))
}

/// Which paths recompute in pass 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Everything downstream recomputes, except that every other layer's
    /// SSM state reads its clean value.
    #[default]
    ExceptOtherStates,
    /// Every block after the patched one adds its clean update, so the patch
    /// reaches the logits only through the residual stream.
    DirectPathOnly,
}

impl fmt::Display for FreezePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FreezePolicy::ExceptOtherStates => "except_other_states",
            FreezePolicy::DirectPathOnly => "direct_path_only",
        })
    }
}

impl FromStr for FreezePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "except_other_states" => Ok(FreezePolicy::ExceptOtherStates),
            "direct_path_only" => Ok(FreezePolicy::DirectPathOnly),
            _ => Err(Error::Config(format!("unknown freeze policy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PatchPositions {
    Labeled(Vec<PositionRef>),
    Absolute(Vec<usize>),
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub site: HookSite,
    pub positions: PatchPositions,
    pub policy: FreezePolicy,
    /// Additional sites pinned to clean values in pass 3.
    pub extra_frozen: Vec<HookSite>,
}

impl PatchSpec {
    pub fn at(site: HookSite, position: PositionRef, policy: FreezePolicy) -> Self {
        PatchSpec {
            site,
            positions: PatchPositions::Labeled(vec![position]),
            policy,
            extra_frozen: Vec::new(),
        }
    }

    fn resolve(&self, task: &TaskInstance) -> Result<Vec<usize>> {
        match &self.positions {
            PatchPositions::Labeled(ps) => ps.iter().map(|p| task.resolve(p)).collect(),
            PatchPositions::Absolute(ps) => {
                if let Some(p) = ps.iter().find(|&&p| p >= task.clean.len()) {
                    return Err(Error::Data(format!(
                        "position {p} outside sequence of length {}",
                        task.clean.len()
                    )));
                }
                Ok(ps.clone())
            }
            PatchPositions::All => Ok((0..task.clean.len()).collect()),
        }
    }
}

/// Pass-1 record: clean metric plus what the policy freezes.
pub struct CleanPass {
    pub metric: f64,
    trace: ForwardTrace,
    embed: SequenceTensor,
}

fn policy_capture(model: &Model, policy: FreezePolicy) -> BTreeSet<HookSite> {
    match policy {
        FreezePolicy::ExceptOtherStates if model.arch() == Arch::Mamba => {
            crate::models::all_layers(model, HookKind::SsmStateH)
        }
        FreezePolicy::ExceptOtherStates => BTreeSet::new(),
        FreezePolicy::DirectPathOnly => crate::models::all_layers(model, HookKind::ResidualPostBlock),
    }
}

pub fn clean_pass(model: &Model, task: &TaskInstance, policy: FreezePolicy, extra: &[HookSite]) -> Result<CleanPass> {
    task.validate(model)?;
    let mut capture = policy_capture(model, policy);
    capture.extend(extra.iter().copied());
    let trace = run_model(model, &task.clean, &capture, &Interventions::default())?;
    Ok(CleanPass {
        metric: task.metric(&trace.logits)?,
        embed: model.embed_tokens(&task.clean)?,
        trace,
    })
}

/// Pass-2 capture of every site a set of specs will patch.
pub fn corrupt_pass(model: &Model, task: &TaskInstance, sites: &BTreeSet<HookSite>) -> Result<ForwardTrace> {
    task.validate(model)?;
    run_model(model, &task.corrupted, sites, &Interventions::default())
}

/// Structural freeze plan for pass 3. Fails if the patched node would be
/// both frozen and recomputed.
fn freeze_plan(model: &Model, clean: &CleanPass, spec: &PatchSpec) -> Result<Interventions> {
    model.validate_site(spec.site)?;
    let mut iv = Interventions::new();
    let patched = spec.site;
    let same = |s: HookSite| {
        let canon = |k: HookKind| if k == HookKind::MambaPostSilu { HookKind::SsmInputC } else { k };
        s.layer == patched.layer && canon(s.kind) == canon(patched.kind)
    };
    match spec.policy {
        FreezePolicy::ExceptOtherStates => {
            if model.arch() == Arch::Mamba {
                for l in (0..model.n_layers()).filter(|&l| l != patched.layer) {
                    let site = HookSite::new(l, HookKind::SsmStateH);
                    iv.freeze_site(site, clean.trace.get(site)?.clone());
                }
            }
        }
        FreezePolicy::DirectPathOnly => {
            let first = if patched.kind == HookKind::Logits {
                model.n_layers()
            } else {
                patched.layer + 1
            };
            for l in first..model.n_layers() {
                let post = clean.trace.get(HookSite::new(l, HookKind::ResidualPostBlock))?;
                let prev = if l == 0 {
                    &clean.embed
                } else {
                    clean.trace.get(HookSite::new(l - 1, HookKind::ResidualPostBlock))?
                };
                let mut delta = post.clone();
                for (d, p) in delta.data_mut().iter_mut().zip(prev.data()) {
                    *d -= p;
                }
                iv.freeze_block_delta(l, delta);
            }
        }
    }
    for &s in &spec.extra_frozen {
        if same(s) {
            return Err(Error::Intervention(format!(
                "{s} is both frozen and patched (recomputed) in pass 3"
            )));
        }
        iv.freeze_site(s, clean.trace.get(s)?.clone());
    }
    if iv.frozen_delta_layers().any(|l| l == patched.layer) && patched.kind != HookKind::Logits {
        return Err(Error::Intervention(format!(
            "block {} is frozen but contains the patched node {patched}",
            patched.layer
        )));
    }
    Ok(iv)
}

/// Pass 3 given the first two passes.
pub fn patch_with(
    model: &Model,
    task: &TaskInstance,
    clean: &CleanPass,
    corrupt: &ForwardTrace,
    spec: &PatchSpec,
) -> Result<f64> {
    let mut iv = freeze_plan(model, clean, spec)?;
    let src = corrupt.get(spec.site)?;
    for p in spec.resolve(task)? {
        iv.overwrite(spec.site, p, src.row(p).to_vec());
    }
    let trace = run_model(model, &task.clean, &BTreeSet::new(), &iv)?;
    Ok(task.metric(&trace.logits)? - clean.metric)
}

/// Full three-pass protocol for one task and node.
pub fn path_patch(model: &Model, task: &TaskInstance, spec: &PatchSpec) -> Result<f64> {
    let clean = clean_pass(model, task, spec.policy, &spec.extra_frozen)?;
    let corrupt = corrupt_pass(model, task, &[spec.site].into_iter().collect())?;
    patch_with(model, task, &clean, &corrupt, spec)
}

/// Mean over tasks of several specs, sharing passes 1 and 2 per task.
/// Per-task deltas are summed in task order.
pub fn mean_deltas(model: &Model, tasks: &[TaskInstance], specs: &[PatchSpec]) -> Result<Vec<f64>> {
    if tasks.is_empty() {
        return Err(Error::Data("no tasks to patch".into()));
    }
    let policies: BTreeSet<FreezePolicy> = specs.iter().map(|s| s.policy).collect();
    let sites: BTreeSet<HookSite> = specs.iter().map(|s| s.site).collect();
    let extra: Vec<HookSite> = specs
        .iter()
        .flat_map(|s| s.extra_frozen.iter().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let per_task = par::map(tasks, |task| -> Result<Vec<f64>> {
        let corrupt = corrupt_pass(model, task, &sites)?;
        let mut cleans = BTreeMap::new();
        for &p in &policies {
            cleans.insert(p, clean_pass(model, task, p, &extra)?);
        }
        specs
            .iter()
            .map(|s| patch_with(model, task, &cleans[&s.policy], &corrupt, s))
            .collect()
    });
    let mut sums = vec![0.0; specs.len()];
    for r in per_task {
        for (s, d) in sums.iter_mut().zip(r?) {
            *s += d;
        }
    }
    let n = tasks.len() as f64;
    Ok(sums.into_iter().map(|s| s / n).collect())
}

impl PartialOrd for FreezePolicy {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for FreezePolicy {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (*self as u8).cmp(&(*other as u8))
    }
}

/// Grid of mean logit-diff deltas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub name: String,
    pub row_header: String,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// `values[r][c]`
    pub values: Vec<Vec<f64>>,
    pub n_samples: usize,
    pub policy: FreezePolicy,
    pub meta: BTreeMap<String, String>,
}

impl SweepResult {
    pub fn get(&self, row: &str, col: &str) -> Option<f64> {
        let r = self.rows.iter().position(|x| x == row)?;
        let c = self.cols.iter().position(|x| x == col)?;
        Some(self.values[r][c])
    }

    pub fn col(&self, col: &str) -> Option<Vec<f64>> {
        let c = self.cols.iter().position(|x| x == col)?;
        Some(self.values.iter().map(|r| r[c]).collect())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.row_header.clone();
        for c in &self.cols {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for (r, vals) in self.rows.iter().zip(&self.values) {
            s.push_str(r);
            for v in vals {
                s.push_str(&format!(",{v:.17e}"));
            }
            s.push('\n');
        }
        s
    }

    /// CSV grid plus a JSON sidecar with the metadata.
    pub fn write(&self, csv_path: &Path) -> Result<()> {
        write_atomic(csv_path, self.to_csv().as_bytes())?;
        write_json(&csv_path.with_extension("json"), self)
    }
}

/// Induction tasks at one distance with a fixed corruption.
pub fn induction_tasks(
    vocab: usize,
    distance: usize,
    n: usize,
    corruption: Corruption,
    seed: u64,
) -> Result<Vec<TaskInstance>> {
    let mut r = rng::derived(seed, &format!("induction-tasks-{distance}"));
    (0..n)
        .map(|i| Ok(TaskInstance::induction(i as u64, &corpus::induction_sample(&mut r, vocab, distance)?, corruption)))
        .collect()
}

pub fn ioi_tasks(n: usize, seed: u64) -> Result<Vec<TaskInstance>> {
    let mut r = rng::derived(seed, "ioi-tasks");
    (0..n)
        .map(|i| Ok(TaskInstance::ioi(i as u64, &corpus::ioi_sample(&mut r)?)))
        .collect()
}

fn grid(
    name: &str,
    model: &Model,
    row_header: &str,
    rows: Vec<(String, Vec<TaskInstance>)>,
    cols: &[String],
    spec_for: &dyn Fn(usize) -> PatchSpec,
    policy: FreezePolicy,
) -> Result<SweepResult> {
    let specs: Vec<PatchSpec> = (0..cols.len()).map(spec_for).collect();
    let mut values = Vec::with_capacity(rows.len());
    let mut n_samples = 0;
    for (_, tasks) in &rows {
        values.push(mean_deltas(model, tasks, &specs)?);
        n_samples = tasks.len();
    }
    let mut meta = BTreeMap::new();
    meta.insert("arch".to_string(), model.arch().to_string());
    if let Some(c) = &model.construction {
        meta.insert("construction".to_string(), c.kind.clone());
    }
    meta.insert("model_hash".to_string(), model_hash(model));
    Ok(SweepResult {
        name: name.to_string(),
        row_header: row_header.to_string(),
        rows: rows.into_iter().map(|(r, _)| r).collect(),
        cols: cols.to_vec(),
        values,
        n_samples,
        policy,
        meta,
    })
}

fn model_hash(model: &Model) -> String {
    let bytes = crate::models::weights_bytes(model).unwrap_or_default();
    crate::io::sha256_hex(&bytes)[..16].to_string()
}

fn distance_rows(tasks: &[(usize, Vec<TaskInstance>)]) -> Vec<(String, Vec<TaskInstance>)> {
    tasks.iter().map(|(d, t)| (d.to_string(), t.clone())).collect()
}

/// Patch the SSM state right before the second A in every layer.
pub fn sweep_states(
    model: &Model,
    tasks: &[(usize, Vec<TaskInstance>)],
    layers: &[usize],
    policy: FreezePolicy,
) -> Result<SweepResult> {
    if model.arch() != Arch::Mamba {
        return Err(Error::HookSite("state sweeps need a Mamba model".into()));
    }
    let cols: Vec<String> = layers.iter().map(|l| format!("L{l}")).collect();
    grid(
        "sweep_states",
        model,
        "distance",
        distance_rows(tasks),
        &cols,
        &|c| PatchSpec::at(HookSite::new(layers[c], HookKind::SsmStateH), PositionRef::new("A2", -1), policy),
        policy,
    )
}

pub fn ssm_input_positions() -> Vec<PositionRef> {
    vec![
        PositionRef::new("A1", 0),
        PositionRef::new("B1", 0),
        PositionRef::new("B1", 1),
        PositionRef::new("B1", 2),
        PositionRef::new("B1", 3),
    ]
}

fn position_sweep(
    name: &str,
    model: &Model,
    tasks: &[(usize, Vec<TaskInstance>)],
    site: HookSite,
    positions: &[PositionRef],
    policy: FreezePolicy,
) -> Result<SweepResult> {
    let cols: Vec<String> = positions.iter().map(|p| p.to_string()).collect();
    grid(
        name,
        model,
        "distance",
        distance_rows(tasks),
        &cols,
        &|c| PatchSpec::at(site, positions[c].clone(), policy),
        policy,
    )
}

/// Patch the SSM input `c` at A1, B1, B1+1, B1+2, B1+3 of one layer.
pub fn sweep_ssm_inputs(
    model: &Model,
    tasks: &[(usize, Vec<TaskInstance>)],
    layer: usize,
    policy: FreezePolicy,
) -> Result<SweepResult> {
    position_sweep(
        "sweep_ssm_inputs",
        model,
        tasks,
        HookSite::new(layer, HookKind::SsmInputC),
        &ssm_input_positions(),
        policy,
    )
}

/// Patch the conv input `x` at A1, B1, B1+1 of one layer.
pub fn sweep_conv_inputs(
    model: &Model,
    tasks: &[(usize, Vec<TaskInstance>)],
    layer: usize,
    policy: FreezePolicy,
) -> Result<SweepResult> {
    position_sweep(
        "sweep_conv_inputs",
        model,
        tasks,
        HookSite::new(layer, HookKind::ConvInputX),
        &[PositionRef::new("A1", 0), PositionRef::new("B1", 0), PositionRef::new("B1", 1)],
        policy,
    )
}

pub fn ioi_positions() -> Vec<PositionRef> {
    ["IO", "S1", "S2"]
        .iter()
        .flat_map(|l| [PositionRef::new(l, 0), PositionRef::new(l, 1)])
        .chain([PositionRef::new("END", 0)])
        .collect()
}

/// Patch `c` at every labeled name position (and the token after it) in
/// every layer. Rows are layers.
pub fn ioi_sweep(model: &Model, tasks: &[TaskInstance], policy: FreezePolicy) -> Result<SweepResult> {
    if model.arch() != Arch::Mamba {
        return Err(Error::HookSite("name-binding sweeps patch SSM inputs".into()));
    }
    if model.vocab() != corpus::ioi_vocab().size() {
        return Err(Error::Data(format!(
            "model vocabulary {} does not match the name-binding vocabulary {}",
            model.vocab(),
            corpus::ioi_vocab().size()
        )));
    }
    let positions = ioi_positions();
    let cols: Vec<String> = positions.iter().map(|p| p.to_string()).collect();
    let specs: Vec<PatchSpec> = (0..model.n_layers())
        .flat_map(|l| {
            positions
                .iter()
                .map(move |p| PatchSpec::at(HookSite::new(l, HookKind::SsmInputC), p.clone(), policy))
        })
        .collect();
    let flat = mean_deltas(model, tasks, &specs)?;
    let values: Vec<Vec<f64>> = flat.chunks(positions.len()).map(|c| c.to_vec()).collect();
    let mut meta = BTreeMap::new();
    meta.insert("arch".to_string(), model.arch().to_string());
    meta.insert("model_hash".to_string(), model_hash(model));
    Ok(SweepResult {
        name: "ioi_sweep".to_string(),
        row_header: "layer".to_string(),
        rows: (0..model.n_layers()).map(|l| format!("L{l}")).collect(),
        cols,
        values,
        n_samples: tasks.len(),
        policy,
        meta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    OffByOne,
    SamePosition,
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::OffByOne => "off-by-one",
            Verdict::SamePosition => "same-position",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffByOneConfig {
    /// Required ratio between the two positions.
    pub factor: f64,
    /// Mean |Δ| below this never counts as an effect.
    pub noise_floor: f64,
}

impl Default for OffByOneConfig {
    fn default() -> Self {
        OffByOneConfig {
            factor: 5.0,
            noise_floor: 1e-6,
        }
    }
}

/// For each source label `t`, compare mean |Δ| (over sweep rows) at column
/// `t+1` with column `t`.
pub fn off_by_one_detect(
    sweep: &SweepResult,
    sources: &[&str],
    cfg: &OffByOneConfig,
) -> Result<Vec<(String, Verdict)>> {
    let mean_abs = |col: &str| -> Result<f64> {
        let v = sweep
            .col(col)
            .ok_or_else(|| Error::Data(format!("sweep {} has no column {col}", sweep.name)))?;
        Ok(v.iter().map(|x| x.abs()).sum::<f64>() / v.len().max(1) as f64)
    };
    sources
        .iter()
        .map(|&t| {
            let here = mean_abs(t)?;
            let next = mean_abs(&PositionRef::new(t, 1).to_string())?;
            let v = if next > cfg.noise_floor && next >= cfg.factor * here {
                Verdict::OffByOne
            } else if here > cfg.noise_floor && here >= cfg.factor * next {
                Verdict::SamePosition
            } else {
                Verdict::Inconclusive
            };
            Ok((t.to_string(), v))
        })
        .collect()
}

/// Residual-stream probe at B1 and B1+1 after the first block; works for
/// both architectures and feeds [`off_by_one_detect`].
pub fn residual_position_probe(
    model: &Model,
    tasks: &[(usize, Vec<TaskInstance>)],
    layer: usize,
    policy: FreezePolicy,
) -> Result<SweepResult> {
    position_sweep(
        "residual_position_probe",
        model,
        tasks,
        HookSite::new(layer, HookKind::ResidualPostBlock),
        &[PositionRef::new("B1", 0), PositionRef::new("B1", 1)],
        policy,
    )
}
