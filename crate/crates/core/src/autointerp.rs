//! Feature evidence, scoring prompts, an LLM chat client with a JSONL cache,
//! and the score-versus-MPPC report.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::harvest::corpus::TokenDocument;
use crate::io::sha256_hex;
use crate::mppc::{quantile, MatchTable};
use crate::sae::FeatureRecords;

pub mod mock;

pub const WINDOW_LEN: usize = 17;
pub const N_WINDOWS: usize = 10;
const HALF: usize = WINDOW_LEN / 2;

pub const API_KEY_ENV: &str = "UNILAB_LLM_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Complexity,
    Consistency,
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreKind::Complexity => "complexity",
            ScoreKind::Consistency => "consistency",
        })
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "complexity" => Ok(ScoreKind::Complexity),
            "consistency" => Ok(ScoreKind::Consistency),
            _ => Err(Error::Config(format!("unknown score kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceWindow {
    pub doc: u64,
    /// Position of the peak token within the document.
    pub peak_position: u32,
    pub peak: f64,
    /// Exactly [`WINDOW_LEN`] entries; padding uses the empty string.
    pub tokens: Vec<String>,
    pub activations: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceStatus {
    Complete,
    /// Fewer than [`N_WINDOWS`] distinct windows; the strongest ones repeat.
    Padded,
    /// The feature never fires.
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEvidence {
    pub layer: usize,
    pub feature: usize,
    pub status: EvidenceStatus,
    /// [`N_WINDOWS`] windows unless the status is `Empty`.
    pub windows: Vec<EvidenceWindow>,
}

/// Document-window start for a peak, shifted left at the end of a document.
fn window_start(peak: usize, doc_len: usize) -> usize {
    peak.saturating_sub(HALF).min(doc_len.saturating_sub(WINDOW_LEN))
}

/// Top activating windows of one feature, sorted by peak activation with
/// ties broken by (doc, position). Windows overlapping an accepted window of
/// the same document by at least half are skipped.
pub fn top_activating_samples(
    layer: usize,
    feature: usize,
    records: &FeatureRecords,
    docs: &[TokenDocument],
    token_text: &dyn Fn(usize) -> String,
) -> Result<FeatureEvidence> {
    if feature >= records.n_features {
        return Err(Error::Data(format!(
            "feature {feature} outside dictionary of {}",
            records.n_features
        )));
    }
    let mut acts: HashMap<(u64, u32), f64> = HashMap::new();
    for i in 0..records.len() {
        let (idx, vals) = records.row(i);
        if let Some(k) = idx.iter().position(|&j| j as usize == feature) {
            if vals[k] < 0.0 {
                return Err(Error::Data(format!("negative activation {} for feature {feature}", vals[k])));
            }
            if vals[k] > 0.0 {
                acts.insert((records.docs[i], records.positions[i]), vals[k]);
            }
        }
    }
    let mut firing: Vec<(f64, u64, u32)> = acts.iter().map(|(&(d, p), &v)| (v, d, p)).collect();
    firing.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let by_id: HashMap<u64, &TokenDocument> = docs.iter().map(|d| (d.id, d)).collect();
    let mut accepted: Vec<(u64, usize, EvidenceWindow)> = Vec::new();
    for (peak, doc, pos) in firing {
        if accepted.len() == N_WINDOWS {
            break;
        }
        let d = by_id
            .get(&doc)
            .ok_or_else(|| Error::Data(format!("records reference unknown document {doc}")))?;
        let len = d.tokens.len();
        if pos as usize >= len {
            return Err(Error::Data(format!("position {pos} outside document {doc} of length {len}")));
        }
        let start = window_start(pos as usize, len);
        let overlaps = accepted.iter().any(|(od, os, _)| {
            let lo = start.max(*os);
            let hi = (start + WINDOW_LEN).min(os + WINDOW_LEN);
            *od == doc && hi > lo && 2 * (hi - lo) >= WINDOW_LEN
        });
        if overlaps {
            continue;
        }
        let mut tokens = Vec::with_capacity(WINDOW_LEN);
        let mut activations = Vec::with_capacity(WINDOW_LEN);
        for p in start..start + WINDOW_LEN {
            if p < len {
                tokens.push(token_text(d.tokens[p]));
                activations.push(acts.get(&(doc, p as u32)).copied().unwrap_or(0.0));
            } else {
                tokens.push(String::new());
                activations.push(0.0);
            }
        }
        accepted.push((
            doc,
            start,
            EvidenceWindow {
                doc,
                peak_position: pos,
                peak,
                tokens,
                activations,
            },
        ));
    }
    let mut windows: Vec<EvidenceWindow> = accepted.into_iter().map(|(_, _, w)| w).collect();
    let status = match windows.len() {
        0 => EvidenceStatus::Empty,
        N_WINDOWS => EvidenceStatus::Complete,
        n => {
            for i in 0..N_WINDOWS - n {
                windows.push(windows[i % n].clone());
            }
            EvidenceStatus::Padded
        }
    };
    Ok(FeatureEvidence {
        layer,
        feature,
        status,
        windows,
    })
}

pub const COMPLEXITY_PROMPT: &str = "We are analyzing the activation levels of features in a neural network, where each feature activates certain tokens in a text. Each token's activation value indicates its relevance to the feature, with higher values showing stronger association. Your task is to infer the common characteristic that these tokens collectively suggest based on their activation values and give this feature a complexity

Complexity
- 5: Rich feature firing on diverse contexts with an interesting unifying theme, e.g. \u{201c}feelings of togetherness\u{201d}
- 4: Feature relating to high-level semantic structure, e.g. \u{201c}return statements in code\u{201d}
- 3: Moderate complexity, such as a phrase, category, or tracking sentence structure e.g. \u{201c}website URLs\u{201d}
- 2: Single word or token feature but including multiple languages or spelling, e.g. \u{201c}mentions of dog\u{201d}
- 1: Single token feature, e.g. \u{201c}the token \u{2018}(\u{2019}\u{201d}

Consider the following activations for a feature in the neural network. Activation values are non-negative, with higher values indicating a stronger connection between the token and the feature. Don't list examples of words. You only need to give me a number! Just a number! It represents your score for feature complexity.";

pub const CONSISTENCY_PROMPT: &str = "We are analyzing the activation levels of features in a neural network, where each feature activates certain tokens in a text. Each token's activation value indicates its relevance to the feature, with higher values showing stronger association. Your task is to give this feature a monosemanticity score based on the following scoring criteria:

Activation Consistency
- 5: Clear pattern with no deviating examples
- 4: Clear pattern with one or two deviating examples
- 3: Clear overall pattern but quite a few examples not fitting that pattern
- 2: Broad consistent theme but lacking structure
- 1: No discernible pattern

Consider the following activations for a feature in the neural network. Activation values are non-negative, with higher values indicating a stronger connection between the token and the feature. You only need to give me a number! Just a number! It represents your score for feature monosemanticity.";

pub fn prompt_header(kind: ScoreKind) -> &'static str {
    match kind {
        ScoreKind::Complexity => COMPLEXITY_PROMPT,
        ScoreKind::Consistency => CONSISTENCY_PROMPT,
    }
}

/// Prompt header followed by each window as `token<TAB>activation` lines.
pub fn format_prompt(kind: ScoreKind, ev: &FeatureEvidence) -> Result<String> {
    if ev.status == EvidenceStatus::Empty || ev.windows.len() != N_WINDOWS {
        return Err(Error::Data(format!(
            "feature {} (layer {}) has no usable evidence",
            ev.feature, ev.layer
        )));
    }
    let mut s = String::from(prompt_header(kind));
    s.push_str("\n\n");
    for (i, w) in ev.windows.iter().enumerate() {
        s.push_str(&format!("Sample {}:\n", i + 1));
        for (t, a) in w.tokens.iter().zip(&w.activations) {
            s.push_str(&format!("{t}\t{a:.3}\n"));
        }
        s.push('\n');
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFlag {
    Ok,
    /// The only integers in the response were outside 1..=5.
    Clamped,
    Missing,
    EmptyEvidence,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedScore {
    pub score: Option<u8>,
    pub flag: ScoreFlag,
}

/// First integer in 1..=5; otherwise the first integer clamped; otherwise
/// missing. Total over all inputs.
pub fn parse_score(response: &str) -> ParsedScore {
    let bytes = response.as_bytes();
    let mut ints: Vec<i128> = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            let negative = start > 0 && bytes[start - 1] == b'-';
            let v: i128 = response[start..i].parse().unwrap_or(i128::MAX);
            ints.push(if negative { -v } else { v });
        } else {
            i += 1;
        }
    }
    if let Some(&v) = ints.iter().find(|v| (1..=5).contains(*v)) {
        return ParsedScore {
            score: Some(v as u8),
            flag: ScoreFlag::Ok,
        };
    }
    match ints.first() {
        Some(&v) => ParsedScore {
            score: Some(v.clamp(1, 5) as u8),
            flag: ScoreFlag::Clamped,
        },
        None => ParsedScore {
            score: None,
            flag: ScoreFlag::Missing,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub layer: usize,
    pub feature: usize,
    pub kind: ScoreKind,
    pub score: Option<u8>,
    pub flag: ScoreFlag,
    pub raw: String,
    pub model: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub prompt_hash: String,
}

impl ScoreRecord {
    pub fn cache_key(&self) -> String {
        cache_key(self.layer, self.feature, self.kind, &self.prompt_hash)
    }
}

pub fn cache_key(layer: usize, feature: usize, kind: ScoreKind, prompt_hash: &str) -> String {
    sha256_hex(format!("{layer}:{feature}:{kind}:{prompt_hash}").as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    /// Chat-completion base URL; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
    pub concurrency: usize,
    pub temperature: f64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o".into(),
            api_key_env: API_KEY_ENV.into(),
            max_retries: 3,
            backoff_ms: 500,
            timeout_secs: 60,
            concurrency: 4,
            temperature: 0.0,
        }
    }
}

pub struct LlmClient {
    cfg: ClientConfig,
    agent: ureq::Agent,
    key: Option<String>,
}

impl LlmClient {
    pub fn new(cfg: ClientConfig) -> Result<Self> {
        if cfg.concurrency == 0 {
            return Err(Error::Config("concurrency must be at least 1".into()));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        let key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        Ok(LlmClient { cfg, agent, key })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    /// Send one prompt. Transport errors, 429 and 5xx are retried with
    /// exponential backoff; other statuses fail at once.
    pub fn complete(&self, prompt: &str) -> Result<String> {
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let body = json!({
            "model": self.cfg.model,
            "temperature": self.cfg.temperature,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut last = String::new();
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.cfg.backoff_ms << (attempt - 1).min(16)));
            }
            let mut req = self.agent.post(&url);
            if let Some(k) = &self.key {
                req = req.header("Authorization", &format!("Bearer {k}"));
            }
            match req.send_json(&body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let text = resp.body_mut().read_to_string().unwrap_or_default();
                    if status == 200 {
                        return Ok(text);
                    }
                    last = format!("HTTP {status}: {}", text.chars().take(200).collect::<String>());
                    if status != 429 && status < 500 {
                        break;
                    }
                }
                Err(e) => last = e.to_string(),
            }
            log::warn!("chat request attempt {} failed: {last}", attempt + 1);
        }
        Err(Error::Service(format!("chat request to {url} failed: {last}")))
    }
}

/// `choices[0].message.content` of a chat-completion response body.
pub fn extract_content(body: &str) -> Option<String> {
    let v: Value = serde_json::from_str(body).ok()?;
    v.get("choices")?
        .get(0)?
        .get("message")?
        .get("content")?
        .as_str()
        .map(str::to_string)
}

/// Append-only JSONL score cache keyed by (layer, feature, kind, prompt hash).
pub struct ScoreCache {
    path: PathBuf,
    entries: Mutex<HashMap<String, ScoreRecord>>,
}

impl ScoreCache {
    /// Load an existing cache; unreadable lines (a torn final write) are skipped.
    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                match serde_json::from_str::<ScoreRecord>(line) {
                    Ok(r) => {
                        entries.insert(r.cache_key(), r);
                    }
                    Err(e) => log::warn!("skipping unreadable cache line in {}: {e}", path.display()),
                }
            }
        }
        Ok(ScoreCache {
            path: path.to_path_buf(),
            entries: Mutex::new(entries),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<ScoreRecord> {
        self.entries.lock().unwrap().get(key).cloned()
    }

    pub fn insert(&self, rec: &ScoreRecord) -> Result<()> {
        let mut map = self.entries.lock().unwrap();
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        let mut line = serde_json::to_string(rec)?;
        line.push('\n');
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        map.insert(rec.cache_key(), rec.clone());
        Ok(())
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Score one feature, consulting and filling the cache.
pub fn score_feature(
    client: &LlmClient,
    cache: Option<&ScoreCache>,
    ev: &FeatureEvidence,
    kind: ScoreKind,
) -> Result<ScoreRecord> {
    let model = client.config().model.clone();
    if ev.status == EvidenceStatus::Empty {
        return Ok(ScoreRecord {
            layer: ev.layer,
            feature: ev.feature,
            kind,
            score: None,
            flag: ScoreFlag::EmptyEvidence,
            raw: String::new(),
            model,
            timestamp: now(),
            prompt_hash: String::new(),
        });
    }
    let prompt = format_prompt(kind, ev)?;
    let prompt_hash = sha256_hex(prompt.as_bytes());
    let key = cache_key(ev.layer, ev.feature, kind, &prompt_hash);
    if let Some(hit) = cache.and_then(|c| c.get(&key)) {
        return Ok(hit);
    }
    let body = client.complete(&prompt)?;
    let (raw, parsed) = match extract_content(&body) {
        Some(c) => {
            let p = parse_score(&c);
            (c, p)
        }
        None => (
            body,
            ParsedScore {
                score: None,
                flag: ScoreFlag::Missing,
            },
        ),
    };
    let rec = ScoreRecord {
        layer: ev.layer,
        feature: ev.feature,
        kind,
        score: parsed.score,
        flag: parsed.flag,
        raw,
        model,
        timestamp: now(),
        prompt_hash,
    };
    if let Some(c) = cache {
        c.insert(&rec)?;
    }
    Ok(rec)
}

/// Score every (evidence, kind) pair with at most `concurrency` requests in
/// flight. Output follows input order, evidence-major.
pub fn score_all(
    client: &LlmClient,
    cache: Option<&ScoreCache>,
    evidence: &[FeatureEvidence],
    kinds: &[ScoreKind],
) -> Result<Vec<ScoreRecord>> {
    let jobs: Vec<(&FeatureEvidence, ScoreKind)> =
        evidence.iter().flat_map(|e| kinds.iter().map(move |&k| (e, k))).collect();
    let results: Vec<Mutex<Option<Result<ScoreRecord>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = client.config().concurrency.min(jobs.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(ev, kind)) = jobs.get(i) else { break };
                *results[i].lock().unwrap() = Some(score_feature(client, cache, ev, kind));
            });
        }
    });
    results
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every job ran"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub score: u8,
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSplit {
    pub threshold: f64,
    pub n_below: usize,
    pub n_above: usize,
    pub mean_score_below: Option<f64>,
    pub mean_score_above: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub kind: ScoreKind,
    pub n_joined: usize,
    pub bins: Vec<BinSummary>,
    pub split: ThresholdSplit,
}

impl ScoreReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("score,n,mean,min,q1,median,q3,max\n");
        for b in &self.bins {
            s.push_str(&format!(
                "{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                b.score, b.n, b.mean, b.min, b.q1, b.median, b.q3, b.max
            ));
        }
        s
    }
}

pub const MONOSEMANTIC_SPLIT: f64 = 0.2;

/// MPPC distribution per score bin for one score kind, joined on
/// (layer, feature) against side A of `table`.
pub fn score_vs_mppc_report(scores: &[ScoreRecord], table: &MatchTable, kind: ScoreKind) -> Result<ScoreReport> {
    let rho: HashMap<(usize, usize), f64> = table
        .rows
        .iter()
        .filter_map(|r| r.rho.map(|v| ((r.layer_a, r.feature_a), v)))
        .collect();
    let mut bins: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    let mut below = Vec::new();
    let mut above = Vec::new();
    for s in scores.iter().filter(|s| s.kind == kind) {
        let (Some(score), Some(&r)) = (s.score, rho.get(&(s.layer, s.feature))) else {
            continue;
        };
        bins.entry(score).or_default().push(r);
        if r < MONOSEMANTIC_SPLIT {
            below.push(score as f64);
        } else {
            above.push(score as f64);
        }
    }
    let n_joined = below.len() + above.len();
    if n_joined == 0 {
        return Err(Error::Data(format!("no {kind} scores join the match table")));
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let bins = bins
        .into_iter()
        .map(|(score, mut v)| {
            v.sort_by(f64::total_cmp);
            BinSummary {
                score,
                n: v.len(),
                mean: mean(&v).unwrap(),
                min: v[0],
                q1: quantile(&v, 0.25),
                median: quantile(&v, 0.5),
                q3: quantile(&v, 0.75),
                max: v[v.len() - 1],
            }
        })
        .collect();
    Ok(ScoreReport {
        kind,
        n_joined,
        bins,
        split: ThresholdSplit {
            threshold: MONOSEMANTIC_SPLIT,
            n_below: below.len(),
            n_above: above.len(),
            mean_score_below: mean(&below),
            mean_score_above: mean(&above),
        },
    })
}
