//! Synthetic token corpora: induction sequences, name-binding (IOI)
//! sentences and uniform noise.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
/// First id available to ordinary tokens.
pub const FIRST_REGULAR: usize = 2;
pub const DEFAULT_TRUNCATION: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenDocument {
    pub id: u64,
    pub tokens: Vec<usize>,
}

impl TokenDocument {
    pub fn new(id: u64, tokens: Vec<usize>) -> Result<Self> {
        if tokens.first() != Some(&BOS) {
            return Err(Error::Data(format!("document {id} does not start with bos")));
        }
        Ok(TokenDocument { id, tokens })
    }

    pub fn truncate(&mut self, max_len: usize) {
        self.tokens.truncate(max_len.max(1));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    /// `[A][B']...[A]`
    B,
    /// `[A'][B]...[A]`
    A,
}

impl std::fmt::Display for Corruption {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Corruption::B => "b-corrupt",
            Corruption::A => "a-corrupt",
        })
    }
}

impl std::str::FromStr for Corruption {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "b" | "B" | "b-corrupt" => Ok(Corruption::B),
            "a" | "A" | "a-corrupt" => Ok(Corruption::A),
            _ => Err(Error::Config(format!("unknown corruption `{s}`"))),
        }
    }
}

/// `[bos] filler [A][B] filler [A]` with its two corrupted variants.
#[derive(Debug, Clone, PartialEq)]
pub struct InductionSample {
    pub clean: Vec<usize>,
    pub corrupt_b: Vec<usize>,
    pub corrupt_a: Vec<usize>,
    pub a: usize,
    pub b: usize,
    pub a_prime: usize,
    pub b_prime: usize,
    pub a1: usize,
    pub b1: usize,
    pub a2: usize,
    pub distance: usize,
}

impl InductionSample {
    pub fn corrupted(&self, c: Corruption) -> &[usize] {
        match c {
            Corruption::B => &self.corrupt_b,
            Corruption::A => &self.corrupt_a,
        }
    }
}

/// Draw one induction sequence with `A₂ − A₁ = distance`.
///
/// A, B, A′, B′ are distinct and fillers avoid all four, so the only earlier
/// occurrence of A is at A₁. The sequence ends at A₂.
pub fn induction_sample(rng: &mut Rng, vocab: usize, distance: usize) -> Result<InductionSample> {
    if distance < 2 {
        return Err(Error::Config(format!("induction distance must be >= 2, got {distance}")));
    }
    if vocab < FIRST_REGULAR + 5 {
        return Err(Error::Config(format!(
            "vocab {vocab} too small: need 4 distinct slot tokens plus fillers"
        )));
    }
    let regular: Vec<usize> = (FIRST_REGULAR..vocab).collect();
    let picked: Vec<usize> = regular.choose_multiple(rng, 4).copied().collect();
    let (a, b, a_prime, b_prime) = (picked[0], picked[1], picked[2], picked[3]);
    let fillers: Vec<usize> = regular
        .iter()
        .copied()
        .filter(|t| !picked.contains(t))
        .collect();
    let fill = |n: usize, out: &mut Vec<usize>, rng: &mut Rng| {
        for _ in 0..n {
            out.push(*fillers.choose(rng).unwrap());
        }
    };
    let prefix = rng.random_range(1..=3);
    let mut clean = vec![BOS];
    fill(prefix, &mut clean, rng);
    let a1 = clean.len();
    clean.push(a);
    clean.push(b);
    fill(distance - 2, &mut clean, rng);
    clean.push(a);
    let a2 = clean.len() - 1;
    let mut corrupt_b = clean.clone();
    corrupt_b[a1 + 1] = b_prime;
    let mut corrupt_a = clean.clone();
    corrupt_a[a1] = a_prime;
    Ok(InductionSample {
        clean,
        corrupt_b,
        corrupt_a,
        a,
        b,
        a_prime,
        b_prime,
        a1,
        b1: a1 + 1,
        a2,
        distance,
    })
}

const IOI_NAMES: [&str; 32] = [
    "Mary", "John", "Alice", "Bob", "Sarah", "Tom", "Emma", "James", "Lucy", "David", "Anna",
    "Paul", "Kate", "Mark", "Julia", "Peter", "Laura", "Steve", "Rachel", "Chris", "Helen",
    "Frank", "Diana", "George", "Nina", "Oscar", "Clara", "Victor", "Irene", "Henry", "Sophie",
    "Daniel",
];

const IOI_TEMPLATES: [&str; 8] = [
    "Then , {IO} and {S} went to the store . {S} gave a drink to",
    "When {IO} and {S} got a snack at the house , {S} decided to give it to",
    "After {IO} and {S} went to the park , {S} threw a ball to",
    "Yesterday {IO} and {S} had lunch at the cafe . {S} handed the bill to",
    "While {IO} and {S} were working at the office , {S} sent an email to",
    "Then , {IO} and {S} had a long talk . Afterwards {S} said goodbye to",
    "Later , {IO} and {S} found a book in the garden . {S} passed it to",
    "Once {IO} and {S} arrived at the station , {S} showed the ticket to",
];

/// Word-level vocabulary of the name-binding task.
#[derive(Debug)]
pub struct IoiVocab {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl IoiVocab {
    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn token(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Data(format!("`{word}` is not in the name-binding vocabulary")))
    }

    pub fn text(&self, id: usize) -> &str {
        self.words.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    /// Token ids of the name list.
    pub fn names(&self) -> std::ops::Range<usize> {
        FIRST_REGULAR..FIRST_REGULAR + IOI_NAMES.len()
    }

    pub fn templates(&self) -> usize {
        IOI_TEMPLATES.len()
    }
}

pub fn ioi_vocab() -> &'static IoiVocab {
    static V: OnceLock<IoiVocab> = OnceLock::new();
    V.get_or_init(|| {
        let mut words = vec!["<bos>".to_string(), "<eos>".to_string()];
        words.extend(IOI_NAMES.iter().map(|s| s.to_string()));
        for t in IOI_TEMPLATES {
            for w in t.split_whitespace() {
                if !w.starts_with('{') && !words.iter().any(|x| x == w) {
                    words.push(w.to_string());
                }
            }
        }
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        IoiVocab { words, index }
    })
}

/// One name-binding sentence and its `[IO′][S′]...[S′]` corruption.
#[derive(Debug, Clone, PartialEq)]
pub struct IoiSample {
    pub clean: Vec<usize>,
    pub corrupted: Vec<usize>,
    pub template: usize,
    pub io: usize,
    pub s: usize,
    pub io_prime: usize,
    pub s_prime: usize,
    pub io_pos: usize,
    pub s1_pos: usize,
    pub s2_pos: usize,
}

fn render(template: &str, io: usize, s: usize) -> Result<(Vec<usize>, usize, Vec<usize>)> {
    let v = ioi_vocab();
    let mut toks = vec![BOS];
    let mut io_pos = 0;
    let mut s_pos = Vec::new();
    for w in template.split_whitespace() {
        match w {
            "{IO}" => {
                io_pos = toks.len();
                toks.push(io);
            }
            "{S}" => {
                s_pos.push(toks.len());
                toks.push(s);
            }
            _ => toks.push(v.token(w)?),
        }
    }
    Ok((toks, io_pos, s_pos))
}

pub fn ioi_sample(rng: &mut Rng) -> Result<IoiSample> {
    let v = ioi_vocab();
    let names: Vec<usize> = v.names().collect();
    let picked: Vec<usize> = names.choose_multiple(rng, 4).copied().collect();
    let template = rng.random_range(0..IOI_TEMPLATES.len());
    let (clean, io_pos, s_pos) = render(IOI_TEMPLATES[template], picked[0], picked[1])?;
    let (corrupted, _, _) = render(IOI_TEMPLATES[template], picked[2], picked[3])?;
    Ok(IoiSample {
        clean,
        corrupted,
        template,
        io: picked[0],
        s: picked[1],
        io_prime: picked[2],
        s_prime: picked[3],
        io_pos,
        s1_pos: s_pos[0],
        s2_pos: s_pos[1],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    Induction,
    Ioi,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusParams {
    pub kind: CorpusKind,
    pub n_docs: usize,
    /// Ignored for IOI, which uses its own vocabulary.
    pub vocab: usize,
    /// Induction distance.
    pub distance: usize,
    /// Uniform document length range (inclusive), excluding bos/eos.
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        CorpusParams {
            kind: CorpusKind::Uniform,
            n_docs: 64,
            vocab: 64,
            distance: 16,
            min_len: 16,
            max_len: 64,
            seed: 0,
        }
    }
}

/// Generate a deterministic corpus. Every document starts with bos; uniform
/// documents also end with eos.
pub fn gen_token_corpus(p: &CorpusParams) -> Result<Vec<TokenDocument>> {
    let mut rng = rng::derived(p.seed, "corpus");
    let mut docs = Vec::with_capacity(p.n_docs);
    for id in 0..p.n_docs as u64 {
        let tokens = match p.kind {
            CorpusKind::Induction => induction_sample(&mut rng, p.vocab, p.distance)?.clean,
            CorpusKind::Ioi => ioi_sample(&mut rng)?.clean,
            CorpusKind::Uniform => {
                if p.vocab <= FIRST_REGULAR {
                    return Err(Error::Config(format!(
                        "vocab {} leaves no regular tokens",
                        p.vocab
                    )));
                }
                if p.min_len == 0 || p.min_len > p.max_len {
                    return Err(Error::Config("need 1 <= min_len <= max_len".into()));
                }
                let n = rng.random_range(p.min_len..=p.max_len);
                let mut t = vec![BOS];
                t.extend((0..n).map(|_| rng.random_range(FIRST_REGULAR..p.vocab)));
                t.push(EOS);
                t
            }
        };
        docs.push(TokenDocument::new(id, tokens)?);
    }
    Ok(docs)
}

/// One JSON array of token ids per line; document ids are line numbers.
pub fn write_corpus(path: &Path, docs: &[TokenDocument]) -> Result<()> {
    let mut buf = Vec::new();
    for d in docs {
        serde_json::to_writer(&mut buf, &d.tokens)?;
        buf.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    crate::io::write_atomic(path, &buf)
}

pub fn read_corpus(path: &Path, truncation: usize) -> Result<Vec<TokenDocument>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<usize> = serde_json::from_str(&line)?;
        let mut d = TokenDocument::new(i as u64, tokens)?;
        d.truncate(truncation);
        docs.push(d);
    }
    if docs.is_empty() {
        return Err(Error::Data(format!("corpus {} is empty", path.display())));
    }
    Ok(docs)
}

/// Shuffle helper shared with the buffer.
pub(crate) fn shuffle<T>(items: &mut [T], rng: &mut Rng) {
    items.shuffle(rng);
}
