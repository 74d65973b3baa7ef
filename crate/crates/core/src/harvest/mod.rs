//! Activation harvesting.
//!
//! Forward passes over a corpus produce per-token vectors at one hook site;
//! bos/eos positions are dropped and the rest pass through a shuffle buffer
//! that fills completely, shuffles, then drains completely before refilling.

pub mod corpus;
pub mod synthetic;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{crc64, write_atomic, write_json};
use crate::models::{run_model, HookSite, Interventions, Model};
use crate::par;
use crate::rng::{self, Rng};
use corpus::{TokenDocument, BOS, EOS};

pub use synthetic::{gen_synthetic_pair, sample_codes, SparseCode, SyntheticFeatureModel, SyntheticPair};

pub const DEFAULT_BUFFER_CAPACITY: usize = 65536;

/// Fill-shuffle-drain buffer.
#[derive(Debug)]
pub struct ShuffleBuffer<T> {
    capacity: usize,
    rng: Rng,
    storage: Vec<T>,
}

impl<T> ShuffleBuffer<T> {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("shuffle buffer capacity must be positive".into()));
        }
        Ok(ShuffleBuffer {
            capacity,
            rng: rng::derived(seed, "shuffle-buffer"),
            storage: Vec::with_capacity(capacity.min(1 << 20)),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Insert one item; a full buffer is shuffled and drained into `out`.
    pub fn push(&mut self, item: T, out: &mut Vec<T>) {
        self.storage.push(item);
        if self.storage.len() == self.capacity {
            self.drain_into(out);
        }
    }

    /// Shuffle and drain whatever is left.
    pub fn finish(&mut self, out: &mut Vec<T>) {
        if !self.storage.is_empty() {
            self.drain_into(out);
        }
    }

    fn drain_into(&mut self, out: &mut Vec<T>) {
        corpus::shuffle(&mut self.storage, &mut self.rng);
        out.append(&mut self.storage);
    }
}

/// Token-major vectors at one site, each tagged with (document, position).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationStream {
    pub site: String,
    pub dim: usize,
    pub docs: Vec<u64>,
    pub positions: Vec<u32>,
    pub data: Vec<f64>,
}

impl ActivationStream {
    pub fn new(site: impl Into<String>, dim: usize) -> Self {
        ActivationStream {
            site: site.into(),
            dim,
            docs: Vec::new(),
            positions: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, doc: u64, position: u32, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Shape(format!(
                "stream {} has dim {}, vector has {}",
                self.site,
                self.dim,
                v.len()
            )));
        }
        self.docs.push(doc);
        self.positions.push(position);
        self.data.extend_from_slice(v);
        Ok(())
    }

    /// First `n` records.
    pub fn head(&self, n: usize) -> ActivationStream {
        let n = n.min(self.len());
        ActivationStream {
            site: self.site.clone(),
            dim: self.dim,
            docs: self.docs[..n].to_vec(),
            positions: self.positions[..n].to_vec(),
            data: self.data[..n * self.dim].to_vec(),
        }
    }

    /// Records `range` as a new stream.
    pub fn slice(&self, range: std::ops::Range<usize>) -> ActivationStream {
        ActivationStream {
            site: self.site.clone(),
            dim: self.dim,
            docs: self.docs[range.clone()].to_vec(),
            positions: self.positions[range.clone()].to_vec(),
            data: self.data[range.start * self.dim..range.end * self.dim].to_vec(),
        }
    }
}

struct Record {
    doc: u64,
    pos: u32,
    v: Vec<f64>,
}

/// Forward every document, capture `site`, drop bos/eos positions and route
/// the rest through `buffer`. Documents are truncated to `truncation` tokens.
pub fn collect_activations(
    model: &Model,
    docs: &[TokenDocument],
    site: HookSite,
    buffer: &mut ShuffleBuffer<(u64, u32, Vec<f64>)>,
    truncation: usize,
) -> Result<ActivationStream> {
    if docs.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let dim = model.site_dim(site)?;
    let capture: BTreeSet<HookSite> = [site].into_iter().collect();
    let none = Interventions::default();
    let per_doc = par::map(docs, |d| -> Result<Vec<Record>> {
        let toks = &d.tokens[..d.tokens.len().min(truncation.max(1))];
        let trace = run_model(model, toks, &capture, &none)?;
        let t = trace.get(site)?;
        Ok(toks
            .iter()
            .enumerate()
            .filter(|(_, &tok)| tok != BOS && tok != EOS)
            .map(|(i, _)| Record {
                doc: d.id,
                pos: i as u32,
                v: t.row(i).to_vec(),
            })
            .collect())
    });
    let mut shuffled = Vec::new();
    for recs in per_doc {
        for r in recs? {
            buffer.push((r.doc, r.pos, r.v), &mut shuffled);
        }
    }
    buffer.finish(&mut shuffled);
    let mut out = ActivationStream::new(site.to_string(), dim);
    for (doc, pos, v) in shuffled {
        out.push(doc, pos, &v)?;
    }
    if out.is_empty() {
        return Err(Error::Data("corpus produced no non-bos/eos positions".into()));
    }
    Ok(out)
}

/// Corpus-order harvest of several sites in one pass per document. Rows of
/// all returned streams are aligned by index.
pub fn collect_aligned(
    model: &Model,
    docs: &[TokenDocument],
    sites: &[HookSite],
    truncation: usize,
) -> Result<Vec<ActivationStream>> {
    if docs.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let dims = sites
        .iter()
        .map(|s| model.site_dim(*s))
        .collect::<Result<Vec<_>>>()?;
    let capture: BTreeSet<HookSite> = sites.iter().copied().collect();
    let none = Interventions::default();
    let cut = |d: &TokenDocument| d.tokens.len().min(truncation.max(1));
    let per_doc = par::map(docs, |d| run_model(model, &d.tokens[..cut(d)], &capture, &none));
    let mut out: Vec<ActivationStream> = sites
        .iter()
        .zip(&dims)
        .map(|(s, &d)| ActivationStream::new(s.to_string(), d))
        .collect();
    for (d, r) in docs.iter().zip(per_doc) {
        let trace = r?;
        let toks = &d.tokens[..cut(d)];
        for (s, stream) in sites.iter().zip(out.iter_mut()) {
            let t = trace.get(*s)?;
            for (i, &tok) in toks.iter().enumerate() {
                if tok != BOS && tok != EOS {
                    stream.push(d.id, i as u32, t.row(i))?;
                }
            }
        }
    }
    if out.first().is_some_and(|s| s.is_empty()) {
        return Err(Error::Data("corpus produced no non-bos/eos positions".into()));
    }
    Ok(out)
}

pub const SHARD_MAGIC: &[u8; 8] = b"ULABACT1";

/// Sidecar describing an activation shard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardMeta {
    pub site: String,
    pub dim: usize,
    pub count: usize,
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Fixed-size records `(u64 doc, u32 position, dim × f64)` after a 24-byte
/// header (magic, dim, count) and before a CRC-64 trailer.
pub fn write_stream(path: &Path, stream: &ActivationStream, seed: u64, config_hash: &str) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + stream.len() * (12 + 8 * stream.dim) + 8);
    buf.extend_from_slice(SHARD_MAGIC);
    buf.extend_from_slice(&(stream.dim as u64).to_le_bytes());
    buf.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    for i in 0..stream.len() {
        buf.extend_from_slice(&stream.docs[i].to_le_bytes());
        buf.extend_from_slice(&stream.positions[i].to_le_bytes());
        for v in stream.row(i) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc64(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    write_atomic(path, &buf)?;
    write_json(
        &sidecar_path(path),
        &ShardMeta {
            site: stream.site.clone(),
            dim: stream.dim,
            count: stream.len(),
            seed,
            config_hash: config_hash.to_string(),
            version: crate::ARTIFACT_VERSION.to_string(),
        },
    )
}

pub fn read_stream(path: &Path) -> Result<(ActivationStream, ShardMeta)> {
    let meta: ShardMeta = crate::io::read_json(&sidecar_path(path))?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: String| Error::Checksum {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 32 {
        return Err(bad("shard too short".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    if crc64(body) != u64::from_le_bytes(trailer.try_into().unwrap()) {
        return Err(bad("crc64 mismatch".into()));
    }
    if &body[..8] != SHARD_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: "not an activation shard".into(),
        });
    }
    let dim = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(body[16..24].try_into().unwrap()) as usize;
    let rec = 12 + 8 * dim;
    if body.len() != 24 + count * rec || dim != meta.dim || count != meta.count {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: "record count or dim disagrees with header/sidecar".into(),
        });
    }
    let mut s = ActivationStream::new(meta.site.clone(), dim);
    s.docs.reserve(count);
    s.data.reserve(count * dim);
    for r in body[24..].chunks_exact(rec) {
        s.docs.push(u64::from_le_bytes(r[..8].try_into().unwrap()));
        s.positions.push(u32::from_le_bytes(r[8..12].try_into().unwrap()));
        s.data.extend(
            r[12..]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap())),
        );
    }
    Ok((s, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{random_mamba, HookKind, RandomModelConfig};
    use proptest::prelude::*;

    fn small_model() -> Model {
        random_mamba(&RandomModelConfig {
            vocab: 16,
            d_model: 8,
            n_layers: 2,
            d_state: 4,
            ..Default::default()
        })
        .unwrap()
    }

    fn corpus() -> Vec<TokenDocument> {
        corpus::gen_token_corpus(&corpus::CorpusParams {
            n_docs: 6,
            vocab: 16,
            min_len: 3,
            max_len: 9,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn capacity_one_preserves_order() {
        let mut b = ShuffleBuffer::new(1, 5).unwrap();
        let mut out = Vec::new();
        for i in 0..20 {
            b.push(i, &mut out);
        }
        b.finish(&mut out);
        assert_eq!(out, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn buffer_emits_only_on_full_cycles() {
        let mut b = ShuffleBuffer::new(4, 1).unwrap();
        let mut out = Vec::new();
        for i in 0..3 {
            b.push(i, &mut out);
            assert!(out.is_empty());
        }
        b.push(3, &mut out);
        assert_eq!(out.len(), 4);
    }

    proptest! {
        #[test]
        fn buffer_is_a_permutation(cap in 1usize..50, n in 0usize..300, seed in any::<u64>()) {
            let mut b = ShuffleBuffer::new(cap, seed).unwrap();
            let mut out = Vec::new();
            for i in 0..n {
                b.push(i, &mut out);
            }
            b.finish(&mut out);
            let mut sorted = out.clone();
            sorted.sort();
            prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn collection_drops_bos_eos_and_conserves_vectors() {
        let m = small_model();
        let docs = corpus();
        let site = HookSite::new(1, HookKind::ResidualPostBlock);
        let mut b1 = ShuffleBuffer::new(1, 0).unwrap();
        let ordered = collect_activations(&m, &docs, site, &mut b1, 1024).unwrap();
        let expected: usize = docs.iter().map(|d| d.tokens.len() - 2).sum();
        assert_eq!(ordered.len(), expected);
        for i in 0..ordered.len() {
            let d = &docs[ordered.docs[i] as usize];
            let tok = d.tokens[ordered.positions[i] as usize];
            assert!(tok != BOS && tok != EOS);
        }

        let mut b = ShuffleBuffer::new(7, 42).unwrap();
        let shuffled = collect_activations(&m, &docs, site, &mut b, 1024).unwrap();
        let key = |s: &ActivationStream| {
            let mut v: Vec<(u64, u32, Vec<u64>)> = (0..s.len())
                .map(|i| {
                    (s.docs[i], s.positions[i], s.row(i).iter().map(|x| x.to_bits()).collect())
                })
                .collect();
            v.sort();
            v
        };
        assert_eq!(key(&ordered), key(&shuffled));
        assert_ne!(ordered.docs, shuffled.docs);

        let mut b2 = ShuffleBuffer::new(7, 42).unwrap();
        assert_eq!(shuffled, collect_activations(&m, &docs, site, &mut b2, 1024).unwrap());
    }

    #[test]
    fn empty_corpus_and_bad_site_fail() {
        let m = small_model();
        let mut b = ShuffleBuffer::new(4, 0).unwrap();
        let site = HookSite::new(0, HookKind::ResidualPostBlock);
        assert!(matches!(
            collect_activations(&m, &[], site, &mut b, 1024),
            Err(Error::Data(_))
        ));
        let bad = HookSite::new(0, HookKind::MlpNeuronPostActivation);
        assert!(collect_activations(&m, &corpus(), bad, &mut b, 1024).is_err());
    }

    #[test]
    fn shard_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        let mut s = ActivationStream::new("layer0.residual_post_block", 3);
        for i in 0..5 {
            s.push(i, i as u32 + 1, &[i as f64, -1.5, 0.25]).unwrap();
        }
        write_stream(&path, &s, 9, "abc").unwrap();
        let (back, meta) = read_stream(&path).unwrap();
        assert_eq!(back, s);
        assert_eq!(meta.count, 5);
        assert_eq!(meta.seed, 9);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[40] ^= 1;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_stream(&path), Err(Error::Checksum { .. })));
    }
}
