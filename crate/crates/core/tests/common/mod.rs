#![allow(dead_code)]

use unilab::autointerp::{top_activating_samples, FeatureEvidence};
use unilab::harvest::corpus::TokenDocument;
use unilab::sae::FeatureRecords;

const WORDS: [&str; 12] = [
    "<bos>", "the", "cat", "sat", "on", "a", "mat", "(", ")", "return", "dog", "and",
];

pub fn word(t: usize) -> String {
    WORDS[t % WORDS.len()].to_string()
}

/// Twelve 30-token documents; feature 0 peaks once per document with
/// strength growing with the document id and a weaker echo one token later.
pub fn fixture_evidence() -> FeatureEvidence {
    let docs: Vec<TokenDocument> = (0..12u64)
        .map(|d| {
            let mut toks = vec![0];
            toks.extend((1..30).map(|p| 1 + (d as usize * 5 + p * 3) % 11));
            TokenDocument::new(d, toks).unwrap()
        })
        .collect();
    let mut rec = FeatureRecords::new(3);
    for d in &docs {
        let peak = 4 + (d.id as u32 * 2) % 20;
        for p in 1..30u32 {
            let v = if p == peak {
                0.5 + 0.25 * d.id as f64
            } else if p == peak + 1 {
                0.125
            } else {
                0.0
            };
            rec.push_dense(d.id, p, &[v, 0.0, 1.0]);
        }
    }
    top_activating_samples(0, 0, &rec, &docs, &word).unwrap()
}
