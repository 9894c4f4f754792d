//! Minimal-pair agreement evaluation.

use super::{Batch, LmParams};
use crate::corpus::{MinimalPair, Vocabulary, BOS, UNK};
use crate::error::{invalid, Result};

fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let z: f64 = logits.iter().map(|&x| (x as f64 - max).exp()).sum();
    let lz = z.ln() + max;
    logits.iter().map(|&x| x as f64 - lz).collect()
}

/// Word pieces of `word`, rejecting words the vocabulary cannot segment.
fn pieces(vocab: &Vocabulary, word: &str) -> Result<Vec<u32>> {
    vocab
        .segment(word)
        .filter(|p| !p.contains(&UNK))
        .ok_or_else(|| invalid(format!("continuation {word:?} is out of vocabulary")))
}

fn prefix_ids(vocab: &Vocabulary, prefix: &[String]) -> Vec<u32> {
    let mut ids = vec![BOS];
    for w in prefix {
        ids.extend(vocab.tokenize_word(w));
    }
    ids
}

/// Log-probabilities of each candidate word after `prefix`. A word's score
/// sums its piece log-probabilities and adds the log-probability that no
/// further suffix piece follows, so a bare stem does not win by being short.
pub fn word_logprob(params: &LmParams, vocab: &Vocabulary, prefix: &[String], words: &[&str]) -> Result<Vec<f64>> {
    let base = prefix_ids(vocab, prefix);
    let mut seqs = Vec::with_capacity(words.len());
    let mut spans = Vec::with_capacity(words.len());
    for w in words {
        let p = pieces(vocab, w)?;
        let mut ids = base.clone();
        ids.extend(&p);
        spans.push(p.len());
        seqs.push(ids);
    }
    let trace = params.forward_batch(&Batch::new(&seqs)?, None)?;
    let suffix: Vec<bool> = (0..vocab.len() as u32).map(|id| vocab.is_suffix(id)).collect();
    let mut out = Vec::with_capacity(words.len());
    for (b, ids) in seqs.iter().enumerate() {
        let start = base.len();
        let mut lp = 0.0;
        for k in 0..spans[b] {
            let ls = log_softmax(trace.logits_at(b, start + k - 1));
            lp += ls[ids[start + k] as usize];
        }
        let ls = log_softmax(trace.logits_at(b, ids.len() - 1));
        let p_suffix: f64 = ls.iter().zip(&suffix).filter(|(_, &s)| s).map(|(l, _)| l.exp()).sum();
        lp += (1.0 - p_suffix).max(1e-300).ln();
        out.push(lp);
    }
    Ok(out)
}

/// Whether the model prefers the correct continuation on each side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairOutcome {
    pub sides: [bool; 2],
}

impl PairOutcome {
    pub fn both(&self) -> bool {
        self.sides[0] && self.sides[1]
    }
}

pub fn pair_outcomes(params: &LmParams, vocab: &Vocabulary, pairs: &[MinimalPair]) -> Result<Vec<PairOutcome>> {
    pairs
        .iter()
        .map(|p| {
            let words = [p.continuations[0].as_str(), p.continuations[1].as_str()];
            let mut sides = [false; 2];
            for (side, ok) in sides.iter_mut().enumerate() {
                let lp = word_logprob(params, vocab, &p.prefixes[side], &words)?;
                *ok = lp[side] > lp[1 - side];
            }
            Ok(PairOutcome { sides })
        })
        .collect()
}

/// Fraction of pairs where the correct continuation wins on both sides.
pub fn minimal_pair_accuracy(params: &LmParams, vocab: &Vocabulary, pairs: &[MinimalPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(invalid("no minimal pairs"));
    }
    let outcomes = pair_outcomes(params, vocab, pairs)?;
    Ok(outcomes.iter().filter(|o| o.both()).count() as f64 / pairs.len() as f64)
}
