//! Corpus BLEU and the language-purity diagnostic.
//!
//! BLEU here is corpus-level with orders 1–4: modified n-gram precisions
//! (hypothesis counts clipped by reference counts), a brevity penalty
//! `exp(1 − ref/hyp)` when the hypotheses are shorter than the references,
//! and the geometric mean of the four precisions scaled to [0, 100].
//! Tokenization is whitespace on detokenized text. Smoothing, when on,
//! adds `k` to numerator and denominator of orders 2–4 only; order-1
//! precision is never smoothed.
//!
//! Language purity measures how much of a system output is in the intended
//! language: among output tokens that belong to exactly one language's
//! lexicon, the fraction belonging to the target language's. Tokens shared
//! between lexicons are ignored on both sides of the ratio.

use crate::corpus::{Origin, ParallelCorpus};
use crate::error::{Error, Result};
use crate::lang::LangId;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

const MAX_ORDER: usize = 4;

/// Smoothing policy for the higher-order precisions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Smoothing {
    /// Plain modified precisions; any zero precision zeroes the score.
    None,
    /// Add `k` to numerator and denominator of orders 2–4.
    AddK(f64),
}

/// Corpus BLEU with its parts.
#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    /// Score in [0, 100].
    pub bleu: f64,
    /// Modified precisions p1..p4.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "BLEU={:.2} p1={:.4} p2={:.4} p3={:.4} p4={:.4} BP={:.4} hyp_len={} ref_len={}",
            self.bleu,
            self.precisions[0],
            self.precisions[1],
            self.precisions[2],
            self.precisions[3],
            self.brevity_penalty,
            self.hyp_len,
            self.ref_len
        )
    }
}

/// Corpus BLEU over single-reference pairs.
pub fn bleu(hypotheses: &[String], references: &[String], smoothing: Smoothing) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::Input(format!(
            "bleu: {} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Input("bleu over an empty corpus".into()));
    }
    let mut matches = [0u64; MAX_ORDER];
    let mut totals = [0u64; MAX_ORDER];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        let h: Vec<&str> = hyp.split_whitespace().collect();
        let r: Vec<&str> = reference.split_whitespace().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            if h.len() < n {
                continue;
            }
            totals[n - 1] += (h.len() - n + 1) as u64;
            let mut ref_counts: HashMap<&[&str], u64> = HashMap::new();
            for gram in r.windows(n) {
                *ref_counts.entry(gram).or_insert(0) += 1;
            }
            let mut hyp_counts: HashMap<&[&str], u64> = HashMap::new();
            for gram in h.windows(n) {
                *hyp_counts.entry(gram).or_insert(0) += 1;
            }
            for (gram, count) in hyp_counts {
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matches[n - 1] += count.min(clip);
            }
        }
    }

    let mut precisions = [0f64; MAX_ORDER];
    for n in 0..MAX_ORDER {
        // Zero total means no n-grams of this order exist in any
        // hypothesis; no amount of smoothing can claim precision there.
        precisions[n] = if totals[n] == 0 {
            0.0
        } else {
            match smoothing {
                Smoothing::AddK(k) if n >= 1 => {
                    (matches[n] as f64 + k) / (totals[n] as f64 + k)
                }
                _ => matches[n] as f64 / totals[n] as f64,
            }
        };
    }

    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) || hyp_len == 0 {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuReport { bleu, precisions, brevity_penalty, hyp_len, ref_len })
}

/// Word sets per language, built from authentic training text only.
pub fn build_lexicons(corpora: &[ParallelCorpus]) -> BTreeMap<LangId, BTreeSet<String>> {
    let mut out: BTreeMap<LangId, BTreeSet<String>> = BTreeMap::new();
    for corpus in corpora {
        if corpus.origin != Origin::Authentic {
            continue;
        }
        let src = out.entry(corpus.src_lang.clone()).or_default();
        for s in corpus.sources() {
            src.extend(s.split_whitespace().map(str::to_owned));
        }
        let tgt = out.entry(corpus.tgt_lang.clone()).or_default();
        for t in corpus.targets() {
            tgt.extend(t.split_whitespace().map(str::to_owned));
        }
    }
    out
}

/// Fraction of language-exclusive tokens that belong to `lang`. Tokens in
/// several lexicons (or none) do not count on either side; if no token is
/// exclusive to any single language the purity is undefined.
pub fn language_purity(
    sentences: &[String],
    lang: &LangId,
    lexicons: &BTreeMap<LangId, BTreeSet<String>>,
) -> Option<f64> {
    let mut exclusive = 0u64;
    let mut in_lang = 0u64;
    for sentence in sentences {
        for token in sentence.split_whitespace() {
            let mut owner: Option<&LangId> = None;
            let mut shared = false;
            for (l, lex) in lexicons {
                if lex.contains(token) {
                    if owner.is_some() {
                        shared = true;
                        break;
                    }
                    owner = Some(l);
                }
            }
            if shared {
                continue;
            }
            if let Some(l) = owner {
                exclusive += 1;
                if l == lang {
                    in_lang += 1;
                }
            }
        }
    }
    if exclusive == 0 {
        None
    } else {
        Some(in_lang as f64 / exclusive as f64)
    }
}
