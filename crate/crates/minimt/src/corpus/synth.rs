//! Synthetic language triangles.
//!
//! A small context-free grammar over an abstract word alphabet generates
//! base sentences; each language renders them through a deterministic,
//! invertible transform. Because every transform is a bijection on base
//! sentences, the reference translation of any sentence into any other
//! language is computable exactly — BLEU on these corpora is a true score.
//!
//! The default triangle mirrors a pivot setup: language `p` is the identity
//! rendering, `b` marks every token with a suffix, and `c` rotates vowels.
//! The three surface lexicons are pairwise disjoint, which is what makes
//! wrong-language output measurable.

use super::{Origin, ParallelCorpus};
use crate::error::{Error, Result};
use crate::lang::LangId;
use crate::rng::Rng;
use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

const SPEC_HEADER: &str = "#synth-v1";

/// Character appended to every token by the suffix-marking transform.
pub const SUFFIX_MARK: char = 'z';

/// Per-language deterministic rendering of base sentences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    Identity,
    ReverseTokens,
    RotateVowels,
    SuffixMark,
}

impl Transform {
    pub fn name(&self) -> &'static str {
        match self {
            Transform::Identity => "identity",
            Transform::ReverseTokens => "reverse",
            Transform::RotateVowels => "rotate",
            Transform::SuffixMark => "suffix",
        }
    }

    pub fn parse(name: &str) -> Result<Transform> {
        match name {
            "identity" => Ok(Transform::Identity),
            "reverse" => Ok(Transform::ReverseTokens),
            "rotate" => Ok(Transform::RotateVowels),
            "suffix" => Ok(Transform::SuffixMark),
            other => Err(Error::Input(format!("unknown transform '{other}'"))),
        }
    }

    pub fn apply(&self, base: &[String]) -> Vec<String> {
        match self {
            Transform::Identity => base.to_vec(),
            Transform::ReverseTokens => base.iter().rev().cloned().collect(),
            Transform::RotateVowels => base.iter().map(|t| rotate_vowels(t, false)).collect(),
            Transform::SuffixMark => {
                base.iter().map(|t| format!("{t}{SUFFIX_MARK}")).collect()
            }
        }
    }

    /// Inverse rendering; fails on tokens outside the transform's image.
    pub fn invert(&self, surface: &[String]) -> Result<Vec<String>> {
        match self {
            Transform::Identity => Ok(surface.to_vec()),
            Transform::ReverseTokens => Ok(surface.iter().rev().cloned().collect()),
            Transform::RotateVowels => {
                Ok(surface.iter().map(|t| rotate_vowels(t, true)).collect())
            }
            Transform::SuffixMark => surface
                .iter()
                .map(|t| {
                    t.strip_suffix(SUFFIX_MARK).map(str::to_owned).ok_or_else(|| {
                        Error::Input(format!("token '{t}' lacks the suffix mark"))
                    })
                })
                .collect(),
        }
    }
}

fn rotate_vowels(token: &str, backward: bool) -> String {
    const FORWARD: [(char, char); 5] =
        [('a', 'e'), ('e', 'i'), ('i', 'o'), ('o', 'u'), ('u', 'a')];
    token
        .chars()
        .map(|c| {
            for &(from, to) in &FORWARD {
                if !backward && c == from {
                    return to;
                }
                if backward && c == to {
                    return from;
                }
            }
            c
        })
        .collect()
}

/// Small weighted context-free grammar over word classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grammar {
    pub start: String,
    /// Nonterminal → alternatives; listing an alternative twice doubles its
    /// sampling weight.
    pub rules: BTreeMap<String, Vec<Vec<String>>>,
    /// Terminal word class → word forms.
    pub lexicon: BTreeMap<String, Vec<String>>,
    pub min_len: usize,
    pub max_len: usize,
}

impl Grammar {
    /// Sample one base sentence with length in `[min_len, max_len]`.
    pub fn sample(&self, rng: &mut Rng) -> Result<Vec<String>> {
        for _ in 0..10_000 {
            if let Some(tokens) = self.expand_once(rng)? {
                if (self.min_len..=self.max_len).contains(&tokens.len()) {
                    return Ok(tokens);
                }
            }
        }
        Err(Error::Input(format!(
            "grammar cannot produce sentences of length {}..={}",
            self.min_len, self.max_len
        )))
    }

    fn expand_once(&self, rng: &mut Rng) -> Result<Option<Vec<String>>> {
        let mut stack = vec![self.start.clone()];
        let mut tokens = Vec::new();
        let mut steps = 0;
        while let Some(sym) = stack.pop() {
            steps += 1;
            if steps > 512 || tokens.len() > self.max_len {
                return Ok(None); // runaway expansion, reject this sample
            }
            if let Some(alternatives) = self.rules.get(&sym) {
                let alt = &alternatives[rng.below(alternatives.len())];
                for s in alt.iter().rev() {
                    stack.push(s.clone());
                }
            } else if let Some(words) = self.lexicon.get(&sym) {
                tokens.push(words[rng.below(words.len())].clone());
            } else {
                return Err(Error::Input(format!("grammar symbol '{sym}' is neither a rule nor a word class")));
            }
        }
        Ok(Some(tokens))
    }

    /// Every surface word a language's transform can produce.
    pub fn all_words(&self) -> impl Iterator<Item = &String> {
        self.lexicon.values().flatten()
    }
}

/// A grammar plus one transform per language.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticLanguageSpec {
    pub grammar: Grammar,
    pub langs: BTreeMap<LangId, Transform>,
}

impl SyntheticLanguageSpec {
    /// The default desk-scale triangle: pivot `p` (identity) and satellites
    /// `b` (suffix marking) and `c` (vowel rotation) over a 40-word
    /// alphabet, sentence lengths 3–12.
    pub fn default_triangle() -> Self {
        let mut rules = BTreeMap::new();
        rules.insert(
            "S".to_string(),
            vec![
                vec!["CL".to_string()],
                vec!["CL".to_string()],
                vec!["CL".to_string(), "C".to_string(), "CL".to_string()],
            ],
        );
        rules.insert("CL".to_string(), vec![vec!["NP".to_string(), "VP".to_string()]]);
        rules.insert(
            "NP".to_string(),
            vec![
                vec!["D".to_string(), "N".to_string()],
                vec!["D".to_string(), "A".to_string(), "N".to_string()],
                vec!["N".to_string()],
            ],
        );
        rules.insert(
            "VP".to_string(),
            vec![
                vec!["V".to_string()],
                vec!["V".to_string(), "NP".to_string()],
                vec!["V".to_string(), "NP".to_string(), "R".to_string()],
            ],
        );
        let mut lexicon = BTreeMap::new();
        let entry = |words: &[&str]| words.iter().map(|w| w.to_string()).collect::<Vec<_>>();
        lexicon.insert("D".to_string(), entry(&["ba", "de", "ki", "po"]));
        lexicon.insert(
            "A".to_string(),
            entry(&["lofa", "gemi", "ruta", "sabo", "niku", "pelo", "dima", "fusa"]),
        );
        lexicon.insert(
            "N".to_string(),
            entry(&[
                "tora", "miko", "sela", "bani", "rupo", "deka", "filo", "guma", "nipe", "sato",
                "kelu", "mora",
            ]),
        );
        lexicon.insert(
            "V".to_string(),
            entry(&[
                "pasa", "temi", "koru", "lima", "gefo", "nosa", "biru", "dale", "sumi", "reko",
            ]),
        );
        lexicon.insert("R".to_string(), entry(&["fana", "melo", "tiku", "gora"]));
        lexicon.insert("C".to_string(), entry(&["uto", "eki"]));

        let grammar =
            Grammar { start: "S".to_string(), rules, lexicon, min_len: 3, max_len: 12 };
        let mut langs = BTreeMap::new();
        langs.insert(LangId::new("p"), Transform::Identity);
        langs.insert(LangId::new("b"), Transform::SuffixMark);
        langs.insert(LangId::new("c"), Transform::RotateVowels);
        SyntheticLanguageSpec { grammar, langs }
    }

    pub fn transform(&self, lang: &LangId) -> Result<Transform> {
        self.langs
            .get(lang)
            .copied()
            .ok_or_else(|| Error::Input(format!("language '{lang}' is not in the synthetic spec")))
    }

    /// Render a base sentence in a language.
    pub fn render(&self, base: &[String], lang: &LangId) -> Result<String> {
        Ok(self.transform(lang)?.apply(base).join(" "))
    }

    /// Exact reference translation of surface text between two languages,
    /// composing the inverse of the source transform with the target one.
    pub fn translate_text(&self, text: &str, from: &LangId, to: &LangId) -> Result<String> {
        let tokens: Vec<String> = text.split_whitespace().map(str::to_owned).collect();
        let base = self.transform(from)?.invert(&tokens)?;
        self.render(&base, to)
    }

    /// The surface lexicon of one language (all transformable word forms).
    pub fn surface_lexicon(&self, lang: &LangId) -> Result<Vec<String>> {
        let t = self.transform(lang)?;
        let words: Vec<String> = self.grammar.all_words().cloned().collect();
        Ok(t.apply(&words))
    }

    /// Sample `n` distinct base sentences avoiding `exclude`.
    pub fn sample_bases(
        &self,
        n: usize,
        rng: &mut Rng,
        exclude: &HashSet<String>,
    ) -> Result<Vec<Vec<String>>> {
        let mut seen: HashSet<String> = HashSet::new();
        let mut bases = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while bases.len() < n {
            attempts += 1;
            if attempts > n.saturating_mul(1000).max(100_000) {
                return Err(Error::Input(format!(
                    "could not sample {n} distinct base sentences (grammar too small?)"
                )));
            }
            let base = self.grammar.sample(rng)?;
            let key = base.join(" ");
            if exclude.contains(&key) || !seen.insert(key) {
                continue;
            }
            bases.push(base);
        }
        Ok(bases)
    }

    /// Build one directional corpus by rendering bases in both languages.
    pub fn corpus_from_bases(
        &self,
        bases: &[Vec<String>],
        src: &LangId,
        tgt: &LangId,
        origin: Origin,
    ) -> Result<ParallelCorpus> {
        let pairs = bases
            .iter()
            .map(|b| Ok((self.render(b, src)?, self.render(b, tgt)?)))
            .collect::<Result<Vec<_>>>()?;
        ParallelCorpus::new(pairs, src.clone(), tgt.clone(), origin)
    }

    // ── Spec file format ────────────────────────────────────────────────

    pub fn to_text(&self) -> String {
        let mut s = String::from(SPEC_HEADER);
        s.push('\n');
        let _ = writeln!(s, "start {}", self.grammar.start);
        let _ = writeln!(s, "length {} {}", self.grammar.min_len, self.grammar.max_len);
        for (lang, t) in &self.langs {
            let _ = writeln!(s, "lang {lang} {}", t.name());
        }
        for (nt, alternatives) in &self.grammar.rules {
            for alt in alternatives {
                let _ = writeln!(s, "rule {nt} = {}", alt.join(" "));
            }
        }
        for (class, words) in &self.grammar.lexicon {
            let _ = writeln!(s, "words {class} = {}", words.join(" "));
        }
        s
    }

    pub fn parse(text: &str) -> Result<SyntheticLanguageSpec> {
        let mut lines = text.lines();
        match lines.next() {
            Some(SPEC_HEADER) => {}
            other => {
                return Err(Error::Input(format!(
                    "synthetic spec must start with '{SPEC_HEADER}', found {other:?}"
                )))
            }
        }
        let mut start = None;
        let mut min_len = 3usize;
        let mut max_len = 12usize;
        let mut langs = BTreeMap::new();
        let mut rules: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
        let mut lexicon: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (ln, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let keyword = parts.next().unwrap();
            let rest: Vec<&str> = parts.collect();
            let bad = |msg: &str| Error::Input(format!("spec line {}: {msg}", ln + 2));
            match keyword {
                "start" => start = Some(rest.first().ok_or_else(|| bad("missing symbol"))?.to_string()),
                "length" => {
                    if rest.len() != 2 {
                        return Err(bad("expected 'length MIN MAX'"));
                    }
                    min_len = rest[0].parse().map_err(|_| bad("bad min length"))?;
                    max_len = rest[1].parse().map_err(|_| bad("bad max length"))?;
                }
                "lang" => {
                    if rest.len() != 2 {
                        return Err(bad("expected 'lang ID TRANSFORM'"));
                    }
                    langs.insert(LangId::new(rest[0]), Transform::parse(rest[1])?);
                }
                "rule" => {
                    if rest.len() < 3 || rest[1] != "=" {
                        return Err(bad("expected 'rule NT = SYMBOLS...'"));
                    }
                    rules
                        .entry(rest[0].to_string())
                        .or_default()
                        .push(rest[2..].iter().map(|s| s.to_string()).collect());
                }
                "words" => {
                    if rest.len() < 3 || rest[1] != "=" {
                        return Err(bad("expected 'words CLASS = FORMS...'"));
                    }
                    lexicon
                        .entry(rest[0].to_string())
                        .or_default()
                        .extend(rest[2..].iter().map(|s| s.to_string()));
                }
                other => return Err(bad(&format!("unknown keyword '{other}'"))),
            }
        }
        let start = start.ok_or_else(|| Error::Input("spec missing 'start'".into()))?;
        if langs.is_empty() {
            return Err(Error::Input("spec declares no languages".into()));
        }
        Ok(SyntheticLanguageSpec {
            grammar: Grammar { start, rules, lexicon, min_len, max_len },
            langs,
        })
    }
}

/// Generate parallel corpora for the requested unordered pairs, both
/// directions each. With `share_base`, every pair renders the same base
/// sentences (mirroring the heavy pivot-side overlap of real multi-way
/// corpora); otherwise each pair gets a fresh sample.
pub fn generate_synthetic(
    spec: &SyntheticLanguageSpec,
    pairs: &[(LangId, LangId)],
    n_per_pair: usize,
    share_base: bool,
    seed: u64,
) -> Result<Vec<ParallelCorpus>> {
    if n_per_pair == 0 {
        return Err(Error::Input("n_per_pair must be at least 1".into()));
    }
    let mut rng = Rng::seed_from(seed);
    let empty = HashSet::new();
    let shared = if share_base {
        Some(spec.sample_bases(n_per_pair, &mut rng, &empty)?)
    } else {
        None
    };
    let mut out = Vec::with_capacity(pairs.len() * 2);
    for (x, y) in pairs {
        let fresh;
        let bases = match &shared {
            Some(b) => b,
            None => {
                fresh = spec.sample_bases(n_per_pair, &mut rng, &empty)?;
                &fresh
            }
        };
        let forward = spec.corpus_from_bases(bases, x, y, Origin::Authentic)?;
        out.push(forward.reversed());
        out.push(forward);
    }
    Ok(out)
}
