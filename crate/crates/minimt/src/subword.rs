//! Byte-pair-encoding subword vocabularies with target-forcing flags.
//!
//! One [`SubwordModel`] is learned jointly over the concatenation of all
//! languages, so every language shares a single dense vocabulary. The model
//! owns four fixed special tokens (`<pad>`, `<bos>`, `<eos>`, `<unk>`) plus
//! one flag token per registered language (`<it>`, `<en>`, ...). Flags are
//! reserved at construction and can never be produced by segmenting
//! ordinary text.
//!
//! Word-final pieces carry the suffix marker `</w>`, which makes
//! detokenization unambiguous: pieces are concatenated and a word ends
//! wherever the marker appears.

use crate::error::{Error, Result};
use crate::lang::LangId;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

/// Marker suffix on word-ending pieces.
pub const WORD_END: &str = "</w>";

const MERGES_HEADER: &str = "#bpe-v1";

/// A segmented sentence: subword strings and their vocabulary ids, parallel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePieces {
    pub tokens: Vec<String>,
    pub ids: Vec<u32>,
}

impl SentencePieces {
    pub fn empty() -> Self {
        SentencePieces { tokens: Vec::new(), ids: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Ordered merge table, dense vocabulary, and special-token registry.
#[derive(Clone, Debug)]
pub struct SubwordModel {
    merges: Vec<(String, String)>,
    merge_rank: HashMap<(String, String), usize>,
    vocab: Vec<String>,
    token_ids: HashMap<String, u32>,
    flags: BTreeMap<LangId, u32>,
}

impl SubwordModel {
    /// Learn `num_merges` greedy frequency-based merges over a corpus and
    /// register a flag token per language. Ties on pair frequency break
    /// lexicographically by (first, second).
    pub fn learn<'a>(
        corpus: impl IntoIterator<Item = &'a str>,
        num_merges: usize,
        langs: &[LangId],
    ) -> Result<SubwordModel> {
        // Word frequency table over the whitespace-normalized corpus.
        let mut word_freq: BTreeMap<Vec<String>, u64> = BTreeMap::new();
        let mut seen_any = false;
        for sentence in corpus {
            for word in sentence.split_whitespace() {
                seen_any = true;
                *word_freq.entry(word_symbols(word)).or_insert(0) += 1;
            }
        }
        if !seen_any {
            return Err(Error::Input("cannot learn BPE from an empty corpus".into()));
        }

        let chars: BTreeSet<String> =
            word_freq.keys().flat_map(|syms| syms.iter().cloned()).collect();

        let mut specials: Vec<String> =
            vec![PAD_TOKEN.into(), BOS_TOKEN.into(), EOS_TOKEN.into(), UNK_TOKEN.into()];
        let mut flag_langs: Vec<LangId> = langs.to_vec();
        flag_langs.sort();
        flag_langs.dedup();
        for lang in &flag_langs {
            specials.push(lang.flag_token());
        }
        let special_set: BTreeSet<&str> = specials.iter().map(String::as_str).collect();

        let mut words: Vec<(Vec<String>, u64)> = word_freq.into_iter().collect();
        let mut merges = Vec::with_capacity(num_merges);
        for _ in 0..num_merges {
            let Some(best) = best_pair(&words, &special_set) else { break };
            apply_merge_everywhere(&mut words, &best);
            merges.push(best);
        }

        // Dense ids: specials, then characters in sorted order, then merge
        // outputs in merge order. Identical output strings from different
        // merge paths collapse onto one id.
        let mut vocab: Vec<String> = Vec::new();
        let mut token_ids: HashMap<String, u32> = HashMap::new();
        let push = |tok: String, vocab: &mut Vec<String>, ids: &mut HashMap<String, u32>| {
            if !ids.contains_key(&tok) {
                ids.insert(tok.clone(), vocab.len() as u32);
                vocab.push(tok);
            }
        };
        for s in &specials {
            push(s.clone(), &mut vocab, &mut token_ids);
        }
        for c in &chars {
            push(c.clone(), &mut vocab, &mut token_ids);
        }
        for (a, b) in &merges {
            push(format!("{a}{b}"), &mut vocab, &mut token_ids);
        }

        let flags = flag_langs.iter().map(|l| (l.clone(), token_ids[&l.flag_token()])).collect();
        let merge_rank = merges.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        Ok(SubwordModel { merges, merge_rank, vocab, token_ids, flags })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn languages(&self) -> impl Iterator<Item = &LangId> {
        self.flags.keys()
    }

    pub fn has_language(&self, lang: &LangId) -> bool {
        self.flags.contains_key(lang)
    }

    pub fn flag_id(&self, lang: &LangId) -> Result<u32> {
        self.flags
            .get(lang)
            .copied()
            .ok_or_else(|| Error::Input(format!("language '{lang}' has no registered flag token")))
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.vocab
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::Input(format!("id {id} out of vocabulary ({})", self.vocab.len())))
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_ids.get(token).copied()
    }

    fn is_special_id(&self, id: u32) -> bool {
        id <= UNK_ID || self.flags.values().any(|&f| f == id)
    }

    /// Segment one sentence. Merges apply in priority order until no merge
    /// fits; pieces missing from the vocabulary map to `<unk>`.
    pub fn apply(&self, sentence: &str) -> SentencePieces {
        let mut out = SentencePieces::empty();
        for word in sentence.split_whitespace() {
            let mut syms = word_symbols(word);
            loop {
                let mut best: Option<(usize, usize)> = None; // (rank, position)
                for i in 0..syms.len().saturating_sub(1) {
                    let key = (syms[i].clone(), syms[i + 1].clone());
                    if let Some(&rank) = self.merge_rank.get(&key) {
                        if best.map_or(true, |(r, _)| rank < r) {
                            best = Some((rank, i));
                        }
                    }
                }
                let Some((rank, _)) = best else { break };
                let pair = self.merges[rank].clone();
                merge_in_word(&mut syms, &pair);
            }
            for sym in syms {
                let id = self.token_ids.get(&sym).copied().unwrap_or(UNK_ID);
                out.tokens.push(sym);
                out.ids.push(id);
            }
        }
        out
    }

    /// Prepend the target-language flag. Not idempotent by design: flagging
    /// twice yields two flags.
    pub fn prepend_flag(&self, pieces: &SentencePieces, target: &LangId) -> Result<SentencePieces> {
        let id = self.flag_id(target)?;
        let mut out = SentencePieces {
            tokens: Vec::with_capacity(pieces.len() + 1),
            ids: Vec::with_capacity(pieces.len() + 1),
        };
        out.tokens.push(target.flag_token());
        out.ids.push(id);
        out.tokens.extend(pieces.tokens.iter().cloned());
        out.ids.extend(pieces.ids.iter().copied());
        Ok(out)
    }

    /// Ids for a list of piece strings; unknown pieces map to `<unk>`.
    pub fn encode_pieces(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.token_ids.get(t).copied().unwrap_or(UNK_ID)).collect()
    }

    /// Piece strings for a list of ids. Out-of-range ids are an input error.
    pub fn decode_ids(&self, ids: &[u32]) -> Result<Vec<String>> {
        ids.iter().map(|&id| self.token(id).map(str::to_owned)).collect()
    }

    /// Render ids back into text: strips `<pad>`/`<bos>`/`<eos>`, joins
    /// pieces into words at the word-end marker, and leaves any other
    /// special token standing as a word of its own.
    pub fn decode_to_text(&self, ids: &[u32]) -> Result<String> {
        let mut words: Vec<String> = Vec::new();
        let mut current = String::new();
        for &id in ids {
            if id == PAD_ID || id == BOS_ID || id == EOS_ID {
                continue;
            }
            let tok = self.token(id)?;
            if self.is_special_id(id) {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
                words.push(tok.to_string());
            } else if let Some(stem) = tok.strip_suffix(WORD_END) {
                current.push_str(stem);
                words.push(std::mem::take(&mut current));
            } else {
                current.push_str(tok);
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
        Ok(words.join(" "))
    }

    // ── Persistence ─────────────────────────────────────────────────────

    /// Merge table as text: a version header, then one `left right` per
    /// line in priority order.
    pub fn merges_text(&self) -> String {
        let mut s = String::from(MERGES_HEADER);
        s.push('\n');
        for (a, b) in &self.merges {
            let _ = writeln!(s, "{a} {b}");
        }
        s
    }

    /// Vocabulary as text: `token<TAB>id` per line, id order.
    pub fn vocab_text(&self) -> String {
        let mut s = String::new();
        for (id, tok) in self.vocab.iter().enumerate() {
            let _ = writeln!(s, "{tok}\t{id}");
        }
        s
    }

    pub fn save(&self, merges_path: &Path, vocab_path: &Path) -> Result<()> {
        std::fs::write(merges_path, self.merges_text()).map_err(|e| Error::io(merges_path, e))?;
        std::fs::write(vocab_path, self.vocab_text()).map_err(|e| Error::io(vocab_path, e))?;
        Ok(())
    }

    pub fn load(merges_path: &Path, vocab_path: &Path) -> Result<SubwordModel> {
        let merges_src =
            std::fs::read_to_string(merges_path).map_err(|e| Error::io(merges_path, e))?;
        let vocab_src =
            std::fs::read_to_string(vocab_path).map_err(|e| Error::io(vocab_path, e))?;

        let mut lines = merges_src.lines();
        match lines.next() {
            Some(MERGES_HEADER) => {}
            other => {
                return Err(Error::Input(format!(
                    "merge table must start with '{MERGES_HEADER}', found {other:?}"
                )))
            }
        }
        let mut merges = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let (a, b) = line.split_once(' ').ok_or_else(|| {
                Error::Input(format!("merge line {} is not 'left right': {line:?}", ln + 2))
            })?;
            merges.push((a.to_string(), b.to_string()));
        }

        let mut entries: Vec<(u32, String)> = Vec::new();
        for (ln, line) in vocab_src.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| {
                Error::Input(format!("vocab line {} is not 'token\\tid'", ln + 1))
            })?;
            let id: u32 = id
                .parse()
                .map_err(|_| Error::Input(format!("vocab line {}: bad id {id:?}", ln + 1)))?;
            entries.push((id, tok.to_string()));
        }
        entries.sort_by_key(|(id, _)| *id);
        let mut vocab = Vec::with_capacity(entries.len());
        for (i, (id, tok)) in entries.into_iter().enumerate() {
            if id as usize != i {
                return Err(Error::Input(format!("vocabulary ids are not dense at id {id}")));
            }
            vocab.push(tok);
        }
        for (id, want) in
            [(PAD_ID, PAD_TOKEN), (BOS_ID, BOS_TOKEN), (EOS_ID, EOS_TOKEN), (UNK_ID, UNK_TOKEN)]
        {
            if vocab.get(id as usize).map(String::as_str) != Some(want) {
                return Err(Error::Input(format!("vocabulary id {id} must be {want}")));
            }
        }

        let token_ids: HashMap<String, u32> =
            vocab.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        // Flags are the contiguous run of <...> tokens right after the four
        // reserved specials.
        let mut flags = BTreeMap::new();
        for (i, tok) in vocab.iter().enumerate().skip(4) {
            if tok.len() > 2 && tok.starts_with('<') && tok.ends_with('>') && !tok.contains(' ') {
                flags.insert(LangId::new(&tok[1..tok.len() - 1]), i as u32);
            } else {
                break;
            }
        }
        let merge_rank = merges.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        Ok(SubwordModel { merges, merge_rank, vocab, token_ids, flags })
    }
}

/// A word as its initial symbol sequence: one symbol per character, the
/// last one carrying the word-end marker.
fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let n = chars.len();
    chars
        .into_iter()
        .enumerate()
        .map(|(i, c)| if i + 1 == n { format!("{c}{WORD_END}") } else { c.to_string() })
        .collect()
}

/// Highest-frequency pair over all words; ties break lexicographically.
/// Pairs whose merged form collides with a special token are skipped.
fn best_pair(words: &[(Vec<String>, u64)], specials: &BTreeSet<&str>) -> Option<(String, String)> {
    let mut counts: HashMap<(&str, &str), u64> = HashMap::new();
    for (syms, freq) in words {
        for pair in syms.windows(2) {
            *counts.entry((pair[0].as_str(), pair[1].as_str())).or_insert(0) += freq;
        }
    }
    counts
        .into_iter()
        .filter(|((a, b), _)| !specials.contains(format!("{a}{b}").as_str()))
        .max_by(|((a1, b1), c1), ((a2, b2), c2)| c1.cmp(c2).then_with(|| (a2, b2).cmp(&(a1, b1))))
        .map(|((a, b), _)| (a.to_string(), b.to_string()))
}

fn apply_merge_everywhere(words: &mut [(Vec<String>, u64)], pair: &(String, String)) {
    for (syms, _) in words.iter_mut() {
        merge_in_word(syms, pair);
    }
}

/// Replace every left-to-right occurrence of `pair` by its concatenation.
fn merge_in_word(syms: &mut Vec<String>, pair: &(String, String)) {
    let mut i = 0;
    while i + 1 < syms.len() {
        if syms[i] == pair.0 && syms[i + 1] == pair.1 {
            let merged = format!("{}{}", syms[i], syms[i + 1]);
            syms[i] = merged;
            syms.remove(i + 1);
        } else {
            i += 1;
        }
    }
}
