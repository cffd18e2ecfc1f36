//! Parallel corpora, multilingual mixing, and batching.
//!
//! A [`ParallelCorpus`] is a directional list of aligned sentence pairs
//! tagged with its language pair and its origin (authentic data or
//! synthetic translations from a given self-training round). Mixing turns a
//! set of corpora into a [`TrainingSet`]: every pair is BPE-encoded, the
//! source is prefixed with the target-language flag, and the union is
//! shuffled by seed. Batching partitions a training set into padded id
//! matrices either by segment count or by token budget.
//!
//! Corpus files are plain text, one sentence per line, UTF-8 with LF line
//! endings, named `<name>.<src>-<tgt>.<side>` (e.g. `train.it-en.it`).

pub mod synth;

use crate::error::{Error, Result};
use crate::lang::LangId;
use crate::rng::Rng;
use crate::subword::{SubwordModel, BOS_ID, EOS_ID, PAD_ID};
use std::collections::HashSet;
use std::path::Path;

/// Hard cap on encoded sentence length; longer examples are dropped and
/// counted during mixing.
pub const MAX_SENTENCE_SUBWORDS: usize = 64;

/// Where a corpus came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Authentic,
    Synthetic { round: u32 },
}

/// Aligned sentence pairs for one translation direction.
#[derive(Clone, Debug)]
pub struct ParallelCorpus {
    pub pairs: Vec<(String, String)>,
    pub src_lang: LangId,
    pub tgt_lang: LangId,
    pub origin: Origin,
}

impl ParallelCorpus {
    pub fn new(
        pairs: Vec<(String, String)>,
        src_lang: LangId,
        tgt_lang: LangId,
        origin: Origin,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Input(format!("empty corpus for {src_lang}-{tgt_lang}")));
        }
        for (i, (s, t)) in pairs.iter().enumerate() {
            // A weak model can legitimately infer an empty translation, so
            // synthetic corpora may carry empty source sides (they encode
            // as a bare flag+EOS); authentic data may not, and no target
            // side ever may.
            let src_empty_ok = matches!(origin, Origin::Synthetic { .. });
            if (s.trim().is_empty() && !src_empty_ok) || t.trim().is_empty() {
                return Err(Error::Input(format!(
                    "empty sentence at pair {i} of {src_lang}-{tgt_lang}"
                )));
            }
        }
        Ok(ParallelCorpus { pairs, src_lang, tgt_lang, origin })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The same pairs facing the other way.
    pub fn reversed(&self) -> ParallelCorpus {
        ParallelCorpus {
            pairs: self.pairs.iter().map(|(s, t)| (t.clone(), s.clone())).collect(),
            src_lang: self.tgt_lang.clone(),
            tgt_lang: self.src_lang.clone(),
            origin: self.origin,
        }
    }

    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|(s, _)| s.as_str())
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|(_, t)| t.as_str())
    }
}

/// Deduplicated single-language sentences drawn from training-side text.
#[derive(Clone, Debug)]
pub struct MonolingualSet {
    pub sentences: Vec<String>,
    pub lang: LangId,
}

impl MonolingualSet {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn truncated(mut self, cap: usize) -> Self {
        self.sentences.truncate(cap);
        self
    }
}

/// One encoded training example.
#[derive(Clone, Debug)]
pub struct Example {
    pub src_text: String,
    pub tgt_text: String,
    /// `[flag, pieces..., EOS]`
    pub src_ids: Vec<u32>,
    /// `[BOS, pieces..., EOS]`
    pub tgt_ids: Vec<u32>,
    pub src_lang: LangId,
    pub tgt_lang: LangId,
    pub origin: Origin,
}

impl Example {
    /// Length that counts against a token budget.
    pub fn cost_len(&self) -> usize {
        self.src_ids.len().max(self.tgt_ids.len())
    }
}

/// A flag-prefixed, shuffled multilingual mixture.
#[derive(Clone, Debug, Default)]
pub struct TrainingSet {
    pub examples: Vec<Example>,
    /// Examples dropped for exceeding [`MAX_SENTENCE_SUBWORDS`].
    pub dropped_too_long: usize,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn batches(&self, mode: BatchMode) -> Result<Vec<Batch>> {
        let refs: Vec<&Example> = self.examples.iter().collect();
        make_batches(&refs, mode)
    }
}

/// Padded id matrices for one training step.
#[derive(Clone, Debug)]
pub struct Batch {
    pub rows: usize,
    pub src_cols: usize,
    pub tgt_cols: usize,
    src: Vec<u32>,
    tgt: Vec<u32>,
    pub src_len: Vec<usize>,
    pub tgt_len: Vec<usize>,
}

impl Batch {
    pub fn from_examples(examples: &[&Example]) -> Result<Batch> {
        if examples.is_empty() {
            return Err(Error::Contract("batch of zero examples".into()));
        }
        let rows = examples.len();
        let src_cols = examples.iter().map(|e| e.src_ids.len()).max().unwrap();
        let tgt_cols = examples.iter().map(|e| e.tgt_ids.len()).max().unwrap();
        let mut src = vec![PAD_ID; rows * src_cols];
        let mut tgt = vec![PAD_ID; rows * tgt_cols];
        let mut src_len = Vec::with_capacity(rows);
        let mut tgt_len = Vec::with_capacity(rows);
        for (r, e) in examples.iter().enumerate() {
            src[r * src_cols..r * src_cols + e.src_ids.len()].copy_from_slice(&e.src_ids);
            tgt[r * tgt_cols..r * tgt_cols + e.tgt_ids.len()].copy_from_slice(&e.tgt_ids);
            src_len.push(e.src_ids.len());
            tgt_len.push(e.tgt_ids.len());
        }
        Ok(Batch { rows, src_cols, tgt_cols, src, tgt, src_len, tgt_len })
    }

    /// Build a batch directly from raw id rows (`src` rows must already
    /// carry their flag and EOS, `tgt` rows their BOS and EOS).
    pub fn from_rows(src_rows: &[Vec<u32>], tgt_rows: &[Vec<u32>]) -> Result<Batch> {
        if src_rows.is_empty() || src_rows.len() != tgt_rows.len() {
            return Err(Error::Contract(format!(
                "from_rows: {} source rows vs {} target rows",
                src_rows.len(),
                tgt_rows.len()
            )));
        }
        let rows = src_rows.len();
        let src_cols = src_rows.iter().map(Vec::len).max().unwrap();
        let tgt_cols = tgt_rows.iter().map(Vec::len).max().unwrap();
        let mut src = vec![PAD_ID; rows * src_cols];
        let mut tgt = vec![PAD_ID; rows * tgt_cols];
        for r in 0..rows {
            src[r * src_cols..r * src_cols + src_rows[r].len()].copy_from_slice(&src_rows[r]);
            tgt[r * tgt_cols..r * tgt_cols + tgt_rows[r].len()].copy_from_slice(&tgt_rows[r]);
        }
        Ok(Batch {
            rows,
            src_cols,
            tgt_cols,
            src,
            tgt,
            src_len: src_rows.iter().map(Vec::len).collect(),
            tgt_len: tgt_rows.iter().map(Vec::len).collect(),
        })
    }

    pub fn src_row(&self, r: usize) -> &[u32] {
        &self.src[r * self.src_cols..(r + 1) * self.src_cols]
    }

    pub fn tgt_row(&self, r: usize) -> &[u32] {
        &self.tgt[r * self.tgt_cols..(r + 1) * self.tgt_cols]
    }

    pub fn src_flat(&self) -> &[u32] {
        &self.src
    }

    pub fn tgt_flat(&self) -> &[u32] {
        &self.tgt
    }

    /// Non-padding target tokens (the supervision signal size).
    pub fn target_tokens(&self) -> usize {
        self.tgt_len.iter().map(|l| l - 1).sum()
    }
}

/// Batch partitioning policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    /// Exactly `n` rows per batch; the last batch may be short.
    Segments(usize),
    /// Greedy fill of length-sorted examples with `rows × max_len ≤ n`.
    Tokens(usize),
}

// ── Operations ──────────────────────────────────────────────────────────

/// Load a directional corpus from two aligned files.
pub fn load_parallel(
    src_path: &Path,
    tgt_path: &Path,
    src_lang: LangId,
    tgt_lang: LangId,
) -> Result<ParallelCorpus> {
    let src_lines = read_lines(src_path)?;
    let tgt_lines = read_lines(tgt_path)?;
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::Alignment { left: src_lines.len(), right: tgt_lines.len() });
    }
    let pairs = src_lines.into_iter().zip(tgt_lines).collect();
    ParallelCorpus::new(pairs, src_lang, tgt_lang, Origin::Authentic)
}

/// Read one-sentence-per-line UTF-8 text, whitespace-normalized.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        if raw.is_empty() && i > 0 {
            // allow a trailing newline; interior empties are caught below
            continue;
        }
        let line = std::str::from_utf8(raw)
            .map_err(|_| Error::Encoding { path: path.to_path_buf(), line: i + 1 })?;
        out.push(normalize_whitespace(line));
    }
    Ok(out)
}

/// Write sentences one per line with LF endings.
pub fn write_lines(path: &Path, sentences: &[String]) -> Result<()> {
    let mut text = String::with_capacity(sentences.iter().map(|s| s.len() + 1).sum());
    for s in sentences {
        text.push_str(s);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Standard corpus file name: `<name>.<src>-<tgt>.<side>`.
pub fn corpus_file_name(name: &str, src: &LangId, tgt: &LangId, side: &LangId) -> String {
    format!("{name}.{src}-{tgt}.{side}")
}

/// Save both sides of a corpus under `dir` using the standard naming.
pub fn save_parallel(dir: &Path, name: &str, corpus: &ParallelCorpus) -> Result<()> {
    let src_file = dir.join(corpus_file_name(name, &corpus.src_lang, &corpus.tgt_lang, &corpus.src_lang));
    let tgt_file = dir.join(corpus_file_name(name, &corpus.src_lang, &corpus.tgt_lang, &corpus.tgt_lang));
    let sources: Vec<String> = corpus.sources().map(str::to_owned).collect();
    let targets: Vec<String> = corpus.targets().map(str::to_owned).collect();
    write_lines(&src_file, &sources)?;
    write_lines(&tgt_file, &targets)
}

pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Encode and flag every pair of every corpus, then shuffle by seed.
///
/// Each corpus contributes its own direction only; callers wanting both
/// directions of a pair pass two corpora (one per direction). Examples
/// longer than [`MAX_SENTENCE_SUBWORDS`] on either side are dropped and
/// counted.
pub fn mix_multilingual(
    corpora: &[ParallelCorpus],
    model: &SubwordModel,
    seed: u64,
) -> Result<TrainingSet> {
    let mut examples = Vec::new();
    let mut dropped = 0usize;
    for corpus in corpora {
        for lang in [&corpus.src_lang, &corpus.tgt_lang] {
            if !model.has_language(lang) {
                return Err(Error::Input(format!(
                    "language '{lang}' is not registered in the subword model"
                )));
            }
        }
        let flag = model.flag_id(&corpus.tgt_lang)?;
        for (src_text, tgt_text) in &corpus.pairs {
            let src_pieces = model.apply(src_text);
            let tgt_pieces = model.apply(tgt_text);
            if src_pieces.len() + 2 > MAX_SENTENCE_SUBWORDS
                || tgt_pieces.len() + 2 > MAX_SENTENCE_SUBWORDS
            {
                dropped += 1;
                continue;
            }
            let mut src_ids = Vec::with_capacity(src_pieces.len() + 2);
            src_ids.push(flag);
            src_ids.extend(&src_pieces.ids);
            src_ids.push(EOS_ID);
            let mut tgt_ids = Vec::with_capacity(tgt_pieces.len() + 2);
            tgt_ids.push(BOS_ID);
            tgt_ids.extend(&tgt_pieces.ids);
            tgt_ids.push(EOS_ID);
            examples.push(Example {
                src_text: src_text.clone(),
                tgt_text: tgt_text.clone(),
                src_ids,
                tgt_ids,
                src_lang: corpus.src_lang.clone(),
                tgt_lang: corpus.tgt_lang.clone(),
                origin: corpus.origin,
            });
        }
    }
    let mut rng = Rng::seed_from(seed);
    rng.shuffle(&mut examples);
    Ok(TrainingSet { examples, dropped_too_long: dropped })
}

/// Partition examples into batches. Every example appears in exactly one
/// batch. Segments mode preserves the given order; tokens mode sorts by
/// cost length (stable) and fills greedily under `rows × max_len ≤ budget`.
pub fn make_batches(examples: &[&Example], mode: BatchMode) -> Result<Vec<Batch>> {
    match mode {
        BatchMode::Segments(n) => {
            if n == 0 {
                return Err(Error::Config("segments batch size must be positive".into()));
            }
            examples.chunks(n).map(Batch::from_examples).collect()
        }
        BatchMode::Tokens(budget) => {
            if budget == 0 {
                return Err(Error::Config("token budget must be positive".into()));
            }
            let mut order: Vec<usize> = (0..examples.len()).collect();
            order.sort_by_key(|&i| examples[i].cost_len());
            let mut batches = Vec::new();
            let mut current: Vec<&Example> = Vec::new();
            let mut max_len = 0usize;
            for &i in &order {
                let e = examples[i];
                let len = e.cost_len();
                if len > budget {
                    return Err(Error::Input(format!(
                        "sentence longer than the token budget ({len} > {budget}): {:?}",
                        e.src_text
                    )));
                }
                let new_max = max_len.max(len);
                if !current.is_empty() && (current.len() + 1) * new_max > budget {
                    batches.push(Batch::from_examples(&current)?);
                    current.clear();
                    max_len = 0;
                }
                max_len = max_len.max(len);
                current.push(e);
            }
            if !current.is_empty() {
                batches.push(Batch::from_examples(&current)?);
            }
            Ok(batches)
        }
    }
}

/// All sentences of `lang` from any side of any authentic corpus,
/// deduplicated, original order preserved.
pub fn extract_monolingual(corpora: &[ParallelCorpus], lang: &LangId) -> Result<MonolingualSet> {
    let mut seen = HashSet::new();
    let mut sentences = Vec::new();
    let mut lang_present = false;
    for corpus in corpora {
        if corpus.origin != Origin::Authentic {
            continue;
        }
        if &corpus.src_lang == lang {
            lang_present = true;
            for s in corpus.sources() {
                if seen.insert(s.to_owned()) {
                    sentences.push(s.to_owned());
                }
            }
        }
        if &corpus.tgt_lang == lang {
            lang_present = true;
            for t in corpus.targets() {
                if seen.insert(t.to_owned()) {
                    sentences.push(t.to_owned());
                }
            }
        }
    }
    if !lang_present {
        return Err(Error::Input(format!(
            "language '{lang}' does not occur in any authentic corpus"
        )));
    }
    Ok(MonolingualSet { sentences, lang: lang.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subword::SubwordModel;

    fn langs3() -> (LangId, LangId, LangId) {
        (LangId::new("p"), LangId::new("b"), LangId::new("c"))
    }

    fn tiny_model() -> SubwordModel {
        let (p, b, c) = langs3();
        SubwordModel::learn(
            ["tora miko sela", "toraz mikoz selaz", "ture miku sile"],
            40,
            &[p, b, c],
        )
        .unwrap()
    }

    fn corpus(src: &str, tgt: &str, n: usize) -> ParallelCorpus {
        let pairs = (0..n)
            .map(|i| (format!("tora miko sela {}", "tora ".repeat(i % 3)).trim().to_string(),
                      format!("toraz mikoz selaz {}", "toraz ".repeat(i % 3)).trim().to_string()))
            .collect();
        ParallelCorpus::new(pairs, LangId::new(src), LangId::new(tgt), Origin::Authentic).unwrap()
    }

    #[test]
    fn load_parallel_pairs_lines() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("x.p-b.p");
        let b = dir.path().join("x.p-b.b");
        write_lines(&a, &["uno due".into(), "tre".into(), "quattro cinque".into()]).unwrap();
        write_lines(&b, &["one two".into(), "three".into(), "four five".into()]).unwrap();
        let c = load_parallel(&a, &b, LangId::new("p"), LangId::new("b")).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.pairs[1], ("tre".to_string(), "three".to_string()));
    }

    #[test]
    fn load_parallel_detects_misalignment() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.txt");
        let b = dir.path().join("b.txt");
        write_lines(&a, &(0..10).map(|i| format!("s {i}")).collect::<Vec<_>>()).unwrap();
        write_lines(&b, &(0..9).map(|i| format!("t {i}")).collect::<Vec<_>>()).unwrap();
        match load_parallel(&a, &b, LangId::new("p"), LangId::new("b")) {
            Err(Error::Alignment { left: 10, right: 9 }) => {}
            other => panic!("expected alignment error, got {other:?}"),
        }
    }

    #[test]
    fn load_parallel_reports_bad_utf8_line() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("bad.txt");
        std::fs::write(&a, b"fine line\n\xff\xfe broken\n").unwrap();
        match read_lines(&a) {
            Err(Error::Encoding { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected encoding error, got {other:?}"),
        }
    }

    #[test]
    fn corpus_round_trips_through_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus("p", "b", 17);
        save_parallel(dir.path(), "train", &c).unwrap();
        let loaded = load_parallel(
            &dir.path().join("train.p-b.p"),
            &dir.path().join("train.p-b.b"),
            LangId::new("p"),
            LangId::new("b"),
        )
        .unwrap();
        assert_eq!(c.pairs, loaded.pairs);
    }

    #[test]
    fn mix_flags_and_counts() {
        let model = tiny_model();
        let (p, b, _) = langs3();
        let one = ParallelCorpus::new(
            vec![("tora miko".into(), "toraz mikoz".into())],
            p.clone(),
            b.clone(),
            Origin::Authentic,
        )
        .unwrap();
        let ts = mix_multilingual(&[one], &model, 1).unwrap();
        assert_eq!(ts.len(), 1);
        let e = &ts.examples[0];
        assert_eq!(e.src_ids[0], model.flag_id(&b).unwrap());
        assert_eq!(*e.src_ids.last().unwrap(), EOS_ID);
        assert_eq!(e.tgt_ids[0], BOS_ID);
        assert_eq!(*e.tgt_ids.last().unwrap(), EOS_ID);

        let c100 = corpus("p", "b", 100);
        let c200 = corpus("b", "p", 200);
        let ts = mix_multilingual(&[c100, c200], &model, 2).unwrap();
        assert_eq!(ts.len(), 300);
    }

    #[test]
    fn mix_same_seed_same_order() {
        let model = tiny_model();
        let a = mix_multilingual(&[corpus("p", "b", 50)], &model, 9).unwrap();
        let b = mix_multilingual(&[corpus("p", "b", 50)], &model, 9).unwrap();
        let texts = |ts: &TrainingSet| {
            ts.examples.iter().map(|e| e.src_text.clone()).collect::<Vec<_>>()
        };
        assert_eq!(texts(&a), texts(&b));
    }

    #[test]
    fn mix_rejects_unknown_language() {
        let model = tiny_model();
        let c = corpus("p", "zz", 3);
        assert!(matches!(mix_multilingual(&[c], &model, 0), Err(Error::Input(_))));
    }

    #[test]
    fn segments_mode_shapes() {
        let model = tiny_model();
        let ts = mix_multilingual(&[corpus("p", "b", 10)], &model, 3).unwrap();
        let batches = ts.batches(BatchMode::Segments(4)).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.rows).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn tokens_mode_matches_greedy_fill_by_hand() {
        // Three examples of cost length 8 and budget 16: the greedy fill
        // puts two in the first batch and one in the second.
        let model = tiny_model();
        let (p, b, _) = langs3();
        let text_src = "tora miko sela tora miko"; // 5 words + flag + eos = 7? depends on merges
        let text_tgt = "toraz mikoz selaz toraz mikoz";
        let c = ParallelCorpus::new(
            vec![(text_src.into(), text_tgt.into()); 3],
            p,
            b,
            Origin::Authentic,
        )
        .unwrap();
        let ts = mix_multilingual(&[c], &model, 0).unwrap();
        let len = ts.examples[0].cost_len();
        let budget = 2 * len + 1; // fits two, not three
        let batches = ts.batches(BatchMode::Tokens(budget)).unwrap();
        assert_eq!(batches[0].rows, 2);
        assert_eq!(batches[1].rows, 1);
    }

    #[test]
    fn tokens_mode_rejects_oversized_sentence() {
        let model = tiny_model();
        let ts = mix_multilingual(&[corpus("p", "b", 5)], &model, 0).unwrap();
        assert!(matches!(ts.batches(BatchMode::Tokens(3)), Err(Error::Input(_))));
    }

    #[test]
    fn batches_partition_the_training_set() {
        let model = tiny_model();
        let ts = mix_multilingual(&[corpus("p", "b", 37), corpus("b", "p", 11)], &model, 5).unwrap();
        for mode in [BatchMode::Segments(7), BatchMode::Tokens(64)] {
            let batches = ts.batches(mode).unwrap();
            let mut seen: Vec<Vec<u32>> = Vec::new();
            for b in &batches {
                for r in 0..b.rows {
                    let len = b.src_len[r];
                    seen.push(b.src_row(r)[..len].to_vec());
                }
            }
            let mut want: Vec<Vec<u32>> =
                ts.examples.iter().map(|e| e.src_ids.clone()).collect();
            seen.sort();
            want.sort();
            assert_eq!(seen, want, "mode {mode:?}");
        }
    }

    #[test]
    fn monolingual_extraction_rules() {
        let (p, b, c) = langs3();
        let ab = corpus("p", "b", 10);
        // extract of an absent language errors
        assert!(matches!(extract_monolingual(&[ab.clone()], &c), Err(Error::Input(_))));

        // dedup across sides and corpora, order preserved, bound holds
        let ba = ab.reversed();
        let mono = extract_monolingual(&[ab.clone(), ba], &b).unwrap();
        assert!(mono.len() <= 20);
        let uniq: HashSet<&String> = mono.sentences.iter().collect();
        assert_eq!(uniq.len(), mono.len());

        // constructed duplicates collapse: 10 shared sentences across two
        // corpora count once
        let dup = ParallelCorpus::new(
            ab.pairs.clone(),
            p,
            b.clone(),
            Origin::Authentic,
        )
        .unwrap();
        let merged = extract_monolingual(&[ab.clone(), dup], &b).unwrap();
        let alone = extract_monolingual(&[ab], &b).unwrap();
        assert_eq!(merged.len(), alone.len());
    }

    #[test]
    fn synthetic_corpora_are_excluded_from_extraction() {
        let (_, b, _) = langs3();
        let mut syn = corpus("p", "b", 6);
        syn.origin = Origin::Synthetic { round: 1 };
        assert!(matches!(extract_monolingual(&[syn], &b), Err(Error::Input(_))));
    }
}
