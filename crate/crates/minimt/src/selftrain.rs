//! The train-infer-train loop for dual zero-shot directions.
//!
//! Starting from a multilingual model that has never seen the pair
//! (l1, l2), each round translates the l1 monolingual pool into l2 and the
//! l2 pool into l1 with the current model, rebuilds the training mixture
//! as authentic data plus exactly this round's synthetic pairs (synthetic
//! text on the source side, authentic monolingual text on the target
//! side), and resumes training. Earlier rounds' synthetic data is always
//! discarded: the mixture is rebuilt from the authentic corpora every
//! round. Both directions are refreshed every round.
//!
//! Each completed round appends one record to `rounds.log`, writes its
//! synthetic corpora under `round-<i>/`, and checkpoints the model, so a
//! killed run resumes after its last completed round and reproduces the
//! remaining rounds exactly (single-threaded, same seed).

use crate::corpus::{
    extract_monolingual, mix_multilingual, save_parallel, MonolingualSet, Origin, ParallelCorpus,
};
use crate::decode::{translate_corpus, BeamParams};
use crate::error::{Error, Result};
use crate::lang::LangId;
use crate::metrics::{bleu, build_lexicons, language_purity, BleuReport, Smoothing};
use crate::model::Model;
use crate::subword::SubwordModel;
use crate::train::{train, Checkpoint, TrainOptions, TrainState};
use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

/// What to run: the zero-shot pair, the round budget, and inference knobs.
#[derive(Clone, Debug)]
pub struct SelfTrainPlan {
    pub l1: LangId,
    pub l2: LangId,
    pub rounds: u32,
    pub epochs_per_round: u32,
    pub beam: BeamParams,
    /// Cap on monolingual sentences taken per language (None = all).
    pub mono_cap: Option<usize>,
    pub seed: u64,
}

impl SelfTrainPlan {
    pub fn new(l1: LangId, l2: LangId, rounds: u32, seed: u64) -> SelfTrainPlan {
        SelfTrainPlan {
            l1,
            l2,
            rounds,
            epochs_per_round: 3,
            beam: BeamParams::default(),
            mono_cap: None,
            seed,
        }
    }

    /// The zero-shot precondition: neither direction of the pair may
    /// appear among the authentic training directions.
    pub fn validate(&self, authentic: &[ParallelCorpus]) -> Result<()> {
        if self.l1 == self.l2 {
            return Err(Error::Config("zero-shot pair must be two distinct languages".into()));
        }
        for c in authentic {
            let fwd = c.src_lang == self.l1 && c.tgt_lang == self.l2;
            let bwd = c.src_lang == self.l2 && c.tgt_lang == self.l1;
            if fwd || bwd {
                return Err(Error::Config(format!(
                    "direction {}-{} appears in the training data; it is not zero-shot",
                    c.src_lang, c.tgt_lang
                )));
            }
        }
        Ok(())
    }
}

/// Everything measured after one round.
#[derive(Clone, Debug)]
pub struct RoundReport {
    pub round: u32,
    pub l1_mono: usize,
    pub l2_mono: usize,
    pub l1_synthetic: usize,
    pub l2_synthetic: usize,
    pub bleu_l1_to_l2: f64,
    pub bleu_l2_to_l1: f64,
    pub purity_l1_to_l2: Option<f64>,
    pub purity_l2_to_l1: Option<f64>,
    /// Not serialized into the canonical log (it would break byte-level
    /// reproducibility); recorded separately in `timings.log`.
    pub wall_clock: Duration,
}

impl RoundReport {
    /// Canonical structured-text record, deterministic across runs.
    pub fn log_line(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "round={} l1_mono={} l2_mono={} l1_syn={} l2_syn={} bleu_l1l2={:.4} bleu_l2l1={:.4} purity_l1l2={} purity_l2l1={}",
            self.round,
            self.l1_mono,
            self.l2_mono,
            self.l1_synthetic,
            self.l2_synthetic,
            self.bleu_l1_to_l2,
            self.bleu_l2_to_l1,
            fmt_opt(self.purity_l1_to_l2),
            fmt_opt(self.purity_l2_to_l1),
        );
        s
    }

    pub fn parse(line: &str) -> Result<RoundReport> {
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        for part in line.split_whitespace() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Input(format!("bad round record field: {part:?}")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| {
            fields.get(k).copied().ok_or_else(|| Error::Input(format!("round record missing {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Input(format!("bad number in {k}")))
        };
        let flt = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| Error::Input(format!("bad float in {k}")))
        };
        let opt = |k: &str| -> Result<Option<f64>> {
            let v = get(k)?;
            if v == "na" {
                Ok(None)
            } else {
                v.parse().map(Some).map_err(|_| Error::Input(format!("bad float in {k}")))
            }
        };
        Ok(RoundReport {
            round: num("round")? as u32,
            l1_mono: num("l1_mono")?,
            l2_mono: num("l2_mono")?,
            l1_synthetic: num("l1_syn")?,
            l2_synthetic: num("l2_syn")?,
            bleu_l1_to_l2: flt("bleu_l1l2")?,
            bleu_l2_to_l1: flt("bleu_l2l1")?,
            purity_l1_to_l2: opt("purity_l1l2")?,
            purity_l2_to_l1: opt("purity_l2l1")?,
            wall_clock: Duration::ZERO,
        })
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "na".to_string(),
    }
}

/// The round-`i` training mixture: authentic corpora plus the two
/// freshly inferred synthetic corpora, synthetic text on the source side.
pub fn augmented_corpora(
    authentic: &[ParallelCorpus],
    l1_mono: &MonolingualSet,
    l2_mono: &MonolingualSet,
    l1_synthetic: Vec<String>,
    l2_synthetic: Vec<String>,
    round: u32,
) -> Result<Vec<ParallelCorpus>> {
    if l1_synthetic.len() != l2_mono.len() || l2_synthetic.len() != l1_mono.len() {
        return Err(Error::Contract(format!(
            "synthetic/monolingual size mismatch: {} vs {}, {} vs {}",
            l1_synthetic.len(),
            l2_mono.len(),
            l2_synthetic.len(),
            l1_mono.len()
        )));
    }
    let mut out = authentic.to_vec();
    // (L1*, L2): direction l1 → l2, synthetic l1 sources.
    out.push(ParallelCorpus::new(
        l1_synthetic.into_iter().zip(l2_mono.sentences.iter().cloned()).collect(),
        l1_mono.lang.clone(),
        l2_mono.lang.clone(),
        Origin::Synthetic { round },
    )?);
    // (L2*, L1): direction l2 → l1, synthetic l2 sources.
    out.push(ParallelCorpus::new(
        l2_synthetic.into_iter().zip(l1_mono.sentences.iter().cloned()).collect(),
        l2_mono.lang.clone(),
        l1_mono.lang.clone(),
        Origin::Synthetic { round },
    )?);
    Ok(out)
}

/// Translate both dev directions and score BLEU plus language purity.
pub fn zero_shot_eval(
    model: &Model<f32>,
    subword: &SubwordModel,
    dev_l1_to_l2: &ParallelCorpus,
    dev_l2_to_l1: &ParallelCorpus,
    lexicons: &BTreeMap<LangId, BTreeSet<String>>,
    beam: &BeamParams,
    smoothing: Smoothing,
) -> Result<(BleuReport, BleuReport, (Option<f64>, Option<f64>))> {
    let srcs_12: Vec<String> = dev_l1_to_l2.sources().map(str::to_owned).collect();
    let refs_12: Vec<String> = dev_l1_to_l2.targets().map(str::to_owned).collect();
    let hyp_12 = translate_corpus(model, &srcs_12, &dev_l1_to_l2.tgt_lang, subword, beam)?;
    let bleu_12 = bleu(&hyp_12, &refs_12, smoothing)?;
    let purity_12 = language_purity(&hyp_12, &dev_l1_to_l2.tgt_lang, lexicons);

    let srcs_21: Vec<String> = dev_l2_to_l1.sources().map(str::to_owned).collect();
    let refs_21: Vec<String> = dev_l2_to_l1.targets().map(str::to_owned).collect();
    let hyp_21 = translate_corpus(model, &srcs_21, &dev_l2_to_l1.tgt_lang, subword, beam)?;
    let bleu_21 = bleu(&hyp_21, &refs_21, smoothing)?;
    let purity_21 = language_purity(&hyp_21, &dev_l2_to_l1.tgt_lang, lexicons);

    Ok((bleu_12, bleu_21, (purity_12, purity_21)))
}

/// One self-training task bound to its data and evaluation sets.
pub struct SelfTrainer<'a> {
    pub authentic: &'a [ParallelCorpus],
    pub subword: &'a SubwordModel,
    pub plan: SelfTrainPlan,
    /// Held-out dev corpora for the two zero-shot directions; must be
    /// disjoint from training data and monolingual pools.
    pub dev_l1_to_l2: &'a ParallelCorpus,
    pub dev_l2_to_l1: &'a ParallelCorpus,
    /// Options for each round's training continuation; the epoch count is
    /// overridden by the plan.
    pub round_opts: TrainOptions,
    pub smoothing: Smoothing,
    /// Round logs, synthetic corpora, and checkpoints go here. Without a
    /// directory the run is in-memory only and cannot be resumed.
    pub out_dir: Option<PathBuf>,
}

impl SelfTrainer<'_> {
    /// Run rounds 1..=N from a baseline model, resuming after the last
    /// completed round when the output directory already holds one.
    pub fn run(
        &self,
        base: Model<f32>,
        state: TrainState,
    ) -> Result<(Model<f32>, Vec<RoundReport>)> {
        self.plan.validate(self.authentic)?;
        let mut model = base;
        let mut state = state;
        let mut reports: Vec<RoundReport> = Vec::new();

        if let Some(dir) = &self.out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let done = read_round_log(dir)?;
            if let Some(last) = done.last() {
                let ck_path = dir.join(format!("round-{}", last.round)).join("model.ckpt");
                let ck = Checkpoint::load(&ck_path)?;
                state = TrainState::from_checkpoint(&ck)?;
                model = ck.into_model()?;
                reports = done;
            }
        }

        let l1_mono = {
            let m = extract_monolingual(self.authentic, &self.plan.l1)?;
            match self.plan.mono_cap {
                Some(cap) => m.truncated(cap),
                None => m,
            }
        };
        let l2_mono = {
            let m = extract_monolingual(self.authentic, &self.plan.l2)?;
            match self.plan.mono_cap {
                Some(cap) => m.truncated(cap),
                None => m,
            }
        };
        let lexicons = build_lexicons(self.authentic);

        let first = reports.last().map_or(1, |r| r.round + 1);
        for round in first..=self.plan.rounds {
            let started = Instant::now();

            // Dual inference with the current model.
            let l2_syn =
                translate_corpus(&model, &l1_mono.sentences, &self.plan.l2, self.subword, &self.plan.beam)?;
            let l1_syn =
                translate_corpus(&model, &l2_mono.sentences, &self.plan.l1, self.subword, &self.plan.beam)?;

            // Rebuild the mixture from scratch: only this round's synthetic
            // corpora ride along with the authentic data.
            let corpora = augmented_corpora(
                self.authentic,
                &l1_mono,
                &l2_mono,
                l1_syn.clone(),
                l2_syn.clone(),
                round,
            )?;
            let mix_seed = self.plan.seed.wrapping_add(round as u64);
            let training_set = mix_multilingual(&corpora, self.subword, mix_seed)?;

            let opts = TrainOptions {
                epochs: Some(self.plan.epochs_per_round),
                checkpoint_dir: None,
                log_path: None,
                ..self.round_opts.clone()
            };
            train(&mut model, &mut state, &training_set, None, &opts)?;

            let (bleu_12, bleu_21, (purity_12, purity_21)) = zero_shot_eval(
                &model,
                self.subword,
                self.dev_l1_to_l2,
                self.dev_l2_to_l1,
                &lexicons,
                &self.plan.beam,
                self.smoothing,
            )?;
            let report = RoundReport {
                round,
                l1_mono: l1_mono.len(),
                l2_mono: l2_mono.len(),
                l1_synthetic: l1_syn.len(),
                l2_synthetic: l2_syn.len(),
                bleu_l1_to_l2: bleu_12.bleu,
                bleu_l2_to_l1: bleu_21.bleu,
                purity_l1_to_l2: purity_12,
                purity_l2_to_l1: purity_21,
                wall_clock: started.elapsed(),
            };

            if let Some(dir) = &self.out_dir {
                self.persist_round(dir, &report, &corpora, &model, &state)?;
            }
            reports.push(report);
        }
        Ok((model, reports))
    }

    fn persist_round(
        &self,
        dir: &Path,
        report: &RoundReport,
        corpora: &[ParallelCorpus],
        model: &Model<f32>,
        state: &TrainState,
    ) -> Result<()> {
        let round_dir = dir.join(format!("round-{}", report.round));
        std::fs::create_dir_all(&round_dir).map_err(|e| Error::io(&round_dir, e))?;
        for c in corpora {
            if let Origin::Synthetic { round } = c.origin {
                if round == report.round {
                    save_parallel(&round_dir, "syn", c)?;
                }
            }
        }
        Checkpoint::from_model(model, Some(state.rng.state()), Some(&state.optimizer))
            .save(&round_dir.join("model.ckpt"))?;
        append_line(&dir.join("rounds.log"), &report.log_line())?;
        append_line(
            &dir.join("timings.log"),
            &format!("round={} seconds={:.3}", report.round, report.wall_clock.as_secs_f64()),
        )?;
        Ok(())
    }
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    use std::io::Write as _;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn read_round_log(dir: &Path) -> Result<Vec<RoundReport>> {
    let path = dir.join("rounds.log");
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(RoundReport::parse(line)?);
    }
    Ok(out)
}
