//! Training loop: shuffled epochs, optimizer updates, per-epoch
//! checkpoints in a ring of seven, and patience-based early stopping.
//!
//! Determinism contract: a run is a pure function of (model seed, data,
//! options, seed). The loop owns one generator that drives epoch shuffles
//! and dropout; its state is saved in every checkpoint, so resuming from a
//! checkpoint continues the exact same stream and `train(e₁)` followed by
//! `train(e₂)` equals `train(e₁+e₂)` bit for bit.

pub mod checkpoint;
pub mod optim;

pub use checkpoint::{average_checkpoints, latest_checkpoint, list_checkpoints, Checkpoint};
pub use optim::{clip_global_norm, lr_schedule, OptimizerKind, OptimizerState, Schedule};

use crate::corpus::{make_batches, Batch, BatchMode, TrainingSet};
use crate::error::{Error, Result};
use crate::model::{Arch, Model};
use crate::rng::Rng;
use std::io::Write as _;
use std::path::PathBuf;

/// Knobs of one training run.
#[derive(Clone, Debug)]
pub struct TrainOptions {
    /// Fixed epoch count, or `None` to train until convergence.
    pub epochs: Option<u32>,
    /// Upper bound on epochs in convergence mode.
    pub max_epochs: u32,
    /// Consecutive non-improving evaluations tolerated before stopping.
    pub patience: u32,
    /// An evaluation must improve on the best by more than this to count.
    pub min_delta: f64,
    pub optimizer: OptimizerKind,
    pub batch: BatchMode,
    pub seed: u64,
    /// Global-norm gradient clip, if any.
    pub clip_norm: Option<f64>,
    pub checkpoint_dir: Option<PathBuf>,
    pub keep_checkpoints: usize,
    /// Append `step<TAB>loss<TAB>lr` lines here.
    pub log_path: Option<PathBuf>,
}

impl TrainOptions {
    /// The standard pairing: Adagrad with gradient clipping for recurrent
    /// models, scheduled Adam for transformers.
    pub fn for_arch(arch: Arch, model_dim: usize, seed: u64) -> TrainOptions {
        let (optimizer, clip_norm) = match arch {
            Arch::Recurrent => (OptimizerKind::default_adagrad(), Some(5.0)),
            Arch::Transformer => (OptimizerKind::scheduled_adam(400, model_dim, 2.0), None),
        };
        TrainOptions {
            epochs: None,
            max_epochs: 60,
            patience: 3,
            min_delta: 1e-4,
            optimizer,
            batch: BatchMode::Tokens(1024),
            seed,
            clip_norm,
            checkpoint_dir: None,
            keep_checkpoints: 7,
            log_path: None,
        }
    }
}

/// Mutable training-run state alongside the model.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub optimizer: OptimizerState,
    pub rng: Rng,
}

impl TrainState {
    pub fn new(kind: OptimizerKind, seed: u64) -> TrainState {
        TrainState { optimizer: OptimizerState::new(kind), rng: Rng::seed_from(seed) }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<TrainState> {
        let optimizer = ck
            .optimizer
            .clone()
            .ok_or_else(|| Error::Input("checkpoint carries no optimizer state".into()))?;
        let rng = ck
            .rng_state
            .map(Rng::from_state)
            .ok_or_else(|| Error::Input("checkpoint carries no rng state".into()))?;
        Ok(TrainState { optimizer, rng })
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainSummary {
    pub epochs_run: u32,
    pub steps_run: u64,
    pub final_train_loss: f64,
    pub best_eval_loss: f64,
    pub stopped_early: bool,
}

/// Token-weighted mean per-token loss over a whole set.
pub fn dataset_loss(model: &Model<f32>, set: &TrainingSet) -> Result<f64> {
    let refs: Vec<&crate::corpus::Example> = set.examples.iter().collect();
    let batches = make_batches(&refs, BatchMode::Segments(64))?;
    weighted_loss(model, &batches)
}

fn weighted_loss(model: &Model<f32>, batches: &[Batch]) -> Result<f64> {
    let mut total = 0f64;
    let mut tokens = 0usize;
    for b in batches {
        let n = b.target_tokens();
        total += model.eval_loss(b)? * n as f64;
        tokens += n;
    }
    Ok(total / tokens.max(1) as f64)
}

/// Run epochs over `data`, evaluating on `dev` (when given) once per epoch.
/// Resuming: pass the state loaded from a checkpoint and the same options.
pub fn train(
    model: &mut Model<f32>,
    state: &mut TrainState,
    data: &TrainingSet,
    dev: Option<&TrainingSet>,
    opts: &TrainOptions,
) -> Result<TrainSummary> {
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = match &opts.log_path {
        Some(path) => Some(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?,
        ),
        None => None,
    };

    let planned = opts.epochs.unwrap_or(opts.max_epochs);
    let mut summary = TrainSummary { best_eval_loss: f64::INFINITY, ..TrainSummary::default() };
    let mut stale_evals = 0u32;

    for _epoch in 0..planned {
        // Epoch order: shuffle examples, bucket into batches, shuffle the
        // batch order. All three draws come from the run generator.
        let mut order: Vec<usize> = (0..data.len()).collect();
        state.rng.shuffle(&mut order);
        let refs: Vec<&crate::corpus::Example> =
            order.iter().map(|&i| &data.examples[i]).collect();
        let mut batches = make_batches(&refs, opts.batch)?;
        state.rng.shuffle(&mut batches);

        let mut epoch_loss = 0f64;
        let mut epoch_tokens = 0usize;
        for batch in &batches {
            let (loss, mut grads) = model
                .loss_and_grads(batch, &mut state.rng)
                .map_err(|e| Error::Numeric(format!("at step {}: {e}", model.step)))?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at step {}", model.step)));
            }
            if let Some(max_norm) = opts.clip_norm {
                clip_global_norm(&mut grads, max_norm);
            }
            let lr = state.optimizer.apply(&mut model.params, &grads)?;
            model.step += 1;
            summary.steps_run += 1;
            epoch_loss += loss * batch.target_tokens() as f64;
            epoch_tokens += batch.target_tokens();
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}\t{:.6}\t{:.8}", model.step, loss, lr)
                    .map_err(|e| Error::io(opts.log_path.clone().unwrap(), e))?;
            }
        }
        summary.epochs_run += 1;
        summary.final_train_loss = epoch_loss / epoch_tokens.max(1) as f64;

        let eval = match dev {
            Some(set) => dataset_loss(model, set)?,
            None => summary.final_train_loss,
        };

        if let Some(dir) = &opts.checkpoint_dir {
            let ck = Checkpoint::from_model(model, Some(state.rng.state()), Some(&state.optimizer));
            ck.save(&dir.join(format!("ckpt-{}", model.step)))?;
            checkpoint::prune_checkpoints(dir, opts.keep_checkpoints)?;
        }

        if eval < summary.best_eval_loss - opts.min_delta {
            summary.best_eval_loss = eval;
            stale_evals = 0;
        } else {
            stale_evals += 1;
            if opts.epochs.is_none() && stale_evals >= opts.patience {
                summary.stopped_early = true;
                break;
            }
        }
    }
    Ok(summary)
}
