use log::{debug, info};

use super::batch::{make_batches, sequential_batches, Batch, IGNORE};
use super::checkpoint::Checkpoint;
use super::corpus::Corpus;
use super::TrainingError;
use crate::autodiff::{Tape, Var};
use crate::model::Model;
use crate::optim::{clip_grad_norm, AdamState};
use crate::tensor::TensorError;
use crate::tokenizer::SpecialIds;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub clip_norm: f64,
    pub batch_size: usize,
    /// Total number of optimizer steps; a resumed run continues up to it.
    pub steps: u64,
    /// Checkpoint callback cadence in steps; 0 means only at the end.
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            clip_norm: 1.0,
            batch_size: 8,
            steps: 500_000,
            checkpoint_interval: 500,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// `(step, loss)` for every step run in this call, step counted from 1.
    pub losses: Vec<(u64, f64)>,
}

/// Forward, loss, backward, clip and one Adam update. Returns the loss and
/// the gradient norm before clipping.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut AdamState,
    batch: &Batch,
    clip_norm: f64,
    step: u64,
) -> Result<(f64, f64), TrainingError> {
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &batch.inputs)?;
    let loss = tape.cross_entropy(fwd.logits, &batch.targets, IGNORE)?;
    let loss_value = tape.value(loss).item()?;
    let leaves: Vec<Var> = fwd.params.leaves().into_iter().copied().collect();
    let mut grads = tape.backward(loss)?.take_all(&leaves);
    let per_param: Vec<f64> = grads.iter().map(|g| g.squared_norm().sqrt()).collect();
    let grad_norm = clip_grad_norm(&mut grads, clip_norm);
    if !loss_value.is_finite() || !grad_norm.is_finite() {
        let names = model.params().names();
        let (worst, worst_norm) = per_param
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, &n)| (names[i].clone(), n))
            .unwrap_or_default();
        return Err(TrainingError::NonFinite {
            step,
            loss: loss_value,
            grad_norm,
            worst_param: worst,
            worst_norm,
        });
    }
    let mut params = model.params_mut().leaves_mut();
    optimizer.step(&mut params, &grads)?;
    Ok((loss_value, grad_norm))
}

fn check_vocab(corpus: &Corpus, vocab: usize) -> Result<(), TrainingError> {
    if corpus.examples.iter().flatten().any(|&id| id >= vocab) {
        return Err(TrainingError::VocabMismatch { vocab });
    }
    Ok(())
}

/// Trains `state` on `corpus` until `config.steps` total steps.
///
/// Batches come from [`make_batches`] seeded with `state.seed`; a resumed
/// run skips the batches already consumed, so it sees the same sequence as
/// an uninterrupted one. `on_checkpoint` is called every
/// `checkpoint_interval` steps and once at the end.
pub fn train(
    mut state: Checkpoint,
    corpus: &Corpus,
    specials: SpecialIds,
    config: &TrainConfig,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<(), TrainingError>,
) -> Result<TrainOutcome, TrainingError> {
    check_vocab(corpus, state.model.config().vocab_size)?;
    let mut losses = Vec::new();
    if state.step < config.steps {
        let mut batches = make_batches(corpus, config.batch_size, specials, state.seed);
        for _ in 0..state.step {
            batches.next();
        }
        while state.step < config.steps {
            let batch = batches.next().expect("batch stream is endless");
            let step = state.step + 1;
            let (loss, norm) =
                train_step(&mut state.model, &mut state.optimizer, &batch, config.clip_norm, step)?;
            state.step = step;
            losses.push((step, loss));
            debug!("step {step} loss {loss:.6} grad_norm {norm:.4}");
            if step.is_multiple_of(100) {
                info!("step {step} loss {loss:.6}");
            }
            if config.checkpoint_interval > 0 && step.is_multiple_of(config.checkpoint_interval) && step < config.steps {
                on_checkpoint(&state)?;
            }
        }
    }
    on_checkpoint(&state)?;
    Ok(TrainOutcome {
        checkpoint: state,
        losses,
    })
}

/// Mean cross-entropy over every scored position of `corpus`.
pub fn eval_loss(model: &Model, corpus: &Corpus, specials: SpecialIds, batch_size: usize) -> Result<f64, TrainingError> {
    check_vocab(corpus, model.config().vocab_size)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in sequential_batches(corpus, batch_size, specials) {
        let n = batch.loss_positions();
        if n == 0 {
            continue;
        }
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &batch.inputs)?;
        let loss = tape.cross_entropy(fwd.logits, &batch.targets, IGNORE)?;
        total += tape.value(loss).item()? * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(TensorError::DegenerateBatch(corpus.len()).into());
    }
    Ok(total / count as f64)
}
