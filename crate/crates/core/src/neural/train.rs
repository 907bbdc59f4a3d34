//! Seeded mini-batch training with validation-based checkpoint selection.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::adam::Adam;
use super::checkpoint::Checkpoint;
use super::config::{ModelConfig, OptimizerConfig};
use super::model::{batch_gradients, batch_loss, BatchLoss, Example, PreparedBatch};
use super::vocab::{build_vocab, CharVocab};
use super::weights::{Layout, Weights};
use super::NeuralError;
use crate::field_forge::AnnotatedRecord;

/// Smallest corpus accepted by [`train`].
pub const MIN_CORPUS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights of the epoch with the lowest validation loss.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
    pub stopped_early: bool,
    /// Records cut to `max_len` for training.
    pub truncated: usize,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

/// Shuffles `0..n` and holds out `round(n * fraction)` indices (at least one
/// when the fraction is positive). Returns `(train, validation)`.
pub fn split_indices(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = if fraction > 0.0 { ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1)) } else { 0 };
    let train = idx.split_off(n_val);
    (train, idx)
}

/// Encodes records, truncating both sides to `max_len` characters. Returns
/// the examples and the number of truncated records.
pub fn encode_examples(
    records: &[&AnnotatedRecord],
    source: &CharVocab,
    target: &CharVocab,
    max_len: usize,
) -> Result<(Vec<Example>, usize), NeuralError> {
    let mut truncated = 0;
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let mut src = source.encode_lossy(&r.raw);
        let mut tgt = target.encode(&r.ann)?;
        if src.len() > max_len || tgt.len() > max_len {
            truncated += 1;
            src.truncate(max_len);
            tgt.truncate(max_len);
        }
        out.push(Example { source: src, target: tgt });
    }
    Ok((out, truncated))
}

fn mean_loss(
    w: &Weights<f32>,
    cfg: &ModelConfig,
    examples: &[Example],
    batch_size: usize,
) -> Result<f64, NeuralError> {
    let mut total = BatchLoss { loss_sum: 0.0, tokens: 0 };
    for chunk in examples.chunks(batch_size) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let l = batch_loss(w, cfg, &PreparedBatch::new(&refs, cfg.reverse_source), None)?;
        total.loss_sum += l.loss_sum;
        total.tokens += l.tokens;
    }
    Ok(total.mean())
}

/// Batches per length bucket.
const BUCKET_BATCHES: usize = 20;

/// Shuffles `order`, then sorts each window of [`BUCKET_BATCHES`] batches by
/// source length so batches carry little padding, and shuffles the batches.
fn bucketed_batches(order: &mut [usize], examples: &[Example], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    order.shuffle(rng);
    let mut batches = Vec::with_capacity(order.len().div_ceil(batch_size));
    for window in order.chunks_mut(batch_size * BUCKET_BATCHES) {
        window.sort_by_key(|&i| examples[i].source.len());
        batches.extend(window.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

/// Trains on `records` with a seeded split, initialization, batch order and
/// dropout stream. `on_epoch` sees every epoch's losses as they finish.
pub fn train(
    model: &ModelConfig,
    opt: &OptimizerConfig,
    records: &[AnnotatedRecord],
    seed: u64,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome, NeuralError> {
    model.validate()?;
    opt.validate()?;
    if records.is_empty() {
        return Err(NeuralError::EmptyCorpus);
    }
    if records.len() < MIN_CORPUS {
        return Err(NeuralError::CorpusTooSmall { records: records.len() });
    }
    let (source, target) = build_vocab(records)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train_indices, val_indices) = split_indices(records.len(), opt.validation_fraction, &mut rng);
    let mut weights: Weights<f32> =
        Weights::uniform(Layout::new(model, source.len(), target.len()), model.init_scale, &mut rng);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
    dropout_rng.set_stream(2);

    let pick = |idx: &[usize]| idx.iter().map(|&i| &records[i]).collect::<Vec<_>>();
    let (train_set, truncated) = encode_examples(&pick(&train_indices), &source, &target, model.max_len)?;
    let mut val_set = if val_indices.is_empty() {
        train_set.clone()
    } else {
        encode_examples(&pick(&val_indices), &source, &target, model.max_len)?.0
    };
    val_set.sort_by_key(|e| e.source.len());
    if truncated > 0 {
        log::warn!("{truncated} training records longer than {} characters were truncated", model.max_len);
    }

    let mut adam = Adam::new(opt, &weights);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Weights<f32>)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 1..=opt.max_epochs {
        let mut total = BatchLoss { loss_sum: 0.0, tokens: 0 };
        for chunk in bucketed_batches(&mut order, &train_set, opt.batch_size, &mut rng) {
            let refs: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch = PreparedBatch::new(&refs, model.reverse_source);
            let (loss, grads) = batch_gradients(&weights, model, &batch, Some(&mut dropout_rng))?;
            if !loss.loss_sum.is_finite() {
                return Err(NeuralError::NonFinite { epoch });
            }
            adam.update(&mut weights, &grads);
            total.loss_sum += loss.loss_sum;
            total.tokens += loss.tokens;
        }
        let val_loss = mean_loss(&weights, model, &val_set, opt.batch_size)?;
        if !val_loss.is_finite() {
            return Err(NeuralError::NonFinite { epoch });
        }
        let stats = EpochStats { epoch, train_loss: total.mean(), val_loss };
        log::info!("epoch {epoch}: train {:.5} val {:.5}", stats.train_loss, stats.val_loss);
        on_epoch(&stats);
        history.push(stats);
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, weights.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= opt.patience {
                stopped_early = epoch < opt.max_epochs;
                break;
            }
        }
    }
    let (best_val_loss, epoch, weights) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: model.clone(),
            source_vocab: source,
            target_vocab: target,
            weights,
            best_val_loss,
            epoch,
        },
        history,
        stopped_early,
        truncated,
        train_indices,
        val_indices,
    })
}

/// Writes the `epoch,train_loss,val_loss` history.
pub fn write_history(path: &Path, history: &[EpochStats]) -> Result<(), NeuralError> {
    let io = |e: csv::Error| NeuralError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for h in history {
        w.serialize(h).map_err(io)?;
    }
    w.flush().map_err(|source| NeuralError::Io { path: path.to_path_buf(), source })
}
