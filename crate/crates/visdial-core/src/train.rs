//! Minibatch training over dialog turns and the shared evaluation loop.
//!
//! Every example owns its own graph; gradients are summed in batch order and
//! averaged before the Adam step, so learning-rate semantics do not depend on
//! batch size and runs are bit-deterministic given the seed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Graph;
use crate::metrics::{ndcg, sorted_candidates, MetricError, RankingResult, TurnRanking};
use crate::model::{forward_turn, ranking_scores, ModelParams, PreparedTurn, TrainMode};
use crate::optim::{lr_schedule, AdamState, OptimError};
use crate::trace::{trace_from_forward, AttentionTrace};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no examples to train on")]
    EmptyDataset,
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub mode: TrainMode,
    pub epochs: usize,
    pub seed: u64,
    /// Evaluate (and log) every n-th epoch; the final epoch always evaluates.
    pub eval_every: usize,
    /// Stop as soon as an evaluated epoch satisfies both bounds.
    pub stop: Option<StopRule>,
}

#[derive(Debug, Clone, Copy)]
pub struct StopRule {
    pub min_r1: f64,
    pub max_loss: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            mode: TrainMode::Multitask,
            epochs: 10,
            seed: 0,
            eval_every: 1,
            stop: None,
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub mrr: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mean: f64,
    pub ndcg: Option<f64>,
}

pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub epochs_run: usize,
}

/// Rank every example and average the mode loss. Order is dataset order, so
/// results merge deterministically.
pub fn evaluate(
    params: &ModelParams,
    examples: &[PreparedTurn],
    mode: TrainMode,
    mut traces: Option<&mut Vec<AttentionTrace>>,
) -> Result<(RankingResult, f64), TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut turns = Vec::with_capacity(examples.len());
    let mut loss_sum = 0.0;
    for ex in examples {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let fwd = forward_turn(&mut g, &bound, &params.dims, ex, mode, true);
        loss_sum += g.scalar_value(fwd.loss);
        let scores = ranking_scores(&g, &fwd, mode);
        let ranking = sorted_candidates(&scores);
        let gt_rank = 1 + ranking.iter().position(|&i| i == ex.gt_index).unwrap();
        let turn_ndcg = match &ex.relevance {
            Some(rel) => Some(ndcg(&scores, rel)?),
            None => None,
        };
        if let Some(ts) = traces.as_deref_mut() {
            ts.push(trace_from_forward(&g, &fwd, ex, ranking.clone(), gt_rank));
        }
        turns.push(TurnRanking {
            image_id: ex.image_id.clone(),
            turn_index: ex.turn_index,
            gt_rank,
            sorted_candidates: ranking,
            ndcg: turn_ndcg,
        });
    }
    let result = RankingResult::from_turns(turns)?;
    Ok((result, loss_sum / examples.len() as f64))
}

/// Minibatch Adam training. `on_epoch` sees every evaluated epoch record as
/// it is produced (for logging).
pub fn train(
    params: &mut ModelParams,
    examples: &[PreparedTurn],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let batch_size = params.dims.config.batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = AdamState::new(params);
    let mut records = Vec::new();
    let mut epochs_run = 0;

    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        let n_batches = order.len().div_ceil(batch_size);
        let mut epoch_loss = 0.0;

        for (batch_idx, batch) in order.chunks(batch_size).enumerate() {
            let mut grad_sum: Vec<Vec<f64>> =
                params.params().iter().map(|p| vec![0.0; p.values.len()]).collect();
            for &idx in batch {
                let mut g = Graph::new();
                let bound = params.bind(&mut g);
                let fwd =
                    forward_turn(&mut g, &bound, &params.dims, &examples[idx], opts.mode, false);
                epoch_loss += g.scalar_value(fwd.loss);
                g.backward(fwd.loss);
                for (acc, grad) in grad_sum.iter_mut().zip(params.harvest_grads(&g, &bound)) {
                    for (a, v) in acc.iter_mut().zip(grad) {
                        *a += v;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for grad in &mut grad_sum {
                for v in grad.iter_mut() {
                    *v *= scale;
                }
            }
            let lr = lr_schedule(epoch as f64 + batch_idx as f64 / n_batches as f64);
            adam.step(params, &grad_sum, lr)?;
        }
        epochs_run = epoch + 1;
        let mean_loss = epoch_loss / examples.len() as f64;

        let is_eval_epoch =
            opts.eval_every != 0 && (epoch + 1) % opts.eval_every == 0 || epoch + 1 == opts.epochs;
        if is_eval_epoch {
            let (result, _) = evaluate(params, examples, opts.mode, None)?;
            let record = EpochRecord {
                epoch,
                split: "train".into(),
                loss: mean_loss,
                mrr: result.mrr,
                r1: result.r1,
                r5: result.r5,
                r10: result.r10,
                mean: result.mean_rank,
                ndcg: result.ndcg,
            };
            on_epoch(&record);
            let stop_hit = opts
                .stop
                .map(|s| record.r1 >= s.min_r1 && record.loss < s.max_loss)
                .unwrap_or(false);
            records.push(record);
            if stop_hit {
                break;
            }
        }
    }
    Ok(TrainOutcome { records, epochs_run })
}

/// Append records to a line-delimited JSON log.
pub fn append_records(path: impl AsRef<std::path::Path>, records: &[EpochRecord]) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r).expect("record serializes"))?;
    }
    Ok(())
}
