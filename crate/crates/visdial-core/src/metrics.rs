//! Retrieval metrics over candidate rankings: MRR, R@k, mean rank, and NDCG,
//! plus ensemble score averaging.
//!
//! Ranking is a descending stable sort on score with ties broken by ascending
//! candidate index; every metric here and the evaluation loop share that one
//! rule.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("no ranks to aggregate")]
    Empty,
    #[error("relevance scores are all zero")]
    AllZeroRelevance,
}

/// Candidate indices ordered best-first: descending score, ties by ascending
/// index.
pub fn sorted_candidates(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order
}

/// 1-based rank of the ground-truth candidate under the shared tie rule.
pub fn compute_rank(scores: &[f64], gt_index: usize) -> usize {
    assert!(gt_index < scores.len(), "gt index {gt_index} out of {}", scores.len());
    1 + sorted_candidates(scores).iter().position(|&i| i == gt_index).unwrap()
}

/// Aggregates over a set of per-turn ground-truth ranks.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RankAggregates {
    pub mrr: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mean_rank: f64,
}

pub fn mrr_r_mean(ranks: &[usize]) -> Result<RankAggregates, MetricError> {
    if ranks.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = ranks.len() as f64;
    let at = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    Ok(RankAggregates {
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        r1: at(1),
        r5: at(5),
        r10: at(10),
        mean_rank: ranks.iter().map(|&r| r as f64).sum::<f64>() / n,
    })
}

/// Normalized discounted cumulative gain at K, where K is the number of
/// candidates with positive relevance. Gain is linear: rel / log2(pos + 1).
pub fn ndcg(scores: &[f64], relevance: &[f64]) -> Result<f64, MetricError> {
    assert_eq!(scores.len(), relevance.len(), "ndcg: length mismatch");
    let k = relevance.iter().filter(|&&r| r > 0.0).count();
    if k == 0 {
        return Err(MetricError::AllZeroRelevance);
    }
    let order = sorted_candidates(scores);
    let mut dcg = 0.0;
    for (pos, &cand) in order.iter().take(k).enumerate() {
        dcg += relevance[cand] / ((pos + 2) as f64).log2();
    }
    let mut ideal: Vec<f64> = relevance.to_vec();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut idcg = 0.0;
    for (pos, rel) in ideal.iter().take(k).enumerate() {
        idcg += rel / ((pos + 2) as f64).log2();
    }
    Ok(dcg / idcg)
}

/// Elementwise mean of several score distributions. Accumulates deviations
/// around the first distribution so identical inputs come back exactly.
pub fn ensemble_average(score_sets: &[Vec<f64>]) -> Result<Vec<f64>, MetricError> {
    if score_sets.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = score_sets.len() as f64;
    let len = score_sets[0].len();
    let mut out = score_sets[0].clone();
    for j in 0..len {
        let mut dev = 0.0;
        for set in &score_sets[1..] {
            assert_eq!(set.len(), len, "ensemble_average: length mismatch");
            dev += set[j] - score_sets[0][j];
        }
        out[j] += dev / n;
    }
    Ok(out)
}

/// One evaluated turn: the ranking it induced and the gt position.
#[derive(Debug, Clone, Serialize)]
pub struct TurnRanking {
    pub image_id: String,
    pub turn_index: usize,
    pub gt_rank: usize,
    pub sorted_candidates: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ndcg: Option<f64>,
}

/// Per-turn rankings plus the aggregate metrics. NDCG aggregates over the
/// turns that carry relevance scores, when any do.
#[derive(Debug, Clone, Serialize)]
pub struct RankingResult {
    pub per_turn: Vec<TurnRanking>,
    pub mrr: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mean_rank: f64,
    pub ndcg: Option<f64>,
}

impl RankingResult {
    pub fn from_turns(turns: Vec<TurnRanking>) -> Result<Self, MetricError> {
        let ranks: Vec<usize> = turns.iter().map(|t| t.gt_rank).collect();
        let agg = mrr_r_mean(&ranks)?;
        let ndcgs: Vec<f64> = turns.iter().filter_map(|t| t.ndcg).collect();
        let ndcg = if ndcgs.is_empty() {
            None
        } else {
            Some(ndcgs.iter().sum::<f64>() / ndcgs.len() as f64)
        };
        Ok(RankingResult {
            per_turn: turns,
            mrr: agg.mrr,
            r1: agg.r1,
            r5: agg.r5,
            r10: agg.r10,
            mean_rank: agg.mean_rank,
            ndcg,
        })
    }
}
