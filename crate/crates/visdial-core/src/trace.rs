//! Attention-trace export: per-turn records of every attention distribution
//! the model produced, plus the candidate ranking, dumped as JSON.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::model::{PreparedTurn, TurnForward};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub image_id: String,
    pub turn_index: usize,
    /// Distribution over history rounds, length t.
    pub round_attn: Vec<f64>,
    /// Per round: question words × history tokens.
    pub word_attn: Vec<Vec<Vec<f64>>>,
    /// Question words × objects, column-stochastic over words.
    pub topic_attn: Vec<Vec<f64>>,
    /// Distribution over objects.
    pub object_attn: Vec<f64>,
    /// Candidate indices best-first.
    pub ranking: Vec<usize>,
    pub gt_rank: usize,
}

const SUM_TOL: f64 = 1e-9;

/// Pull every attention distribution out of a finished forward pass.
/// Panics if any recorded distribution fails to sum to one: a trace that
/// violates its own invariant would only mislead downstream inspection.
pub fn trace_from_forward(
    g: &Graph,
    fwd: &TurnForward,
    ex: &PreparedTurn,
    ranking: Vec<usize>,
    gt_rank: usize,
) -> AttentionTrace {
    let round_attn = g.values(fwd.round_attn).to_vec();
    check_sum("round_attn", &round_attn);

    let mut word_attn = Vec::with_capacity(fwd.word_attn.len());
    for &attn in &fwd.word_attn {
        let sh = g.shape(attn).to_vec();
        let vals = g.values(attn);
        let rows: Vec<Vec<f64>> =
            (0..sh[0]).map(|i| vals[i * sh[1]..(i + 1) * sh[1]].to_vec()).collect();
        for row in &rows {
            check_sum("word_attn", row);
        }
        word_attn.push(rows);
    }

    let sh = g.shape(fwd.topic_attn).to_vec();
    let vals = g.values(fwd.topic_attn);
    let topic_attn: Vec<Vec<f64>> =
        (0..sh[0]).map(|i| vals[i * sh[1]..(i + 1) * sh[1]].to_vec()).collect();
    for k in 0..sh[1] {
        let col: Vec<f64> = (0..sh[0]).map(|i| topic_attn[i][k]).collect();
        check_sum("topic_attn column", &col);
    }

    let object_attn = g.values(fwd.object_attn).to_vec();
    check_sum("object_attn", &object_attn);

    AttentionTrace {
        image_id: ex.image_id.clone(),
        turn_index: ex.turn_index,
        round_attn,
        word_attn,
        topic_attn,
        object_attn,
        ranking,
        gt_rank,
    }
}

fn check_sum(what: &str, dist: &[f64]) {
    let s: f64 = dist.iter().sum();
    assert!(
        (s - 1.0).abs() <= SUM_TOL,
        "{what}: distribution sums to {s}, not 1"
    );
}

pub fn write_traces(path: impl AsRef<Path>, traces: &[AttentionTrace]) -> std::io::Result<()> {
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(w, traces).map_err(std::io::Error::other)
}

pub fn read_traces(path: impl AsRef<Path>) -> std::io::Result<Vec<AttentionTrace>> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(std::io::Error::other)
}
