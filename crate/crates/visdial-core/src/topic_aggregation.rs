//! Word-level cross-attention from question words into history words.
//!
//! Attention logits come from transformed BiLSTM states, but the values are
//! the original word embeddings — the score/value split is the point of the
//! module. Per-round attended embeddings are aggregated across rounds with
//! the round distribution from context matching, then gated per word.

use crate::autodiff::{Graph, NodeId};
use crate::layers::{affine_rows, transform_rows, AffineIds};

#[derive(Debug, Clone, Copy)]
pub struct TopicAggIds {
    pub f_q: AffineIds,
    pub f_h: AffineIds,
    pub gate: AffineIds,
}

#[derive(Debug, Clone)]
pub struct TopicAggOutput {
    /// Gated topic representation per question word, `[n_q, 2·d_w]`.
    pub e_t: NodeId,
    /// Per-round word attention, each `[n_q, n_h_r]`.
    pub word_attn: Vec<NodeId>,
    /// Round-aggregated attended embeddings, `[n_q, d_w]`.
    pub agg_history: NodeId,
}

/// Cross-attention for one history round. Scores come from the states
/// (`u_q: [n_q, d_u]`, `u_h: [n_h, d_u]`), values from the embeddings
/// (`w_h: [n_h, d_w]`); masked history positions get weight exactly 0.
pub fn word_cross_attention(
    g: &mut Graph,
    u_q: NodeId,
    u_h: NodeId,
    w_h: NodeId,
    h_mask: &[bool],
    ids: &TopicAggIds,
) -> (NodeId, NodeId) {
    assert!(h_mask.iter().any(|&m| m), "word_cross_attention: all history tokens masked");
    let fq = transform_rows(g, u_q, &ids.f_q);
    let fh = transform_rows(g, u_h, &ids.f_h);
    let fht = g.transpose(fh);
    let logits = g.matmul(fq, fht);
    let attn = g.softmax_masked(logits, 1, h_mask);
    let w_tilde = g.matmul(attn, w_h);
    (attn, w_tilde)
}

/// Combine per-round attended embeddings with the round distribution:
/// `Σ_r a_r · w̃_r`, each `w̃_r: [n_q, d_w]`.
pub fn aggregate_rounds(g: &mut Graph, per_round: &[NodeId], round_attn: NodeId) -> NodeId {
    let t = g.shape(round_attn)[0];
    assert_eq!(per_round.len(), t, "aggregate_rounds: {} rounds vs {} weights", per_round.len(), t);
    let sh = g.shape(per_round[0]).to_vec();
    let flat_len = sh[0] * sh[1];
    let flats: Vec<NodeId> = per_round
        .iter()
        .map(|&r| {
            assert_eq!(g.shape(r), &sh[..], "aggregate_rounds: round shapes differ");
            g.reshape(r, vec![1, flat_len])
        })
        .collect();
    let stacked = g.concat(&flats, 0);
    let combined = g.weighted_sum(round_attn, stacked);
    g.reshape(combined, sh)
}

/// Per-word sigmoid gate over `[w_q, w̃_h]`; gate parameters are shared
/// across word positions.
pub fn word_gate(
    g: &mut Graph,
    w_q: NodeId,
    w_h_agg: NodeId,
    ids: &TopicAggIds,
) -> (NodeId, NodeId) {
    let cat = g.concat(&[w_q, w_h_agg], 1);
    let lin = affine_rows(g, cat, &ids.gate);
    let gate = g.sigmoid(lin);
    let e_t = g.mul(gate, cat);
    (e_t, gate)
}

/// Full module over all rounds.
/// `rounds` pairs each round's states with its embeddings and mask.
pub fn topic_aggregate(
    g: &mut Graph,
    u_q: NodeId,
    w_q: NodeId,
    rounds: &[(NodeId, NodeId, Vec<bool>)],
    round_attn: NodeId,
    ids: &TopicAggIds,
) -> TopicAggOutput {
    let mut word_attn = Vec::with_capacity(rounds.len());
    let mut per_round = Vec::with_capacity(rounds.len());
    for (u_h, w_h, mask) in rounds {
        let (attn, w_tilde) = word_cross_attention(g, u_q, *u_h, *w_h, mask, ids);
        word_attn.push(attn);
        per_round.push(w_tilde);
    }
    let agg_history = aggregate_rounds(g, &per_round, round_attn);
    let (e_t, _) = word_gate(g, w_q, agg_history, ids);
    TopicAggOutput { e_t, word_attn, agg_history }
}
