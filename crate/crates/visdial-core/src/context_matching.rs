//! Sentence-level attention over dialog rounds plus gated fusion.
//!
//! The question sentence vector attends over the per-round history sentence
//! vectors (logits from a projected elementwise product of transformed
//! features), producing a round distribution and an attended history vector.
//! A sigmoid gate over the concatenated pair then filters out irrelevant
//! history, yielding the context representation.

use crate::autodiff::{Graph, NodeId};
use crate::layers::{affine_vec, transform_rows, transform_vec, AffineIds};

/// Parameter node ids for this module. `proj` maps the fused `d_f` feature to
/// one logit per round; its bias is a single shared scalar.
#[derive(Debug, Clone, Copy)]
pub struct ContextMatchIds {
    pub f_q: AffineIds,
    pub f_h: AffineIds,
    pub proj_w: NodeId,
    pub proj_b: NodeId,
    pub gate: AffineIds,
}

#[derive(Debug, Clone, Copy)]
pub struct ContextMatchOutput {
    /// Gated context representation, `[2·d_s]`.
    pub e_c: NodeId,
    /// Attention over rounds, `[t]`.
    pub round_attn: NodeId,
    /// Sigmoid gate activations, `[2·d_s]`, strictly inside (0,1).
    pub gate_values: NodeId,
    /// Attention-weighted history sentence vector, `[d_s]`.
    pub s_h_tilde: NodeId,
}

/// Attend the question sentence vector over `t` history rounds.
/// `s_q: [d_s]`, `s_h: [t, d_s]`; returns the round distribution `[t]` and
/// the weighted history vector `[d_s]`.
pub fn round_attention(
    g: &mut Graph,
    s_q: NodeId,
    s_h: NodeId,
    ids: &ContextMatchIds,
) -> (NodeId, NodeId) {
    let t = g.shape(s_h)[0];
    assert!(t >= 1, "round_attention: no history rounds");
    let fq = transform_vec(g, s_q, &ids.f_q);
    let fh = transform_rows(g, s_h, &ids.f_h);
    let fq_rows = g.broadcast_rows(fq, t);
    let fused = g.mul(fq_rows, fh);
    let logits2 = g.matmul(fused, ids.proj_w);
    let logits2 = g.add_bias(logits2, ids.proj_b);
    let logits = g.reshape(logits2, vec![t]);
    let attn = g.softmax(logits, 0);
    let s_h_tilde = g.weighted_sum(attn, s_h);
    (attn, s_h_tilde)
}

/// Gate the concatenation `[s_q, s̃_h]` with a sigmoid filter.
pub fn gate_fuse(
    g: &mut Graph,
    s_q: NodeId,
    s_h_tilde: NodeId,
    ids: &ContextMatchIds,
) -> (NodeId, NodeId) {
    let cat = g.concat(&[s_q, s_h_tilde], 0);
    let lin = affine_vec(g, cat, &ids.gate);
    let gate = g.sigmoid(lin);
    let e_c = g.mul(gate, cat);
    (e_c, gate)
}

/// Full module: round attention followed by the gate.
pub fn context_match(
    g: &mut Graph,
    s_q: NodeId,
    s_h: NodeId,
    ids: &ContextMatchIds,
) -> ContextMatchOutput {
    let (round_attn, s_h_tilde) = round_attention(g, s_q, s_h, ids);
    let (e_c, gate_values) = gate_fuse(g, s_q, s_h_tilde, ids);
    ContextMatchOutput { e_c, round_attn, gate_values, s_h_tilde }
}
