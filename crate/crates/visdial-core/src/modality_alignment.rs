//! Two-step alignment of text with visual features.
//!
//! Step one soft-aligns question-word topic representations to each object
//! (softmax over words per object) and fuses the attended topics with the
//! object features through a two-layer MLP. Step two re-weights the fused
//! objects by the sentence-level context vector via an L2-normalized gated
//! similarity, producing the final encoder output through a ReLU layer.

use crate::autodiff::{Graph, NodeId};
use crate::layers::{affine_rows, affine_vec, transform_rows, transform_vec, AffineIds};

#[derive(Debug, Clone, Copy)]
pub struct AlignIds {
    /// Topic transform, `2·d_w -> d_f`.
    pub f_l: AffineIds,
    /// Visual transform, `d_v -> d_f`.
    pub f_v: AffineIds,
    /// Fusion MLP: `d_v + 2·d_w -> d_f -> d_v` with ReLU between.
    pub mlp1: AffineIds,
    pub mlp2: AffineIds,
    /// Context-view transforms, `d_v + 2·d_s -> d_f` and `2·d_s -> d_f`.
    pub f_m: AffineIds,
    pub f_c: AffineIds,
    /// Object logit projection `[d_f, 1]` and its scalar bias.
    pub proj_w: NodeId,
    pub proj_b: NodeId,
    /// Output layer, `d_v + 2·d_s -> d_enc`.
    pub out: AffineIds,
}

#[derive(Debug, Clone, Copy)]
pub struct AlignmentOutput {
    /// Final encoder output, `[d_enc]`, elementwise non-negative.
    pub m_enc: NodeId,
    /// Word-to-object attention, `[n_q, n_v]`, column-stochastic over words.
    pub topic_attn: NodeId,
    /// Object attention, `[n_v]`.
    pub object_attn: NodeId,
    /// Fused topic-view object features, `[n_v, d_v]`.
    pub m_t: NodeId,
    /// Context-view aligned vector, `[d_v + 2·d_s]`.
    pub m_c_tilde: NodeId,
}

/// Align question-word topics to objects. `e_t: [n_q, 2·d_w]`,
/// `v: [n_v, d_v]`; the softmax runs over question words for each object,
/// masked on PAD positions. Returns the attention `[n_q, n_v]` and the
/// attended topic per object `[n_v, 2·d_w]`.
pub fn topic_view_align(
    g: &mut Graph,
    e_t: NodeId,
    v: NodeId,
    q_mask: &[bool],
    ids: &AlignIds,
) -> (NodeId, NodeId) {
    assert!(q_mask.iter().any(|&m| m), "topic_view_align: all question tokens masked");
    let fl = transform_rows(g, e_t, &ids.f_l);
    let fv = transform_rows(g, v, &ids.f_v);
    let fvt = g.transpose(fv);
    let logits = g.matmul(fl, fvt);
    let attn = g.softmax_masked(logits, 0, q_mask);
    let attn_t = g.transpose(attn);
    let e_t_attended = g.matmul(attn_t, e_t);
    (attn, e_t_attended)
}

/// Fuse each object with its attended topic: `MLP([v_k, ẽ_k])`, output
/// width `d_v`.
pub fn fuse_topic(g: &mut Graph, v: NodeId, e_t_attended: NodeId, ids: &AlignIds) -> NodeId {
    let cat = g.concat(&[v, e_t_attended], 1);
    let hidden = affine_rows(g, cat, &ids.mlp1);
    let hidden = g.relu(hidden);
    affine_rows(g, hidden, &ids.mlp2)
}

/// Re-align fused objects with the context vector. Returns the object
/// distribution `[n_v]` and the attended `[m_k, e_c]` vector.
pub fn context_view_align(
    g: &mut Graph,
    m_t: NodeId,
    e_c: NodeId,
    ids: &AlignIds,
) -> (NodeId, NodeId) {
    let n_v = g.shape(m_t)[0];
    let e_c_rows = g.broadcast_rows(e_c, n_v);
    let m_hat = g.concat(&[m_t, e_c_rows], 1);
    let fm = transform_rows(g, m_hat, &ids.f_m);
    let fc = transform_vec(g, e_c, &ids.f_c);
    let fc_rows = g.broadcast_rows(fc, n_v);
    let gated = g.mul(fm, fc_rows);
    let z = g.l2_normalize(gated, 1);
    let logits2 = g.matmul(z, ids.proj_w);
    let logits2 = g.add_bias(logits2, ids.proj_b);
    let logits = g.reshape(logits2, vec![n_v]);
    let attn = g.softmax(logits, 0);
    let m_c_tilde = g.weighted_sum(attn, m_hat);
    (attn, m_c_tilde)
}

/// Single ReLU feed-forward layer producing the encoder output.
pub fn encode_output(g: &mut Graph, m_c_tilde: NodeId, ids: &AlignIds) -> NodeId {
    let lin = affine_vec(g, m_c_tilde, &ids.out);
    g.relu(lin)
}

/// Full module: both alignment steps plus the output layer.
pub fn modality_align(
    g: &mut Graph,
    e_t: NodeId,
    e_c: NodeId,
    v: NodeId,
    q_mask: &[bool],
    ids: &AlignIds,
) -> AlignmentOutput {
    let (topic_attn, e_t_attended) = topic_view_align(g, e_t, v, q_mask, ids);
    let m_t = fuse_topic(g, v, e_t_attended, ids);
    let (object_attn, m_c_tilde) = context_view_align(g, m_t, e_c, ids);
    let m_enc = encode_output(g, m_c_tilde, ids);
    AlignmentOutput { m_enc, topic_attn, object_attn, m_t, m_c_tilde }
}
