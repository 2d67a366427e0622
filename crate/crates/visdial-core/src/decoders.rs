//! Answer decoders: discriminative candidate ranking, generative token-level
//! scoring, and the multi-task combination.
//!
//! The discriminative decoder ranks candidates by dot product with the
//! encoder output. The generative decoder is a two-layer LSTM, teacher-forced
//! over `BOS + tokens`, whose initial hidden states are the (optionally
//! adapted) encoder output; candidate scores are unnormalized sums of token
//! log-likelihoods. At evaluation time the two candidate distributions are
//! averaged elementwise.

use crate::autodiff::{lstm_cell, Graph, LstmCellIds, NodeId};
use crate::encoders::{row, BOS, EOS};
use crate::layers::{affine_vec, AffineIds};

/// Parameter node ids for the generative decoder. `adapter` is present only
/// when the encoder width differs from the decoder hidden width.
#[derive(Debug, Clone, Copy)]
pub struct GenDecoderIds {
    pub adapter: Option<AffineIds>,
    pub layer1: LstmCellIds,
    pub layer2: LstmCellIds,
    pub out: AffineIds,
}

/// Candidate distribution from dot products with the encoder output.
/// `s_a: [c, d_a]`, `m_enc: [d_a]` (candidate width must equal encoder width).
pub fn discriminative_score(g: &mut Graph, s_a: NodeId, m_enc: NodeId) -> NodeId {
    let (c, d_a) = (g.shape(s_a)[0], g.shape(s_a)[1]);
    assert_eq!(
        g.shape(m_enc),
        &[d_a],
        "discriminative_score: candidate width {d_a} vs encoder output {:?}",
        g.shape(m_enc)
    );
    let m_col = g.reshape(m_enc, vec![d_a, 1]);
    let logits2 = g.matmul(s_a, m_col);
    let logits = g.reshape(logits2, vec![c]);
    g.softmax(logits, 0)
}

/// Multi-class cross entropy against the ground-truth candidate: `−log p_gt`.
pub fn discriminative_loss(g: &mut Graph, p_disc: NodeId, gt_index: usize) -> NodeId {
    let c = g.shape(p_disc)[0];
    assert!(gt_index < c, "discriminative_loss: gt index {gt_index} out of {c} candidates");
    let p_gt = g.select(p_disc, gt_index);
    let lp = g.log(p_gt);
    g.neg(lp)
}

/// `−log softmax(logits)[index]` via the shifted log-sum-exp identity. The
/// shift constant comes from the forward values; treating it as constant
/// leaves the gradient exact.
fn log_softmax_select(g: &mut Graph, logits: NodeId, index: usize) -> NodeId {
    let n = g.shape(logits)[0];
    let max = g.values(logits).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shift = g.constant(vec![-max; n], vec![n]);
    let shifted = g.add(logits, shift);
    let exps = g.exp(shifted);
    let total = g.sum(exps);
    let lse = g.log(total);
    let picked = g.select(shifted, index);
    let neg_lse = g.neg(lse);
    g.add(picked, neg_lse)
}

/// Teacher-forced sum of token log-likelihoods for one answer, including the
/// EOS step. Returns the `[1]` log-likelihood node and the number of summed
/// terms.
fn teacher_forced_loglik(
    g: &mut Graph,
    table: NodeId,
    tokens: &[usize],
    m_enc: NodeId,
    ids: &GenDecoderIds,
) -> (NodeId, usize) {
    let hidden = ids.layer1.hidden;
    let init = match &ids.adapter {
        Some(a) => affine_vec(g, m_enc, a),
        None => {
            assert_eq!(
                g.shape(m_enc),
                &[hidden],
                "generative decoder: encoder width {:?} needs an adapter for hidden {hidden}",
                g.shape(m_enc)
            );
            m_enc
        }
    };
    let mut h1 = init;
    let mut c1 = g.zeros(vec![hidden]);
    let mut h2 = init;
    let mut c2 = g.zeros(vec![hidden]);

    let mut inputs = Vec::with_capacity(tokens.len() + 1);
    inputs.push(BOS);
    inputs.extend_from_slice(tokens);
    let mut targets = Vec::with_capacity(tokens.len() + 1);
    targets.extend_from_slice(tokens);
    targets.push(EOS);

    let emb = g.gather_rows(table, &inputs);
    let mut total: Option<NodeId> = None;
    for (step, &target) in targets.iter().enumerate() {
        let x = row(g, emb, step);
        let (nh1, nc1) = lstm_cell(g, x, h1, c1, &ids.layer1);
        h1 = nh1;
        c1 = nc1;
        let (nh2, nc2) = lstm_cell(g, h1, h2, c2, &ids.layer2);
        h2 = nh2;
        c2 = nc2;
        let logits = affine_vec(g, h2, &ids.out);
        let lp = log_softmax_select(g, logits, target);
        total = Some(match total {
            Some(t) => g.add(t, lp),
            None => lp,
        });
    }
    (total.unwrap(), targets.len())
}

/// Negative log-likelihood of the ground-truth answer under teacher forcing,
/// summed over its tokens and the closing EOS.
pub fn generative_loss(
    g: &mut Graph,
    table: NodeId,
    gt_tokens: &[usize],
    m_enc: NodeId,
    ids: &GenDecoderIds,
) -> (NodeId, usize) {
    assert!(!gt_tokens.is_empty(), "generative_loss: empty answer");
    let (ll, terms) = teacher_forced_loglik(g, table, gt_tokens, m_enc, ids);
    (g.neg(ll), terms)
}

/// Score every candidate by its summed log-likelihood (no length
/// normalization) and softmax the sums into a distribution.
pub fn generative_candidate_scores(
    g: &mut Graph,
    table: NodeId,
    candidates: &[Vec<usize>],
    m_enc: NodeId,
    ids: &GenDecoderIds,
) -> NodeId {
    assert!(!candidates.is_empty(), "generative_candidate_scores: no candidates");
    let sums: Vec<NodeId> = candidates
        .iter()
        .map(|cand| teacher_forced_loglik(g, table, cand, m_enc, ids).0)
        .collect();
    let scores = g.concat(&sums, 0);
    g.softmax(scores, 0)
}

/// Elementwise average of the two candidate distributions.
pub fn fuse(p_disc: &[f64], p_gen: &[f64]) -> Vec<f64> {
    assert_eq!(p_disc.len(), p_gen.len(), "fuse: length mismatch");
    p_disc.iter().zip(p_gen).map(|(a, b)| (a + b) / 2.0).collect()
}

/// Multi-task objective: unweighted sum of both losses.
pub fn multitask_loss(g: &mut Graph, l_d: NodeId, l_g: NodeId) -> NodeId {
    g.add(l_d, l_g)
}
