//! Model configuration, the named parameter registry, and the full per-turn
//! forward pass wiring the encoders, the three attention modules, and both
//! decoders together.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, LstmCellIds, NodeId};
use crate::context_matching::{context_match, gate_fuse, ContextMatchIds, ContextMatchOutput};
use crate::data::DialogExample;
use crate::decoders::{
    discriminative_loss, discriminative_score, generative_candidate_scores, generative_loss,
    multitask_loss, GenDecoderIds,
};
use crate::encoders::{answer_encode, bilstm_encode, embed, real_tokens, token_mask, Vocabulary};
use crate::layers::AffineIds;
use crate::modality_alignment::{modality_align, AlignIds};
use crate::topic_aggregation::{topic_aggregate, word_gate, TopicAggIds, TopicAggOutput};

/// Which loss (and score distribution) training and evaluation use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Disc,
    Gen,
    Multitask,
}

impl std::str::FromStr for TrainMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "disc" => Ok(TrainMode::Disc),
            "gen" => Ok(TrainMode::Gen),
            "multitask" => Ok(TrainMode::Multitask),
            other => Err(format!("unknown mode `{other}` (expected disc|gen|multitask)")),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TrainMode::Disc => "disc",
            TrainMode::Gen => "gen",
            TrainMode::Multitask => "multitask",
        };
        f.write_str(s)
    }
}

impl TrainMode {
    pub fn uses_disc(&self) -> bool {
        matches!(self, TrainMode::Disc | TrainMode::Multitask)
    }
    pub fn uses_gen(&self) -> bool {
        matches!(self, TrainMode::Gen | TrainMode::Multitask)
    }
}

/// Architecture widths and training-side knobs. The defaults mirror the
/// full-scale setup (512 hidden units, GloVe-width embeddings, batch 32,
/// sequence caps 20/40); desk-scale runs use [`ModelConfig::toy`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_w: usize,
    pub hidden: usize,
    pub d_f: usize,
    pub d_enc: usize,
    pub dec_hidden: usize,
    pub max_q_len: usize,
    pub max_h_len: usize,
    pub batch_size: usize,
    /// Replace all history-derived features with zeros (ablation switch).
    pub history_blind: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_w: 300,
            hidden: 512,
            d_f: 512,
            d_enc: 512,
            dec_hidden: 512,
            max_q_len: 20,
            max_h_len: 40,
            batch_size: 32,
            history_blind: false,
        }
    }
}

impl ModelConfig {
    /// Desk-scale preset used by the toy-data workflows.
    pub fn toy() -> Self {
        ModelConfig {
            d_w: 24,
            hidden: 24,
            d_f: 24,
            d_enc: 32,
            dec_hidden: 32,
            ..ModelConfig::default()
        }
    }

    /// Smallest preset, used by the gradient-check suite.
    pub fn tiny() -> Self {
        ModelConfig {
            d_w: 8,
            hidden: 8,
            d_f: 8,
            d_enc: 8,
            dec_hidden: 8,
            batch_size: 4,
            ..ModelConfig::default()
        }
    }

    /// Sentence vector width (both BiLSTM directions).
    pub fn d_s(&self) -> usize {
        2 * self.hidden
    }

    /// Word state width (both BiLSTM directions).
    pub fn d_u(&self) -> usize {
        2 * self.hidden
    }
}

/// Config completed with the data-derived extents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub d_v: usize,
}

/// Parameter layout in declaration order; this order is the checkpoint
/// payload order.
pub fn param_layout(dims: &ModelDims) -> Vec<(String, Vec<usize>)> {
    let c = &dims.config;
    let (d_w, h, d_f, d_enc, dh) = (c.d_w, c.hidden, c.d_f, c.d_enc, c.dec_hidden);
    let (d_s, d_u, d_v, v) = (c.d_s(), c.d_u(), dims.d_v, dims.vocab_size);
    let mut out: Vec<(String, Vec<usize>)> = vec![("embed.table".into(), vec![v, d_w])];
    let lstm = |name: &str, d_in: usize, hidden: usize, out: &mut Vec<(String, Vec<usize>)>| {
        out.push((format!("{name}.w"), vec![d_in + hidden, 4 * hidden]));
        out.push((format!("{name}.b"), vec![4 * hidden]));
    };
    let affine = |name: &str, d_in: usize, d_out: usize, out: &mut Vec<(String, Vec<usize>)>| {
        out.push((format!("{name}.w"), vec![d_in, d_out]));
        out.push((format!("{name}.b"), vec![d_out]));
    };
    lstm("enc_q.fwd", d_w, h, &mut out);
    lstm("enc_q.bwd", d_w, h, &mut out);
    lstm("enc_h.fwd", d_w, h, &mut out);
    lstm("enc_h.bwd", d_w, h, &mut out);
    lstm("enc_a", d_w, d_enc, &mut out);
    affine("ctx.f_q", d_s, d_f, &mut out);
    affine("ctx.f_h", d_s, d_f, &mut out);
    out.push(("ctx.proj.w".into(), vec![d_f, 1]));
    out.push(("ctx.proj.b".into(), vec![1]));
    affine("ctx.gate", 2 * d_s, 2 * d_s, &mut out);
    affine("topic.f_q", d_u, d_f, &mut out);
    affine("topic.f_h", d_u, d_f, &mut out);
    affine("topic.gate", 2 * d_w, 2 * d_w, &mut out);
    affine("align.f_l", 2 * d_w, d_f, &mut out);
    affine("align.f_v", d_v, d_f, &mut out);
    affine("align.mlp1", d_v + 2 * d_w, d_f, &mut out);
    affine("align.mlp2", d_f, d_v, &mut out);
    affine("align.f_m", d_v + 2 * d_s, d_f, &mut out);
    affine("align.f_c", 2 * d_s, d_f, &mut out);
    out.push(("align.proj.w".into(), vec![d_f, 1]));
    out.push(("align.proj.b".into(), vec![1]));
    affine("align.out", d_v + 2 * d_s, d_enc, &mut out);
    if d_enc != dh {
        affine("dec.adapter", d_enc, dh, &mut out);
    }
    lstm("dec.l1", d_w, dh, &mut out);
    lstm("dec.l2", dh, dh, &mut out);
    affine("dec.out", dh, v, &mut out);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Named collection of every trainable tensor, in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    params: Vec<Param>,
}

impl ModelParams {
    /// Deterministic initialization: matrices uniform in ±1/√fan_in, biases
    /// zero, embedding PAD row zero.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = param_layout(&dims)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let values = if shape.len() == 2 {
                    let scale = 1.0 / (shape[0] as f64).sqrt();
                    let mut vals: Vec<f64> =
                        (0..n).map(|_| rng.random_range(-scale..scale)).collect();
                    if name == "embed.table" {
                        vals[..shape[1]].fill(0.0);
                    }
                    vals
                } else {
                    vec![0.0; n]
                };
                Param { name, shape, values }
            })
            .collect();
        ModelParams { dims, params }
    }

    /// Rebuild from (name, shape, values) triples in declaration order,
    /// validating against the layout for these dims.
    pub fn from_parts(
        dims: ModelDims,
        parts: Vec<Param>,
    ) -> Result<Self, String> {
        let layout = param_layout(&dims);
        if parts.len() != layout.len() {
            return Err(format!("{} tensors, layout expects {}", parts.len(), layout.len()));
        }
        for (p, (name, shape)) in parts.iter().zip(&layout) {
            if &p.name != name {
                return Err(format!("tensor `{}` where `{name}` was expected", p.name));
            }
            if &p.shape != shape {
                return Err(format!("tensor `{name}` has shape {:?}, expected {shape:?}", p.shape));
            }
            if p.values.len() != shape.iter().product::<usize>() {
                return Err(format!("tensor `{name}` has wrong element count"));
            }
        }
        Ok(ModelParams { dims, params: parts })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn values_mut(&mut self, idx: usize) -> &mut Vec<f64> {
        &mut self.params[idx].values
    }

    pub fn get(&self, name: &str) -> &Param {
        self.params
            .iter()
            .find(|p| p.name == name)
            .unwrap_or_else(|| panic!("no parameter named `{name}`"))
    }

    /// Total trainable element count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Insert every parameter as a gradient-carrying leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        let mut by_name: HashMap<&str, NodeId> = HashMap::new();
        let mut ordered = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let id = g.leaf(p.values.clone(), p.shape.clone());
            by_name.insert(p.name.as_str(), id);
            ordered.push(id);
        }
        let cfg = &self.dims.config;
        let id = |name: &str| *by_name.get(name).unwrap_or_else(|| panic!("missing `{name}`"));
        let affine = |name: &str| AffineIds { w: id(&format!("{name}.w")), b: id(&format!("{name}.b")) };
        let lstm = |name: &str, hidden: usize| LstmCellIds {
            w: id(&format!("{name}.w")),
            b: id(&format!("{name}.b")),
            hidden,
        };
        BoundModel {
            embed: id("embed.table"),
            enc_q_fwd: lstm("enc_q.fwd", cfg.hidden),
            enc_q_bwd: lstm("enc_q.bwd", cfg.hidden),
            enc_h_fwd: lstm("enc_h.fwd", cfg.hidden),
            enc_h_bwd: lstm("enc_h.bwd", cfg.hidden),
            enc_a: lstm("enc_a", cfg.d_enc),
            ctx: ContextMatchIds {
                f_q: affine("ctx.f_q"),
                f_h: affine("ctx.f_h"),
                proj_w: id("ctx.proj.w"),
                proj_b: id("ctx.proj.b"),
                gate: affine("ctx.gate"),
            },
            topic: TopicAggIds {
                f_q: affine("topic.f_q"),
                f_h: affine("topic.f_h"),
                gate: affine("topic.gate"),
            },
            align: AlignIds {
                f_l: affine("align.f_l"),
                f_v: affine("align.f_v"),
                mlp1: affine("align.mlp1"),
                mlp2: affine("align.mlp2"),
                f_m: affine("align.f_m"),
                f_c: affine("align.f_c"),
                proj_w: id("align.proj.w"),
                proj_b: id("align.proj.b"),
                out: affine("align.out"),
            },
            gen: GenDecoderIds {
                adapter: if cfg.d_enc != cfg.dec_hidden { Some(affine("dec.adapter")) } else { None },
                layer1: lstm("dec.l1", cfg.dec_hidden),
                layer2: lstm("dec.l2", cfg.dec_hidden),
                out: affine("dec.out"),
            },
            ordered,
        }
    }

    /// Collect d(loss)/d(param) for every parameter after a backward pass.
    /// The embedding PAD row is frozen: its gradient is zeroed here.
    pub fn harvest_grads(&self, g: &Graph, bound: &BoundModel) -> Vec<Vec<f64>> {
        let mut grads: Vec<Vec<f64>> = bound
            .ordered
            .iter()
            .map(|&id| g.grad(id).expect("parameter leaf has a gradient").to_vec())
            .collect();
        grads[0][..self.dims.config.d_w].fill(0.0);
        grads
    }
}

/// Node ids of every bound parameter, grouped per module.
pub struct BoundModel {
    pub embed: NodeId,
    pub enc_q_fwd: LstmCellIds,
    pub enc_q_bwd: LstmCellIds,
    pub enc_h_fwd: LstmCellIds,
    pub enc_h_bwd: LstmCellIds,
    pub enc_a: LstmCellIds,
    pub ctx: ContextMatchIds,
    pub topic: TopicAggIds,
    pub align: AlignIds,
    pub gen: GenDecoderIds,
    pub ordered: Vec<NodeId>,
}

/// One dialog turn mapped to token ids and a flat visual matrix, truncated
/// to the configured maximum lengths.
#[derive(Debug, Clone)]
pub struct PreparedTurn {
    pub image_id: String,
    pub turn_index: usize,
    pub visual: Vec<f64>,
    pub n_v: usize,
    pub d_v: usize,
    pub question: Vec<usize>,
    /// Round 0 is the caption; later rounds are question+answer token runs.
    pub rounds: Vec<Vec<usize>>,
    pub candidates: Vec<Vec<usize>>,
    pub gt_index: usize,
    pub relevance: Option<Vec<f64>>,
}

pub fn prepare(ex: &DialogExample, vocab: &Vocabulary, cfg: &ModelConfig) -> PreparedTurn {
    let truncate = |mut ids: Vec<usize>, cap: usize| {
        ids.truncate(cap);
        ids
    };
    let question = truncate(vocab.encode(&ex.question), cfg.max_q_len);
    let mut rounds = vec![truncate(vocab.encode(&ex.caption), cfg.max_h_len)];
    for (q, a) in &ex.rounds {
        let mut ids = vocab.encode(q);
        ids.extend(vocab.encode(a));
        rounds.push(truncate(ids, cfg.max_h_len));
    }
    let candidates = ex.candidates.iter().map(|c| vocab.encode(c)).collect();
    let n_v = ex.visual.len();
    let d_v = ex.visual[0].len();
    let visual = ex.visual.iter().flatten().copied().collect();
    PreparedTurn {
        image_id: ex.image_id.clone(),
        turn_index: ex.turn_index,
        visual,
        n_v,
        d_v,
        question,
        rounds,
        candidates,
        gt_index: ex.gt_index,
        relevance: ex.relevance.clone(),
    }
}

/// Everything a forward pass produces: loss nodes for training, candidate
/// distributions for ranking, and the attention nodes for tracing.
pub struct TurnForward {
    pub m_enc: NodeId,
    pub loss: NodeId,
    pub loss_disc: Option<NodeId>,
    pub loss_gen: Option<NodeId>,
    pub p_disc: Option<NodeId>,
    pub p_gen: Option<NodeId>,
    pub round_attn: NodeId,
    pub word_attn: Vec<NodeId>,
    pub topic_attn: NodeId,
    pub object_attn: NodeId,
}

/// Run the whole model on one prepared turn. `compute_scores` additionally
/// materializes the generative candidate distribution (the expensive part of
/// evaluation); the discriminative distribution falls out of the loss.
pub fn forward_turn(
    g: &mut Graph,
    b: &BoundModel,
    dims: &ModelDims,
    ex: &PreparedTurn,
    mode: TrainMode,
    compute_scores: bool,
) -> TurnForward {
    let cfg = &dims.config;
    assert_eq!(ex.d_v, dims.d_v, "visual width {} does not match model {}", ex.d_v, dims.d_v);

    let q_mask = token_mask(&ex.question);
    let q_emb = embed(g, b.embed, &ex.question);
    let q_enc = bilstm_encode(g, q_emb, &q_mask, &b.enc_q_fwd, &b.enc_q_bwd);

    let t = ex.rounds.len();
    let (ctx_out, topic_out) = if cfg.history_blind {
        // ablation: history features replaced by zeros, gates still applied
        let round_attn = g.constant(vec![1.0 / t as f64; t], vec![t]);
        let zero_sent = g.zeros(vec![cfg.d_s()]);
        let (e_c, gate_values) = gate_fuse(g, q_enc.sentence, zero_sent, &b.ctx);
        let zero_words = g.zeros(vec![ex.question.len(), cfg.d_w]);
        let (e_t, _) = word_gate(g, q_enc.word_embeddings, zero_words, &b.topic);
        (
            ContextMatchOutput { e_c, round_attn, gate_values, s_h_tilde: zero_sent },
            TopicAggOutput { e_t, word_attn: Vec::new(), agg_history: zero_words },
        )
    } else {
        let mut sentence_rows = Vec::with_capacity(t);
        let mut round_encs = Vec::with_capacity(t);
        for round in &ex.rounds {
            let mask = token_mask(round);
            let emb = embed(g, b.embed, round);
            let enc = bilstm_encode(g, emb, &mask, &b.enc_h_fwd, &b.enc_h_bwd);
            sentence_rows.push(g.reshape(enc.sentence, vec![1, cfg.d_s()]));
            round_encs.push((enc.states, enc.word_embeddings, mask));
        }
        let s_h = g.concat(&sentence_rows, 0);
        let ctx = context_match(g, q_enc.sentence, s_h, &b.ctx);
        let topic = topic_aggregate(
            g,
            q_enc.states,
            q_enc.word_embeddings,
            &round_encs,
            ctx.round_attn,
            &b.topic,
        );
        (ctx, topic)
    };

    let v = g.constant(ex.visual.clone(), vec![ex.n_v, ex.d_v]);
    let align = modality_align(g, topic_out.e_t, ctx_out.e_c, v, &q_mask, &b.align);

    let (p_disc, loss_disc) = if mode.uses_disc() {
        let mut cand_rows = Vec::with_capacity(ex.candidates.len());
        for cand in &ex.candidates {
            let mask = token_mask(cand);
            let emb = embed(g, b.embed, cand);
            let h = answer_encode(g, emb, &mask, &b.enc_a);
            cand_rows.push(g.reshape(h, vec![1, cfg.d_enc]));
        }
        let s_a = g.concat(&cand_rows, 0);
        let p = discriminative_score(g, s_a, align.m_enc);
        let l = discriminative_loss(g, p, ex.gt_index);
        (Some(p), Some(l))
    } else {
        (None, None)
    };

    let loss_gen = if mode.uses_gen() {
        let gt = real_tokens(&ex.candidates[ex.gt_index]);
        let (l, _) = generative_loss(g, b.embed, gt, align.m_enc, &b.gen);
        Some(l)
    } else {
        None
    };

    let p_gen = if compute_scores && mode.uses_gen() {
        let cands: Vec<Vec<usize>> =
            ex.candidates.iter().map(|c| real_tokens(c).to_vec()).collect();
        Some(generative_candidate_scores(g, b.embed, &cands, align.m_enc, &b.gen))
    } else {
        None
    };

    let loss = match mode {
        TrainMode::Disc => loss_disc.unwrap(),
        TrainMode::Gen => loss_gen.unwrap(),
        TrainMode::Multitask => multitask_loss(g, loss_disc.unwrap(), loss_gen.unwrap()),
    };

    TurnForward {
        m_enc: align.m_enc,
        loss,
        loss_disc,
        loss_gen,
        p_disc,
        p_gen,
        round_attn: ctx_out.round_attn,
        word_attn: topic_out.word_attn,
        topic_attn: align.topic_attn,
        object_attn: align.object_attn,
    }
}

/// The candidate distribution evaluation ranks with, per mode. Multi-task
/// evaluation averages the two decoders' distributions.
pub fn ranking_scores(g: &Graph, fwd: &TurnForward, mode: TrainMode) -> Vec<f64> {
    match mode {
        TrainMode::Disc => g.values(fwd.p_disc.expect("disc scores")).to_vec(),
        TrainMode::Gen => g.values(fwd.p_gen.expect("gen scores")).to_vec(),
        TrainMode::Multitask => crate::decoders::fuse(
            g.values(fwd.p_disc.expect("disc scores")),
            g.values(fwd.p_gen.expect("gen scores")),
        ),
    }
}

/// Placeholder-free sanity check used by tests: all recorded attention
/// distributions of a forward pass sum to one.
pub fn attention_sums(g: &Graph, fwd: &TurnForward) -> Vec<f64> {
    let mut sums = vec![g.values(fwd.round_attn).iter().sum::<f64>()];
    sums.push(g.values(fwd.object_attn).iter().sum::<f64>());
    for &attn in &fwd.word_attn {
        let sh = g.shape(attn).to_vec();
        for i in 0..sh[0] {
            sums.push(g.values(attn)[i * sh[1]..(i + 1) * sh[1]].iter().sum::<f64>());
        }
    }
    let sh = g.shape(fwd.topic_attn).to_vec();
    for k in 0..sh[1] {
        sums.push((0..sh[0]).map(|i| g.values(fwd.topic_attn)[i * sh[1] + k]).sum::<f64>());
    }
    sums
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_toy, ToyConfig};
    use crate::encoders::PAD;

    fn tiny_setup() -> (ModelParams, Vec<PreparedTurn>) {
        let ds = generate_toy(&ToyConfig {
            n_dialogs: 3,
            vocab_size: 48,
            d_v: 6,
            n_v: 4,
            candidates: 5,
            turns: 2,
            ..ToyConfig::default()
        })
        .unwrap();
        let vocab = ds.build_vocab();
        let cfg = ModelConfig::tiny();
        let dims = ModelDims { config: cfg.clone(), vocab_size: vocab.len(), d_v: ds.d_v() };
        let params = ModelParams::init(dims, 7);
        let prepared = ds.examples().iter().map(|e| prepare(e, &vocab, &cfg)).collect();
        (params, prepared)
    }

    #[test]
    fn init_is_deterministic_and_pad_row_is_zero() {
        let dims = ModelDims { config: ModelConfig::tiny(), vocab_size: 12, d_v: 6 };
        let a = ModelParams::init(dims.clone(), 3);
        let b = ModelParams::init(dims, 3);
        assert_eq!(a, b);
        let emb = a.get("embed.table");
        assert!(emb.values[..a.dims.config.d_w].iter().all(|&v| v == 0.0));
        assert!(emb.values[a.dims.config.d_w..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn layout_has_no_duplicate_names_and_one_question_encoder() {
        let dims = ModelDims { config: ModelConfig::tiny(), vocab_size: 12, d_v: 6 };
        let layout = param_layout(&dims);
        let names: std::collections::HashSet<&str> =
            layout.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names.len(), layout.len());
        // exactly one question-BiLSTM parameter set serves both the
        // sentence path and the word path
        let q_params: Vec<&str> =
            names.iter().copied().filter(|n| n.starts_with("enc_q.")).collect();
        assert_eq!(q_params.len(), 4);
    }

    #[test]
    fn adapter_exists_only_when_widths_differ() {
        let mut cfg = ModelConfig::tiny();
        cfg.dec_hidden = cfg.d_enc;
        let dims = ModelDims { config: cfg.clone(), vocab_size: 12, d_v: 6 };
        assert!(!param_layout(&dims).iter().any(|(n, _)| n.starts_with("dec.adapter")));
        cfg.dec_hidden = cfg.d_enc + 2;
        let dims = ModelDims { config: cfg, vocab_size: 12, d_v: 6 };
        assert!(param_layout(&dims).iter().any(|(n, _)| n.starts_with("dec.adapter")));
    }

    #[test]
    fn forward_losses_are_finite_and_scores_are_distributions() {
        let (params, prepared) = tiny_setup();
        for mode in [TrainMode::Disc, TrainMode::Gen, TrainMode::Multitask] {
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let fwd = forward_turn(&mut g, &bound, &params.dims, &prepared[1], mode, true);
            assert!(g.scalar_value(fwd.loss).is_finite());
            let scores = ranking_scores(&g, &fwd, mode);
            assert_eq!(scores.len(), prepared[1].candidates.len());
            assert!((scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for s in attention_sums(&g, &fwd) {
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn multitask_loss_is_sum_of_parts() {
        let (params, prepared) = tiny_setup();
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let fwd =
            forward_turn(&mut g, &bound, &params.dims, &prepared[0], TrainMode::Multitask, false);
        let ld = g.scalar_value(fwd.loss_disc.unwrap());
        let lg = g.scalar_value(fwd.loss_gen.unwrap());
        assert_eq!(g.scalar_value(fwd.loss), ld + lg);
    }

    #[test]
    fn padding_extension_leaves_the_loss_bit_identical() {
        let (params, prepared) = tiny_setup();
        let base = prepared[2].clone();
        let mut padded = base.clone();
        padded.question.extend([PAD, PAD]);
        padded.rounds[0].extend([PAD, PAD, PAD]);
        for cand in &mut padded.candidates {
            cand.push(PAD);
        }
        for mode in [TrainMode::Disc, TrainMode::Multitask] {
            let run = |ex: &PreparedTurn| {
                let mut g = Graph::new();
                let bound = params.bind(&mut g);
                let fwd = forward_turn(&mut g, &bound, &params.dims, ex, mode, false);
                g.scalar_value(fwd.loss)
            };
            assert_eq!(run(&base).to_bits(), run(&padded).to_bits());
        }
    }

    #[test]
    fn question_encoder_feeds_both_paths() {
        let (params, prepared) = tiny_setup();
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let fwd = forward_turn(&mut g, &bound, &params.dims, &prepared[1], TrainMode::Disc, false);
        g.backward(fwd.loss);
        // the single question-BiLSTM leaf collects gradient from the
        // sentence-level path and the word-level path at once
        assert!(g.grad(bound.enc_q_fwd.w).unwrap().iter().any(|&v| v != 0.0));
        assert!(g.grad(bound.enc_h_fwd.w).unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn blind_config_ignores_history_content() {
        let (mut params, prepared) = tiny_setup();
        params.dims.config.history_blind = true;
        let base = prepared[1].clone();
        let mut scrambled = base.clone();
        scrambled.rounds[0].reverse();
        let run = |ex: &PreparedTurn| {
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let fwd = forward_turn(&mut g, &bound, &params.dims, ex, TrainMode::Disc, false);
            g.scalar_value(fwd.loss)
        };
        assert_eq!(run(&base).to_bits(), run(&scrambled).to_bits());
    }

    #[test]
    fn harvest_freezes_embedding_pad_row() {
        let (params, prepared) = tiny_setup();
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let fwd = forward_turn(&mut g, &bound, &params.dims, &prepared[0], TrainMode::Disc, false);
        g.backward(fwd.loss);
        let grads = params.harvest_grads(&g, &bound);
        assert_eq!(grads.len(), params.len());
        assert!(grads[0][..params.dims.config.d_w].iter().all(|&v| v == 0.0));
        assert!(grads[0][params.dims.config.d_w..].iter().any(|&v| v != 0.0));
    }
}
