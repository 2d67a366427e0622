//! Token embedding and sequence encoding for questions, history rounds, and
//! answer candidates.
//!
//! Questions and history use two separate BiLSTMs (each shared across all of
//! its uses); answer candidates use a forward-only LSTM whose hidden width
//! equals the encoder output width. PAD positions are skipped entirely: state
//! rows at padded positions are zero and the sentence vector is built from
//! the last real token, so appending padding never changes any output.

use std::collections::HashMap;
use std::io::BufRead;

use thiserror::Error;

use crate::autodiff::{lstm_cell, Graph, LstmCellIds, NodeId};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";

/// Token-to-id map with dense ids and fixed reserved slots.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from tokens in first-occurrence order. Tokens are lowercased;
    /// duplicates and the reserved special tokens are ignored.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocabulary { tokens: Vec::new(), ids: HashMap::new() };
        for special in [PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN] {
            v.ids.insert(special.to_string(), v.tokens.len());
            v.tokens.push(special.to_string());
        }
        for tok in tokens {
            let tok = tok.to_lowercase();
            if !v.ids.contains_key(&tok) {
                v.ids.insert(tok.clone(), v.tokens.len());
                v.tokens.push(tok);
            }
        }
        v
    }

    /// Rebuild from an id-ordered token list (e.g. out of a checkpoint).
    pub fn from_id_order(tokens: Vec<String>) -> Self {
        assert!(tokens.len() >= 4, "vocabulary must include the reserved tokens");
        assert_eq!(tokens[PAD], PAD_TOKEN, "vocabulary id 0 must be {PAD_TOKEN}");
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id for a token, falling back to UNK.
    pub fn id(&self, token: &str) -> usize {
        self.ids.get(&token.to_lowercase()).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// One encoded token sequence: gathered word embeddings `[n, d_w]`, BiLSTM
/// states `[n, 2·hidden]` (zero rows at PAD), the sentence vector
/// `[→u_last, ←u_first]`, and the token mask.
#[derive(Debug, Clone)]
pub struct EncodedSequence {
    pub word_embeddings: NodeId,
    pub states: NodeId,
    pub sentence: NodeId,
    pub mask: Vec<bool>,
    pub real_len: usize,
}

/// Number of leading real (unmasked) tokens. The mask must be a true-prefix:
/// padding only ever follows the real tokens.
pub fn real_prefix_len(mask: &[bool]) -> usize {
    let len = mask.iter().take_while(|&&m| m).count();
    assert!(
        mask[len..].iter().all(|&m| !m),
        "mask must be contiguous: real tokens followed by padding"
    );
    len
}

/// Mask derived from token ids: true until the first PAD.
pub fn token_mask(ids: &[usize]) -> Vec<bool> {
    ids.iter().map(|&id| id != PAD).collect()
}

/// The real (pre-padding) prefix of a token id sequence.
pub fn real_tokens(ids: &[usize]) -> &[usize] {
    let mask = token_mask(ids);
    &ids[..real_prefix_len(&mask)]
}

/// Row `i` of a 2-d node as a 1-d node.
pub fn row(g: &mut Graph, m: NodeId, i: usize) -> NodeId {
    let sh = g.shape(m);
    assert_eq!(sh.len(), 2, "row: expects 2-d, got {sh:?}");
    let (r, c) = (sh[0], sh[1]);
    assert!(i < r, "row: index {i} out of range {r}");
    let flat = g.reshape(m, vec![r * c]);
    g.slice(flat, i * c, c)
}

/// Gather embedding rows for a token id sequence: `[n, d_w]`. PAD rows come
/// out zero because row 0 of the table is held at zero.
pub fn embed(g: &mut Graph, table: NodeId, ids: &[usize]) -> NodeId {
    g.gather_rows(table, ids)
}

/// Encode a sequence with forward+backward LSTMs sharing no parameters.
/// Padded positions produce zero state rows; the sentence vector concatenates
/// the forward state at the last real token with the backward state at the
/// first token.
pub fn bilstm_encode(
    g: &mut Graph,
    emb: NodeId,
    mask: &[bool],
    fwd: &LstmCellIds,
    bwd: &LstmCellIds,
) -> EncodedSequence {
    let n = g.shape(emb)[0];
    assert_eq!(n, mask.len(), "mask length {} does not match {} tokens", mask.len(), n);
    let real_len = real_prefix_len(mask);
    assert!(real_len > 0, "cannot encode a fully masked sequence");
    let hidden = fwd.hidden;
    assert_eq!(bwd.hidden, hidden, "forward/backward hidden sizes differ");

    let xs: Vec<NodeId> = (0..real_len).map(|i| row(g, emb, i)).collect();

    let mut h = g.zeros(vec![hidden]);
    let mut c = g.zeros(vec![hidden]);
    let mut fwd_states = Vec::with_capacity(real_len);
    for &x in &xs {
        let (nh, nc) = lstm_cell(g, x, h, c, fwd);
        h = nh;
        c = nc;
        fwd_states.push(nh);
    }

    let mut h = g.zeros(vec![hidden]);
    let mut c = g.zeros(vec![hidden]);
    let mut bwd_states = vec![0; real_len];
    for i in (0..real_len).rev() {
        let (nh, nc) = lstm_cell(g, xs[i], h, c, bwd);
        h = nh;
        c = nc;
        bwd_states[i] = nh;
    }

    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let r = if i < real_len {
            let joint = g.concat(&[fwd_states[i], bwd_states[i]], 0);
            g.reshape(joint, vec![1, 2 * hidden])
        } else {
            g.zeros(vec![1, 2 * hidden])
        };
        rows.push(r);
    }
    let states = g.concat(&rows, 0);
    let sentence = g.concat(&[fwd_states[real_len - 1], bwd_states[0]], 0);

    EncodedSequence { word_embeddings: emb, states, sentence, mask: mask.to_vec(), real_len }
}

/// Forward-only LSTM over a candidate; returns the hidden state at the last
/// real token.
pub fn answer_encode(g: &mut Graph, emb: NodeId, mask: &[bool], cell: &LstmCellIds) -> NodeId {
    let n = g.shape(emb)[0];
    assert_eq!(n, mask.len(), "mask length {} does not match {} tokens", mask.len(), n);
    let real_len = real_prefix_len(mask);
    assert!(real_len > 0, "cannot encode a fully masked sequence");
    let mut h = g.zeros(vec![cell.hidden]);
    let mut c = g.zeros(vec![cell.hidden]);
    for i in 0..real_len {
        let x = row(g, emb, i);
        let (nh, nc) = lstm_cell(g, x, h, c, cell);
        h = nh;
        c = nc;
    }
    h
}

#[derive(Debug, Error)]
pub enum EmbeddingFileError {
    #[error("embedding file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parse a plain-text embedding table: one token per line followed by `d_w`
/// whitespace-separated reals.
pub fn read_embedding_file<R: BufRead>(
    reader: R,
    d_w: usize,
) -> Result<Vec<(String, Vec<f64>)>, EmbeddingFileError> {
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts
            .next()
            .ok_or_else(|| EmbeddingFileError::Parse { line: idx + 1, msg: "missing token".into() })?
            .to_lowercase();
        let vals: Result<Vec<f64>, _> = parts.map(|p| p.parse::<f64>()).collect();
        let vals = vals.map_err(|e| EmbeddingFileError::Parse {
            line: idx + 1,
            msg: format!("bad number: {e}"),
        })?;
        if vals.len() != d_w {
            return Err(EmbeddingFileError::Parse {
                line: idx + 1,
                msg: format!("expected {d_w} values, found {}", vals.len()),
            });
        }
        rows.push((token, vals));
    }
    Ok(rows)
}

/// Overwrite embedding-table rows for tokens present in the vocabulary.
/// The PAD row stays zero. Returns how many rows were applied.
pub fn apply_embedding_rows(
    table: &mut [f64],
    vocab: &Vocabulary,
    d_w: usize,
    rows: &[(String, Vec<f64>)],
) -> usize {
    let mut applied = 0;
    for (token, vals) in rows {
        let id = match vocab.ids.get(token) {
            Some(&id) if id != PAD => id,
            _ => continue,
        };
        table[id * d_w..(id + 1) * d_w].copy_from_slice(vals);
        applied += 1;
    }
    applied
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seeded(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-0.8..0.8)).collect()
    }

    fn table_node(g: &mut Graph, vocab_len: usize, d_w: usize, seed: u64) -> NodeId {
        let mut vals = seeded(seed, vocab_len * d_w);
        vals[..d_w].fill(0.0); // PAD row
        g.leaf(vals, vec![vocab_len, d_w])
    }

    fn cell_ids(g: &mut Graph, d_in: usize, hidden: usize, seed: u64) -> LstmCellIds {
        let w = g.leaf(seeded(seed, (d_in + hidden) * 4 * hidden), vec![d_in + hidden, 4 * hidden]);
        let b = g.leaf(seeded(seed + 1, 4 * hidden), vec![4 * hidden]);
        LstmCellIds { w, b, hidden }
    }

    #[test]
    fn vocabulary_reserved_ids_and_lookup() {
        let v = Vocabulary::build(["Dog", "cat", "dog"]);
        assert_eq!(v.id(PAD_TOKEN), PAD);
        assert_eq!(v.id(UNK_TOKEN), UNK);
        assert_eq!(v.id("DOG"), 4);
        assert_eq!(v.id("cat"), 5);
        assert_eq!(v.id("zebra"), UNK);
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn embed_pad_row_is_zero() {
        let mut g = Graph::new();
        let t = table_node(&mut g, 6, 3, 1);
        let e = embed(&mut g, t, &[PAD]);
        assert_eq!(g.values(e), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn embed_repeated_id_gives_identical_rows() {
        let mut g = Graph::new();
        let t = table_node(&mut g, 6, 3, 2);
        let e = embed(&mut g, t, &[4, 4]);
        let v = g.values(e);
        assert_eq!(&v[..3], &v[3..]);
    }

    #[test]
    fn embed_gradient_only_reaches_gathered_rows() {
        let mut g = Graph::new();
        let t = table_node(&mut g, 5, 2, 3);
        let e = embed(&mut g, t, &[2, 4, 2]);
        let s = g.sum(e);
        g.backward(s);
        let grad = g.grad(t).unwrap();
        assert_eq!(&grad[2 * 2..2 * 2 + 2], &[2.0, 2.0]); // id 2 gathered twice
        assert_eq!(&grad[4 * 2..4 * 2 + 2], &[1.0, 1.0]);
        assert_eq!(&grad[0..2], &[0.0, 0.0]);
        assert_eq!(&grad[6..8], &[0.0, 0.0]);
    }

    #[test]
    fn bilstm_single_token_sentence_equals_state() {
        let mut g = Graph::new();
        let t = table_node(&mut g, 6, 3, 4);
        let fwd = cell_ids(&mut g, 3, 2, 10);
        let bwd = cell_ids(&mut g, 3, 2, 12);
        let e = embed(&mut g, t, &[4]);
        let enc = bilstm_encode(&mut g, e, &[true], &fwd, &bwd);
        assert_eq!(g.shape(enc.states), &[1, 4]);
        assert_eq!(g.values(enc.sentence), g.values(enc.states));
    }

    #[test]
    fn bilstm_padding_does_not_change_anything() {
        let make = |pads: usize| {
            let mut g = Graph::new();
            let t = table_node(&mut g, 8, 3, 5);
            let fwd = cell_ids(&mut g, 3, 2, 20);
            let bwd = cell_ids(&mut g, 3, 2, 22);
            let mut ids = vec![4, 5, 6];
            let mut mask = vec![true; 3];
            ids.extend(std::iter::repeat(PAD).take(pads));
            mask.extend(std::iter::repeat(false).take(pads));
            let e = embed(&mut g, t, &ids);
            let enc = bilstm_encode(&mut g, e, &mask, &fwd, &bwd);
            let states = g.values(enc.states).to_vec();
            let sentence = g.values(enc.sentence).to_vec();
            (states, sentence)
        };
        let (s0, sent0) = make(0);
        let (s3, sent3) = make(3);
        assert!(sent0.iter().zip(&sent3).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(s0.iter().zip(&s3[..s0.len()]).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(s3[s0.len()..].iter().all(|&v| v == 0.0));
    }

    // Plain-loop LSTM oracle, no graph involvement.
    fn oracle_cell(
        w: &[f64],
        b: &[f64],
        hidden: usize,
        x: &[f64],
        h: &[f64],
        c: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let d_in = x.len();
        let mut xh = Vec::with_capacity(d_in + hidden);
        xh.extend_from_slice(x);
        xh.extend_from_slice(h);
        let cols = 4 * hidden;
        let mut z = b.to_vec();
        for (p, &xv) in xh.iter().enumerate() {
            for j in 0..cols {
                z[j] += xv * w[p * cols + j];
            }
        }
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut nc = vec![0.0; hidden];
        let mut nh = vec![0.0; hidden];
        for j in 0..hidden {
            let i = sig(z[j]);
            let f = sig(z[hidden + j]);
            let cand = z[2 * hidden + j].tanh();
            let o = sig(z[3 * hidden + j]);
            nc[j] = f * c[j] + i * cand;
            nh[j] = o * nc[j].tanh();
        }
        (nh, nc)
    }

    #[test]
    fn bilstm_matches_manual_unroll_oracle() {
        let d_w = 3;
        let hidden = 2;
        let ids = [4usize, 5, 6, 7];
        let mut g = Graph::new();
        let t = table_node(&mut g, 9, d_w, 6);
        let fwd = cell_ids(&mut g, d_w, hidden, 30);
        let bwd = cell_ids(&mut g, d_w, hidden, 32);
        let e = embed(&mut g, t, &ids);
        let enc = bilstm_encode(&mut g, e, &[true; 4], &fwd, &bwd);

        let tv = g.values(t).to_vec();
        let wf = g.values(fwd.w).to_vec();
        let bf = g.values(fwd.b).to_vec();
        let wb = g.values(bwd.w).to_vec();
        let bb = g.values(bwd.b).to_vec();
        let embs: Vec<Vec<f64>> =
            ids.iter().map(|&i| tv[i * d_w..(i + 1) * d_w].to_vec()).collect();

        let mut h = vec![0.0; hidden];
        let mut c = vec![0.0; hidden];
        let mut f_states = Vec::new();
        for x in &embs {
            let (nh, nc) = oracle_cell(&wf, &bf, hidden, x, &h, &c);
            h = nh.clone();
            c = nc;
            f_states.push(nh);
        }
        let mut h = vec![0.0; hidden];
        let mut c = vec![0.0; hidden];
        let mut b_states = vec![Vec::new(); 4];
        for i in (0..4).rev() {
            let (nh, nc) = oracle_cell(&wb, &bb, hidden, &embs[i], &h, &c);
            h = nh.clone();
            c = nc;
            b_states[i] = nh;
        }
        let got = g.values(enc.states);
        for i in 0..4 {
            for j in 0..hidden {
                assert!((got[i * 4 + j] - f_states[i][j]).abs() < 1e-12);
                assert!((got[i * 4 + hidden + j] - b_states[i][j]).abs() < 1e-12);
            }
        }
        let sent = g.values(enc.sentence);
        for j in 0..hidden {
            assert!((sent[j] - f_states[3][j]).abs() < 1e-12);
            assert!((sent[hidden + j] - b_states[0][j]).abs() < 1e-12);
        }
    }

    #[test]
    fn answer_encode_single_token_is_one_step() {
        let mut g = Graph::new();
        let t = table_node(&mut g, 6, 3, 7);
        let cell = cell_ids(&mut g, 3, 4, 40);
        let e = embed(&mut g, t, &[5]);
        let h = answer_encode(&mut g, e, &[true], &cell);
        let (oh, _) = oracle_cell(
            &g.values(cell.w).to_vec(),
            &g.values(cell.b).to_vec(),
            4,
            &g.values(t)[5 * 3..6 * 3].to_vec(),
            &[0.0; 4],
            &[0.0; 4],
        );
        for (a, b) in g.values(h).iter().zip(&oh) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn answer_encode_ignores_pad_suffix() {
        let mut g = Graph::new();
        let t = table_node(&mut g, 6, 3, 8);
        let cell = cell_ids(&mut g, 3, 2, 42);
        let e1 = embed(&mut g, t, &[4, 5]);
        let h1 = answer_encode(&mut g, e1, &[true, true], &cell);
        let e2 = embed(&mut g, t, &[4, 5, PAD, PAD]);
        let h2 = answer_encode(&mut g, e2, &[true, true, false, false], &cell);
        assert!(g
            .values(h1)
            .iter()
            .zip(g.values(h2))
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn hundred_candidates_stack_to_matrix() {
        let d_enc = 3;
        let mut g = Graph::new();
        let t = table_node(&mut g, 10, 2, 9);
        let cell = cell_ids(&mut g, 2, d_enc, 44);
        let mut rows = Vec::new();
        for k in 0..100 {
            let ids = [4 + (k % 6), 4 + ((k / 6) % 6)];
            let e = embed(&mut g, t, &ids);
            let h = answer_encode(&mut g, e, &[true, true], &cell);
            rows.push(g.reshape(h, vec![1, d_enc]));
        }
        let s_a = g.concat(&rows, 0);
        assert_eq!(g.shape(s_a), &[100, d_enc]);
    }

    #[test]
    #[should_panic(expected = "fully masked")]
    fn all_masked_sequence_is_an_error() {
        let mut g = Graph::new();
        let t = table_node(&mut g, 6, 3, 10);
        let fwd = cell_ids(&mut g, 3, 2, 46);
        let bwd = cell_ids(&mut g, 3, 2, 48);
        let e = embed(&mut g, t, &[PAD, PAD]);
        bilstm_encode(&mut g, e, &[false, false], &fwd, &bwd);
    }

    #[test]
    fn embedding_file_roundtrip_and_errors() {
        let text = "dog 0.5 -1.0\ncat 0.25 0.75\n";
        let rows = read_embedding_file(std::io::Cursor::new(text), 2).unwrap();
        assert_eq!(rows.len(), 2);
        let vocab = Vocabulary::build(["dog", "bird"]);
        let mut table = vec![0.0; vocab.len() * 2];
        let applied = apply_embedding_rows(&mut table, &vocab, 2, &rows);
        assert_eq!(applied, 1); // "cat" is not in the vocabulary
        let dog = vocab.id("dog");
        assert_eq!(&table[dog * 2..dog * 2 + 2], &[0.5, -1.0]);

        let bad = read_embedding_file(std::io::Cursor::new("dog 0.5\n"), 2);
        assert!(matches!(bad, Err(EmbeddingFileError::Parse { line: 1, .. })));
    }
}
