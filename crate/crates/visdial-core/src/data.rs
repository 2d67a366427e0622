//! Dataset schema, validation, and the synthetic toy-dialog generator.
//!
//! Datasets are line-delimited JSON, one dialog per line: image id, visual
//! feature matrix (one row per detected object), tokenized caption, and a
//! list of turns each carrying a question, answer candidates, the ground
//! truth index, and optional per-candidate relevance scores. Tokens are
//! lowercased at ingestion. A dialog expands into one example per turn, with
//! the caption and all earlier question/ground-truth-answer pairs as history.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{Vocabulary, PAD_TOKEN};

pub const MAX_OBJECTS: usize = 100;
pub const MAX_HISTORY: usize = 10;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Turn {
    pub question: Vec<String>,
    pub candidates: Vec<Vec<String>>,
    pub gt_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Dialog {
    pub image_id: String,
    pub visual: Vec<Vec<f64>>,
    pub caption: Vec<String>,
    pub turns: Vec<Turn>,
}

/// One dialog turn with everything the model needs: the expansion product of
/// a [`Dialog`] at a given turn index.
#[derive(Debug, Clone)]
pub struct DialogExample {
    pub image_id: String,
    pub turn_index: usize,
    pub visual: Vec<Vec<f64>>,
    pub caption: Vec<String>,
    /// Earlier turns as (question tokens, ground-truth answer tokens).
    pub rounds: Vec<(Vec<String>, Vec<String>)>,
    pub question: Vec<String>,
    pub candidates: Vec<Vec<String>>,
    pub gt_index: usize,
    pub relevance: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub dialogs: Vec<Dialog>,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: field `{field}`: {msg}")]
    Invariant { line: usize, field: String, msg: String },
    #[error("dataset is empty")]
    Empty,
    #[error("toy generator: {0}")]
    Toy(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn invariant(line: usize, field: &str, msg: impl Into<String>) -> DataError {
    DataError::Invariant { line, field: field.into(), msg: msg.into() }
}

fn check_tokens(line: usize, field: &str, tokens: &[String]) -> Result<(), DataError> {
    if tokens.is_empty() {
        return Err(invariant(line, field, "token list is empty"));
    }
    let real = tokens.iter().take_while(|t| t.as_str() != PAD_TOKEN).count();
    if real == 0 {
        return Err(invariant(line, field, "no real token before padding"));
    }
    if tokens[real..].iter().any(|t| t.as_str() != PAD_TOKEN) {
        return Err(invariant(line, field, "padding must be a suffix"));
    }
    Ok(())
}

fn validate_dialog(line: usize, d: &Dialog, expect_d_v: Option<usize>) -> Result<usize, DataError> {
    let n_v = d.visual.len();
    if n_v == 0 || n_v > MAX_OBJECTS {
        return Err(invariant(line, "visual", format!("n_v = {n_v}, expected 1..={MAX_OBJECTS}")));
    }
    let d_v = d.visual[0].len();
    if d_v == 0 {
        return Err(invariant(line, "visual", "feature width is zero"));
    }
    if let Some(e) = expect_d_v {
        if e != d_v {
            return Err(invariant(line, "visual", format!("feature width {d_v} differs from {e}")));
        }
    }
    for (k, row) in d.visual.iter().enumerate() {
        if row.len() != d_v {
            return Err(invariant(line, "visual", format!("row {k} has width {}, expected {d_v}", row.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(invariant(line, "visual", format!("row {k} contains a non-finite value")));
        }
    }
    check_tokens(line, "caption", &d.caption)?;
    if d.turns.is_empty() {
        return Err(invariant(line, "turns", "dialog has no turns"));
    }
    if d.turns.len() > MAX_HISTORY {
        return Err(invariant(
            line,
            "turns",
            format!("{} turns would exceed the history limit of {MAX_HISTORY}", d.turns.len()),
        ));
    }
    for (k, turn) in d.turns.iter().enumerate() {
        let at = |f: &str| format!("turns[{k}].{f}");
        check_tokens(line, &at("question"), &turn.question)?;
        if turn.candidates.is_empty() {
            return Err(invariant(line, &at("candidates"), "no candidates"));
        }
        for (c, cand) in turn.candidates.iter().enumerate() {
            check_tokens(line, &format!("turns[{k}].candidates[{c}]"), cand)?;
        }
        if turn.gt_index >= turn.candidates.len() {
            return Err(invariant(
                line,
                &at("gt_index"),
                format!("index {} out of {} candidates", turn.gt_index, turn.candidates.len()),
            ));
        }
        if let Some(rel) = &turn.relevance {
            if rel.len() != turn.candidates.len() {
                return Err(invariant(
                    line,
                    &at("relevance"),
                    format!("{} scores for {} candidates", rel.len(), turn.candidates.len()),
                ));
            }
            if rel.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(invariant(line, &at("relevance"), "scores must be finite and non-negative"));
            }
        }
    }
    Ok(d_v)
}

fn lowercase_dialog(d: &mut Dialog) {
    let lower = |v: &mut Vec<String>| v.iter_mut().for_each(|t| *t = t.to_lowercase());
    lower(&mut d.caption);
    for turn in &mut d.turns {
        lower(&mut turn.question);
        for cand in &mut turn.candidates {
            lower(cand);
        }
    }
}

impl Dataset {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let file = File::open(path)?;
        let mut dialogs = Vec::new();
        let mut d_v = None;
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line_no = idx + 1;
            let text = line?;
            if text.trim().is_empty() {
                continue;
            }
            let mut dialog: Dialog =
                serde_json::from_str(&text).map_err(|source| DataError::Parse { line: line_no, source })?;
            lowercase_dialog(&mut dialog);
            d_v = Some(validate_dialog(line_no, &dialog, d_v)?);
            dialogs.push(dialog);
        }
        if dialogs.is_empty() {
            return Err(DataError::Empty);
        }
        Ok(Dataset { dialogs })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let mut file = File::create(path)?;
        for dialog in &self.dialogs {
            let line = serde_json::to_string(dialog).expect("dialog serializes");
            writeln!(file, "{line}")?;
        }
        Ok(())
    }

    pub fn d_v(&self) -> usize {
        self.dialogs[0].visual[0].len()
    }

    /// Expand every dialog into per-turn examples, history accumulating the
    /// ground-truth answers of earlier turns.
    pub fn examples(&self) -> Vec<DialogExample> {
        let mut out = Vec::new();
        for dialog in &self.dialogs {
            for (k, turn) in dialog.turns.iter().enumerate() {
                let rounds = dialog.turns[..k]
                    .iter()
                    .map(|t| (t.question.clone(), t.candidates[t.gt_index].clone()))
                    .collect();
                out.push(DialogExample {
                    image_id: dialog.image_id.clone(),
                    turn_index: k,
                    visual: dialog.visual.clone(),
                    caption: dialog.caption.clone(),
                    rounds,
                    question: turn.question.clone(),
                    candidates: turn.candidates.clone(),
                    gt_index: turn.gt_index,
                    relevance: turn.relevance.clone(),
                });
            }
        }
        out
    }

    /// Vocabulary over all tokens in first-occurrence order.
    pub fn build_vocab(&self) -> Vocabulary {
        let mut tokens: Vec<&str> = Vec::new();
        for dialog in &self.dialogs {
            tokens.extend(dialog.caption.iter().map(String::as_str));
            for turn in &dialog.turns {
                tokens.extend(turn.question.iter().map(String::as_str));
                for cand in &turn.candidates {
                    tokens.extend(cand.iter().map(String::as_str));
                }
            }
        }
        Vocabulary::build(tokens)
    }
}

// ── Toy generator ───────────────────────────────────────────────────

/// Sizes for [`generate_toy`]. The defaults are the standard desk-scale
/// dataset used by the training checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyConfig {
    pub seed: u64,
    pub n_dialogs: usize,
    pub vocab_size: usize,
    pub d_v: usize,
    pub n_v: usize,
    pub candidates: usize,
    pub turns: usize,
    /// When true, answers depend on the question alone: a history-blind
    /// model can fit the data. When false (the default), the answer depends
    /// on a clue token that appears only in the caption, and every candidate
    /// set contains all same-concept answers, so the question and image
    /// alone leave an irreducible ambiguity.
    pub question_only: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            seed: 0,
            n_dialogs: 200,
            vocab_size: 120,
            d_v: 16,
            n_v: 8,
            candidates: 20,
            turns: 4,
            question_only: false,
        }
    }
}

const TOY_CONCEPTS: usize = 6;
const TOY_CLUES: usize = 4;

/// Construct dialogs where the correct answer is a deterministic function of
/// the question's object token, that object's visual column, and the clue
/// token planted in the caption. Deterministic given the seed.
pub fn generate_toy(cfg: &ToyConfig) -> Result<Dataset, DataError> {
    let n_answers = TOY_CONCEPTS * TOY_CLUES;
    if cfg.n_dialogs == 0 || cfg.d_v == 0 || cfg.n_v == 0 || cfg.candidates == 0 || cfg.turns == 0 {
        return Err(DataError::Toy("all sizes must be at least 1".into()));
    }
    if cfg.turns > MAX_HISTORY {
        return Err(DataError::Toy(format!("turns {} exceeds history limit {MAX_HISTORY}", cfg.turns)));
    }
    if cfg.n_v > MAX_OBJECTS {
        return Err(DataError::Toy(format!("n_v {} exceeds object limit {MAX_OBJECTS}", cfg.n_v)));
    }
    if cfg.candidates > n_answers {
        return Err(DataError::Toy(format!(
            "candidates {} exceeds the answer pool of {n_answers}",
            cfg.candidates
        )));
    }
    if cfg.n_v < cfg.turns.min(TOY_CONCEPTS) {
        return Err(DataError::Toy(format!(
            "n_v {} cannot hold the {} designated objects",
            cfg.n_v,
            cfg.turns.min(TOY_CONCEPTS)
        )));
    }
    // 4 specials + concepts + clues + answers + "what" + "scene"
    let base_tokens = 4 + TOY_CONCEPTS + TOY_CLUES + n_answers + 2;
    let filler_pool = cfg.vocab_size.saturating_sub(base_tokens);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // fixed prototype per concept; visual columns are exact prototypes so a
    // history-blind model cannot memorize dialogs through visual noise
    let prototypes: Vec<Vec<f64>> = (0..TOY_CONCEPTS)
        .map(|_| (0..cfg.d_v).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();

    let answer_token = |concept: usize, clue: usize| {
        if cfg.question_only {
            format!("ans{}", concept * TOY_CLUES)
        } else {
            format!("ans{}", concept * TOY_CLUES + clue)
        }
    };

    let mut dialogs = Vec::with_capacity(cfg.n_dialogs);
    for d in 0..cfg.n_dialogs {
        let clue = rng.random_range(0..TOY_CLUES);
        let mut concept_order: Vec<usize> = (0..TOY_CONCEPTS).collect();
        concept_order.shuffle(&mut rng);
        let turn_concepts: Vec<usize> =
            (0..cfg.turns).map(|k| concept_order[k % TOY_CONCEPTS]).collect();

        // designated objects first, then decoys, shuffled together
        let mut object_concepts: Vec<usize> = Vec::new();
        for &c in &turn_concepts {
            if !object_concepts.contains(&c) {
                object_concepts.push(c);
            }
        }
        let mut decoy = 0;
        while object_concepts.len() < cfg.n_v {
            object_concepts.push(concept_order[decoy % TOY_CONCEPTS]);
            decoy += 1;
        }
        object_concepts.shuffle(&mut rng);
        let visual: Vec<Vec<f64>> =
            object_concepts.iter().map(|&c| prototypes[c].clone()).collect();

        let mut caption = vec!["scene".to_string(), format!("clue{clue}")];
        if filler_pool > 0 {
            caption.push(format!("filler{}", (2 * d) % filler_pool));
            caption.push(format!("filler{}", (2 * d + 1) % filler_pool));
        }

        let mut turns = Vec::with_capacity(cfg.turns);
        for &concept in &turn_concepts {
            let gt = answer_token(concept, clue);
            // the gt, every same-concept answer that fits, then random others
            let mut cands = vec![gt.clone()];
            for other in 0..TOY_CLUES {
                if cands.len() >= cfg.candidates {
                    break;
                }
                let tok = answer_token(concept, other);
                if !cands.contains(&tok) {
                    cands.push(tok);
                }
            }
            while cands.len() < cfg.candidates {
                let tok = format!("ans{}", rng.random_range(0..n_answers));
                if !cands.contains(&tok) {
                    cands.push(tok);
                }
            }
            cands.shuffle(&mut rng);
            let gt_index = cands.iter().position(|c| *c == gt).unwrap();
            let relevance: Vec<f64> = cands
                .iter()
                .map(|c| {
                    if *c == gt {
                        1.0
                    } else if same_concept(c, concept) {
                        0.3
                    } else {
                        0.0
                    }
                })
                .collect();
            turns.push(Turn {
                question: vec!["what".to_string(), format!("obj{concept}")],
                candidates: cands.into_iter().map(|c| vec![c]).collect(),
                gt_index,
                relevance: Some(relevance),
            });
        }
        dialogs.push(Dialog { image_id: format!("toy-{d:05}"), visual, caption, turns });
    }
    Ok(Dataset { dialogs })
}

fn same_concept(answer: &str, concept: usize) -> bool {
    answer
        .strip_prefix("ans")
        .and_then(|rest| rest.parse::<usize>().ok())
        .map_or(false, |k| k / TOY_CLUES == concept)
}
