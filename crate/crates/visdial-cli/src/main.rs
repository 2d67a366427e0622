//! Command-line entry points: toy-data generation, training, evaluation,
//! gradient checking, and single-example ranking.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use visdial_core::checkpoint::{load_checkpoint, save_checkpoint};
use visdial_core::data::{generate_toy, Dataset, ToyConfig};
use visdial_core::gradcheck::{gradcheck_full_model, REL_TOL};
use visdial_core::model::{forward_turn, prepare, ranking_scores, PreparedTurn};
use visdial_core::trace::{trace_from_forward, write_traces, AttentionTrace};
use visdial_core::train::{append_records, evaluate, train, TrainOptions};
use visdial_core::{Graph, ModelConfig, ModelDims, ModelParams, TrainMode};

#[derive(Parser)]
#[command(name = "visdial", version, about = "Visual dialog answer ranking at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dialog dataset (JSON lines, one dialog per line).
    GenToy {
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        dialogs: usize,
        #[arg(long, default_value_t = 120)]
        vocab: usize,
        #[arg(long, default_value_t = 16)]
        d_v: usize,
        #[arg(long, default_value_t = 8)]
        n_v: usize,
        #[arg(long, default_value_t = 20)]
        candidates: usize,
        #[arg(long, default_value_t = 4)]
        turns: usize,
        /// Make answers derivable from the question alone (no history clue).
        #[arg(long)]
        question_only: bool,
    },
    /// Train a model and write a checkpoint plus a metrics log.
    Train {
        /// Dataset path (JSON lines).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for model.ckpt and metrics.jsonl.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "multitask")]
        mode: TrainMode,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Model config as JSON; defaults to the desk-scale preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Evaluate and log every n-th epoch.
        #[arg(long, default_value_t = 1)]
        eval_every: usize,
        /// Train the history-blind ablation variant.
        #[arg(long)]
        history_blind: bool,
    },
    /// Evaluate a checkpoint on a dataset and print the metric report.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write per-turn attention traces to this JSON file.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Override the scoring mode (defaults to the checkpoint's).
        #[arg(long)]
        mode: Option<TrainMode>,
    },
    /// Run the finite-difference gradient check over the tiny configuration.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score one example and print its sorted candidates.
    Rank {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which example (dialog turn) to rank, in dataset order.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenToy { out, seed, dialogs, vocab, d_v, n_v, candidates, turns, question_only } => {
            let cfg = ToyConfig {
                seed,
                n_dialogs: dialogs,
                vocab_size: vocab,
                d_v,
                n_v,
                candidates,
                turns,
                question_only,
            };
            let ds = generate_toy(&cfg)?;
            ds.save(&out)?;
            let examples = ds.examples().len();
            println!("wrote {} dialogs ({examples} turns) to {}", ds.dialogs.len(), out.display());
            Ok(())
        }
        Cmd::Train { data, out, mode, epochs, seed, config, eval_every, history_blind } => {
            cmd_train(&data, &out, mode, epochs, seed, config.as_deref(), eval_every, history_blind)
        }
        Cmd::Eval { data, checkpoint, trace, mode } => {
            cmd_eval(&data, &checkpoint, trace.as_deref(), mode)
        }
        Cmd::Gradcheck { seed } => cmd_gradcheck(seed),
        Cmd::Rank { data, checkpoint, index, trace } => {
            cmd_rank(&data, &checkpoint, index, trace.as_deref())
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    out: &Path,
    mode: TrainMode,
    epochs: usize,
    seed: u64,
    config: Option<&Path>,
    eval_every: usize,
    history_blind: bool,
) -> Result<()> {
    let ds = Dataset::load(data).with_context(|| format!("loading {}", data.display()))?;
    let vocab = ds.build_vocab();
    let mut cfg = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str::<ModelConfig>(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => {
            println!("no --config given; using the desk-scale preset");
            ModelConfig::toy()
        }
    };
    cfg.history_blind = history_blind || cfg.history_blind;
    let dims = ModelDims { config: cfg.clone(), vocab_size: vocab.len(), d_v: ds.d_v() };
    let mut params = ModelParams::init(dims, seed);
    let prepared: Vec<PreparedTurn> =
        ds.examples().iter().map(|e| prepare(e, &vocab, &cfg)).collect();
    println!(
        "training: {} examples, vocab {}, {} parameters, mode {mode}, {epochs} epochs, seed {seed}",
        prepared.len(),
        vocab.len(),
        params.numel()
    );

    std::fs::create_dir_all(out)?;
    let opts = TrainOptions { mode, epochs, seed, eval_every, stop: None };
    let outcome = train(&mut params, &prepared, &opts, |r| {
        println!(
            "epoch {:>4}  loss {:.4}  mrr {:.4}  r@1 {:.4}  r@5 {:.4}  r@10 {:.4}  mean {:.2}  ndcg {}",
            r.epoch,
            r.loss,
            r.mrr,
            r.r1,
            r.r5,
            r.r10,
            r.mean,
            r.ndcg.map_or("-".to_string(), |v| format!("{v:.4}")),
        );
    })?;
    append_records(out.join("metrics.jsonl"), &outcome.records)?;
    let ckpt_path = out.join("model.ckpt");
    save_checkpoint(&ckpt_path, &params, &vocab, mode, seed)?;
    println!("wrote {} and {}", ckpt_path.display(), out.join("metrics.jsonl").display());
    Ok(())
}

fn cmd_eval(
    data: &Path,
    checkpoint: &Path,
    trace: Option<&Path>,
    mode_override: Option<TrainMode>,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let ds = Dataset::load(data).with_context(|| format!("loading {}", data.display()))?;
    if ds.d_v() != ckpt.params.dims.d_v {
        bail!(
            "dataset visual width {} does not match checkpoint d_v {}",
            ds.d_v(),
            ckpt.params.dims.d_v
        );
    }
    let mode = mode_override.unwrap_or(ckpt.mode);
    let cfg = ckpt.params.dims.config.clone();
    let prepared: Vec<PreparedTurn> =
        ds.examples().iter().map(|e| prepare(e, &ckpt.vocab, &cfg)).collect();
    let mut traces: Vec<AttentionTrace> = Vec::new();
    let collect = trace.map(|_| &mut traces);
    let (result, loss) = evaluate(&ckpt.params, &prepared, mode, collect)?;
    println!("examples: {}  mode: {mode}", result.per_turn.len());
    println!("loss:  {loss:.6}");
    println!("mrr:   {:.6}", result.mrr);
    println!("r@1:   {:.6}", result.r1);
    println!("r@5:   {:.6}", result.r5);
    println!("r@10:  {:.6}", result.r10);
    println!("mean:  {:.6}", result.mean_rank);
    match result.ndcg {
        Some(v) => println!("ndcg:  {v:.6}"),
        None => println!("ndcg:  - (dataset has no relevance scores)"),
    }
    if let Some(path) = trace {
        write_traces(path, &traces)?;
        println!("wrote {} traces to {}", traces.len(), path.display());
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<()> {
    println!("gradient check: tiny config, multitask loss, central differences");
    let report = gradcheck_full_model(seed);
    let mut rows = report.per_param.clone();
    rows.sort_by(|a, b| b.max_rel_err.partial_cmp(&a.max_rel_err).unwrap());
    println!("{:<16} {:>10} {:>14}", "worst tensors", "elements", "max rel err");
    for row in rows.iter().take(5) {
        println!("{:<16} {:>10} {:>14.3e}", row.name, row.checked, row.max_rel_err);
    }
    println!(
        "checked {} parameter elements in {:.2?}; max rel err {:.3e} (tolerance {REL_TOL:.0e})",
        report.checked, report.elapsed, report.max_rel_err
    );
    if report.passed() {
        println!("PASS");
        Ok(())
    } else {
        bail!("gradient check failed at `{}`", report.worst_param);
    }
}

fn cmd_rank(data: &Path, checkpoint: &Path, index: usize, trace: Option<&Path>) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let ds = Dataset::load(data)?;
    let examples = ds.examples();
    if index >= examples.len() {
        bail!("index {index} out of range; dataset has {} examples", examples.len());
    }
    let ex = &examples[index];
    let cfg = ckpt.params.dims.config.clone();
    let prepared = prepare(ex, &ckpt.vocab, &cfg);
    let mut g = Graph::new();
    let bound = ckpt.params.bind(&mut g);
    let fwd = forward_turn(&mut g, &bound, &ckpt.params.dims, &prepared, ckpt.mode, true);
    let scores = ranking_scores(&g, &fwd, ckpt.mode);
    let order = visdial_core::metrics::sorted_candidates(&scores);
    println!(
        "image {}  turn {}  question: {}",
        ex.image_id,
        ex.turn_index,
        ex.question.join(" ")
    );
    for (pos, &cand) in order.iter().enumerate() {
        let marker = if cand == ex.gt_index { "  <- ground truth" } else { "" };
        println!(
            "{:>3}. [{cand:>3}] {:<30} {:.6}{marker}",
            pos + 1,
            ex.candidates[cand].join(" "),
            scores[cand]
        );
    }
    if let Some(path) = trace {
        let gt_rank = 1 + order.iter().position(|&i| i == ex.gt_index).unwrap();
        let t = trace_from_forward(&g, &fwd, &prepared, order, gt_rank);
        write_traces(path, &[t])?;
        println!("wrote trace to {}", path.display());
    }
    Ok(())
}
