//! Visual dialog answer ranking at desk scale.
//!
//! A self-contained implementation of a multi-view attention model for the
//! visual dialog task: question/history/candidate encoders over a tiny f64
//! autodiff kernel, three attention stages (sentence-level history matching,
//! word-level topic aggregation, two-step visual alignment), discriminative
//! and generative answer decoders, Adam training with a warmup/decay
//! schedule, and the standard retrieval metrics (MRR, R@k, mean rank, NDCG).
//!
//! Everything is verified against brute-force oracles and finite differences
//! rather than full-scale benchmark numbers; see the `acceptance` test target.

pub mod autodiff;
pub mod checkpoint;
pub mod context_matching;
pub mod data;
pub mod decoders;
pub mod encoders;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod modality_alignment;
pub mod model;
pub mod optim;
pub mod topic_aggregation;
pub mod trace;
pub mod train;

pub use autodiff::{Graph, NodeId, Tensor};
pub use data::{Dataset, Dialog, DialogExample, ToyConfig};
pub use model::{ModelConfig, ModelDims, ModelParams, TrainMode};
