//! Core library for the APGL4SR sequential recommender: data ingestion,
//! global item-graph construction, adaptive graph refinement, a causal
//! self-attention encoder with personalized positional bias, multi-task
//! training, and full-ranking evaluation — all on a deterministic f64
//! numeric stack with tape-based differentiation.

pub mod agcl;
pub mod config;
pub mod container;
pub mod dataio;
pub mod error;
pub mod evaluate;
pub mod graph;
pub mod num;
pub mod project;
pub mod rng;
pub mod scaling;
pub mod seqenc;
pub mod synth;
pub mod trainer;

pub use container::Container;
pub use dataio::{Dataset, InteractionLog};
pub use error::{CoreError, Result};
pub use evaluate::{MetricsReport, Split};
pub use graph::{GraphBuildConfig, SparseGraph};
pub use num::optim::{AdamConfig, ParamRegistry};
pub use num::tensor::Tensor;
pub use scaling::{BenchConfig, BenchReport};
pub use synth::SynthConfig;
pub use trainer::{Model, TrainConfig};
