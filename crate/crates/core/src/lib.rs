//! Training and evaluation engine for hierarchical graph-convolutional
//! multi-behavior recommendation.
//!
//! Embeddings are first learned on a unified graph holding every behavior's
//! interactions, then refined on one graph per behavior. Users aggregate
//! their behavior embeddings with parameter-free softmax similarity weights,
//! items with count-proportional learnable weights, and both are fused with
//! the global embeddings before inner-product scoring. Training minimizes
//! the sum of per-behavior BPR losses with Adam; evaluation is leave-one-out
//! HR@K / NDCG@K over the full item catalogue.
//!
//! Module map:
//!
//! - [`data`]: log parsing, deduplication, ID mapping, leave-one-out splits,
//!   cold-start masking, dataset bundles
//! - [`graph`]: normalized bipartite adjacencies and node dropout
//! - [`model`]: parameters and the forward pass
//! - [`training`]: sampling, BPR loss, analytic gradients, Adam, training loop
//! - [`eval`]: ranking metrics and evaluation protocols
//! - [`oracle`]: brute-force references for testing
//! - [`config`], [`io`]: configuration files and model/embedding files
//! - [`synthetic`]: seeded planted-structure datasets

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod io;
pub mod matrix;
pub mod model;
pub mod oracle;
pub mod synthetic;
pub mod training;

pub use data::{Dataset, Delimiter, InteractionRecord};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use graph::{GraphSet, NormalizedGraph};
pub use matrix::Matrix;
pub use model::{ForwardTrace, ItemWeighting, ModelParams, UserAggregation, Variant};
pub use training::{Gradients, TrainConfig, TrainLog};
