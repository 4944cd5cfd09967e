//! Sparse-regularized differentiable architecture search at desk scale.
//!
//! The crate is organized around the search pipeline:
//!
//! - [`autodiff`] — minimal reverse-mode automatic differentiation over dense
//!   `f64` tensors (define-by-run, graph rebuilt per forward pass).
//! - [`space`] — cell-based search spaces, genotype enumeration, and argmax
//!   discretization.
//! - [`sparse`] — temperature softmax, its Jacobian and saturation behavior,
//!   Bernoulli batch-mix indicators, the mixing-probability schedule, and the
//!   entropy-summation diagnostic.
//! - [`supernet`] — the weight-sharing network: mixed-edge forward, discretized
//!   finalnet forward, cross-entropy, accuracy.
//! - [`trainer`] — the batch-mixed bilevel search loop with per-epoch metrics
//!   and checkpointing.
//! - [`bench`] — exhaustive ground-truth benchmark: every genotype in a tiny
//!   space trained standalone, plus percentile/regret queries.
//! - [`data`] — deterministic synthetic classification datasets and their
//!   binary container format.

pub mod autodiff;
pub mod bench;
pub mod data;
pub mod seeding;
pub mod space;
pub mod sparse;
pub mod supernet;
pub mod trainer;

pub use autodiff::{GradReport, Graph, NodeId, Tensor};
pub use bench::{BenchEntry, BenchTrainConfig, MicroBench};
pub use data::Dataset;
pub use space::{ArchParams, Genotype, OperationKind, SearchSpace, SearchSpaceSpec};
pub use sparse::{EdgeDistribution, IndicatorVec, MixPlan, TemperaturePair};
pub use supernet::{Batch, SupernetWeights};
pub use trainer::{MetricsRow, SearchConfig, SearchMode, SearchResult, SearchRun};
