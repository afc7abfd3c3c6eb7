//! Hierarchical complement objective training.
//!
//! The crate is organized bottom-up:
//!
//! - [`hierarchy`]: two-level label hierarchies and the per-class index sets.
//! - [`objectives`]: cross-entropy, complement entropy and hierarchical
//!   complement entropy with analytic logit gradients.
//! - [`network`]: a small dense/relu network with backpropagation and a
//!   binary checkpoint format.
//! - [`trainer`]: SGD with momentum, the direct and alternating schedules,
//!   and the step learning-rate schedule.
//! - [`data`]: synthetic hierarchical clusters and the CIFAR-100 binary loader.
//! - [`metrics`]: fine/coarse/top-k error, probability profiles, CSV output.
//! - [`seed`]: deterministic seed derivation.

pub mod data;
pub mod hierarchy;
pub mod metrics;
pub mod network;
pub mod objectives;
pub mod seed;
pub mod trainer;

pub use data::{Dataset, Split, SyntheticSpec};
pub use hierarchy::{HierarchyError, HierarchySlices, LabelHierarchy};
pub use metrics::{MetricsRecord, ProbabilityProfile};
pub use network::{ForwardCache, LayerSpec, Network};
pub use objectives::{
    EntropyOptions, LogitBatch, ObjectiveKind, ObjectiveResult, SubsetDistribution,
};
pub use trainer::{OptimizerState, Schedule, TrainConfig};
