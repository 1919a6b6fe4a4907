//! Feature-pyramid architecture search at desk scale.
//!
//! The pipeline: a [`search_space::Genome`] describes a pyramid of merging
//! cells; [`graph_compiler`] lowers it (optionally stacked) to a shape-checked
//! [`graph_compiler::FeatureGraph`]; [`cost_model`] counts FLOPs and
//! parameters; [`micro_tensor`] executes and differentiates the graph;
//! [`proxy_task`] trains it on synthetic multiscale data to produce a reward;
//! [`controller_search`] drives random, evolutionary and PPO-controller search.

pub mod controller_search;
pub mod cost_model;
pub mod graph_compiler;
pub mod micro_tensor;
pub mod proxy_task;
pub mod rng;
pub mod search_space;

pub use cost_model::{compare, estimate, CostReport};
pub use graph_compiler::{compile, stack, FeatureGraph, PyramidInputSpec};
pub use search_space::{
    preset, sample_random, mutate, BinaryOp, CellSpec, ConvMode, Genome, GenomeKey, Level,
    SpaceConfig,
};
