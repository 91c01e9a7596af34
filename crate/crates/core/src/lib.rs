//! Relational databases as heterogeneous temporal graphs.
//!
//! Pipeline: [`db`] loads typed tables from a schema manifest, [`graph`]
//! turns primary/foreign-key links into a typed CSR graph, [`task`] builds
//! leakage-free training tables, [`sampler`] draws time-consistent
//! subgraphs, and [`model`] trains a small heterogeneous GNN on them.
//! [`baselines`] and [`metrics`] provide the reference predictors and
//! evaluation; [`synth`] generates databases with planted signal.

pub mod baselines;
pub mod db;
pub mod features;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod snapshot;
pub mod synth;
pub mod task;

pub use db::{load_database, load_manifest, validate, Database, DbError, SchemaManifest, Timestamp};
pub use graph::{build_graph, EdgePolicy, HeteroTemporalGraph, NodeRef, NodeType};
pub use baselines::{BaselineKind, BaselinePredictor};
pub use metrics::{auroc, evaluate, mae, map_at_k, EvalReport, MetricError, Predictions};
pub use model::{train, ModelConfig, ModelError, TrainOutcome, TrainedModel};
pub use sampler::{leakage_audit, sample, SampledSubgraph, SamplerConfig};
pub use synth::{generate, Signal, SynthConfig, SynthOutput};
pub use task::{
    leakage_guard, make_training_table, Split, SplitConfig, Target, TaskSpec, TaskTables, TaskType,
    TrainingTable,
};
