//! Shared fixtures for the criterion benchmarks.

use relgraph_core::synth::{generate, Signal, SynthConfig, SynthOutput, STRIDE};
use relgraph_core::{NodeRef, Timestamp};

/// A churn database with `n_entities` entities and ~12 events each.
pub fn churn_fixture(n_entities: usize) -> SynthOutput {
    let mut cfg = SynthConfig::new(Signal::RecencyChurn, 0);
    cfg.n_entities = n_entities;
    cfg.time_span = 6 * STRIDE;
    generate(&cfg).expect("fixture config is valid")
}

/// The first `n` training-table seeds of the fixture's churn task.
pub fn seeds(out: &SynthOutput, n: usize) -> Vec<(NodeRef, Timestamp)> {
    let tables = relgraph_core::make_training_table(&out.db, &out.task, out.split).expect("task");
    let g = relgraph_core::build_graph(&out.db, relgraph_core::EdgePolicy::Normal);
    let entity = g.node_type(&out.task.entity_table).expect("entity table");
    tables
        .train
        .rows
        .iter()
        .take(n)
        .map(|r| (NodeRef::new(entity, r.entity), r.seed_time))
        .collect()
}
