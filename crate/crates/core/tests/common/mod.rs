#![allow(dead_code)]

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use relgraph_core::db::{ColumnSpec, SemanticType, Table, TableSpec, Value};
use relgraph_core::graph::EdgeTypeId;
use relgraph_core::model::{
    grad_check, Aggregation, BatchTask, FeatureStore, GradCheckReport, HeadType, Network,
};
use relgraph_core::rng::rng_for;
use relgraph_core::synth::{RecMode, STRIDE};
use relgraph_core::*;

/// A random relational database with 2..=4 tables. Later tables may point at
/// earlier ones (or themselves); keys are shuffled strings, some foreign-key
/// cells are null or dangling. Parent tables stay small enough for the
/// quadratic oracle.
pub fn random_db(rng: &mut ChaCha8Rng, max_rows: usize) -> Database {
    let n_tables = rng.gen_range(2..=4);
    let mut tables: Vec<Table> = Vec::new();
    let mut budget = max_rows;
    for ti in 0..n_tables {
        let last = ti + 1 == n_tables;
        let cap = if last { budget } else { budget.min(1500) / 2 };
        let n = rng.gen_range(0..=cap.max(1));
        budget = budget.saturating_sub(n);
        let name = format!("t{ti}");
        let timed = rng.gen_bool(0.6);
        let mut columns = vec![ColumnSpec {
            name: "id".into(),
            semantic_type: SemanticType::PrimaryKey,
            nullable: false,
        }];
        if timed {
            columns.push(ColumnSpec {
                name: "ts".into(),
                semantic_type: SemanticType::Timestamp,
                nullable: false,
            });
        }
        columns.push(ColumnSpec {
            name: "x".into(),
            semantic_type: SemanticType::Numeric,
            nullable: true,
        });
        let n_fk = rng.gen_range(0..=2.min(ti + 1));
        let mut fk_targets = Vec::new();
        for f in 0..n_fk {
            let target = rng.gen_range(0..=ti);
            fk_targets.push(target);
            columns.push(ColumnSpec {
                name: format!("fk{f}"),
                semantic_type: SemanticType::ForeignKey {
                    target: format!("t{target}"),
                },
                nullable: true,
            });
        }
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(rng);
        let key_space = |t: usize, tables: &Vec<Table>| if t == ti { n } else { tables[t].num_rows() };
        let mut rows = Vec::with_capacity(n);
        for &id in &ids {
            let mut row = vec![Value::Key(format!("{name}-{id}"))];
            if timed {
                row.push(Value::Time(Timestamp(rng.gen_range(0..1000))));
            }
            row.push(if rng.gen_bool(0.1) {
                Value::Null
            } else {
                Value::Num(rng.gen_range(-5.0..5.0))
            });
            for &target in &fk_targets {
                let space = key_space(target, &tables);
                let cell = if rng.gen_bool(0.1) || space == 0 {
                    Value::Null
                } else if rng.gen_bool(0.05) {
                    Value::Key(format!("t{target}-missing{}", rng.gen_range(0..5)))
                } else {
                    Value::Key(format!("t{target}-{}", rng.gen_range(0..space)))
                };
                row.push(cell);
            }
            rows.push(row);
        }
        let spec = TableSpec {
            name: name.clone(),
            file: format!("{name}.csv"),
            time_column: timed.then(|| "ts".into()),
            columns,
        };
        tables.push(Table::new(spec, rows).expect("unique keys"));
    }
    Database::from_tables(tables, "random.json").expect("targets exist")
}

/// Independent hash join of every foreign-key column; keyed by
/// `(src table, column, dst table)`.
pub fn join_oracle(db: &Database) -> HashMap<(String, String, String), Vec<(usize, usize)>> {
    let mut out = HashMap::new();
    for t in db.tables.values() {
        for (ci, col) in t.spec.columns.iter().enumerate() {
            let SemanticType::ForeignKey { target } = &col.semantic_type else {
                continue;
            };
            let dst = &db.tables[target];
            let pk = dst.spec.primary_key_index();
            let mut by_key: HashMap<&str, Vec<usize>> = HashMap::new();
            for (j, row) in dst.rows.iter().enumerate() {
                if let Value::Key(k) = &row[pk] {
                    by_key.entry(k.as_str()).or_default().push(j);
                }
            }
            let mut pairs = Vec::new();
            for (i, row) in t.rows.iter().enumerate() {
                if let Value::Key(k) = &row[ci] {
                    for &j in by_key.get(k.as_str()).map(Vec::as_slice).unwrap_or(&[]) {
                        pairs.push((i, j));
                    }
                }
            }
            pairs.sort_unstable();
            out.insert((t.spec.name.clone(), col.name.clone(), target.clone()), pairs);
        }
    }
    out
}

/// Checks `g` against [`join_oracle`] plus the transpose and degree
/// invariants. Returns a description of the first violation.
pub fn check_graph(db: &Database, g: &HeteroTemporalGraph) -> Result<(), String> {
    let oracle = join_oracle(db);
    if g.edge_types.len() != 2 * oracle.len() {
        return Err(format!("{} edge types for {} fkeys", g.edge_types.len(), oracle.len()));
    }
    for ((src, col, dst), pairs) in &oracle {
        let et = g
            .find_edge_type(src, col, dst)
            .ok_or_else(|| format!("missing edge type {src}.{col}->{dst}"))?;
        let fwd = &g.adjacency[et.0];
        let rev = &g.adjacency[et.reverse().0];
        let mut built = fwd.pairs();
        built.sort_unstable();
        if g.policy == EdgePolicy::Normal && &built != pairs {
            return Err(format!("{src}.{col}: join mismatch"));
        }
        let mut back: Vec<(usize, usize)> = rev.pairs().into_iter().map(|(d, s)| (s, d)).collect();
        back.sort_unstable();
        if back != built {
            return Err(format!("{src}.{col}: reverse is not the transpose"));
        }
        let out_deg: usize = (0..fwd.num_rows()).map(|i| fwd.degree(i)).sum();
        let in_deg: usize = (0..rev.num_rows()).map(|i| rev.degree(i)).sum();
        if out_deg != pairs.len() || in_deg != pairs.len() {
            return Err(format!("{src}.{col}: degree sums {out_deg}/{in_deg} vs {} links", pairs.len()));
        }
        // Per-row out-degree is the fkey's non-null resolution; per-target
        // in-degree is preserved by the permutation as a multiset.
        let mut want_out = vec![0usize; fwd.num_rows()];
        let mut want_in = vec![0usize; rev.num_rows()];
        for &(i, j) in pairs {
            want_out[i] += 1;
            want_in[j] += 1;
        }
        let got_out: Vec<usize> = (0..fwd.num_rows()).map(|i| fwd.degree(i)).collect();
        if got_out != want_out {
            return Err(format!("{src}.{col}: out-degrees differ"));
        }
        let mut got_in: Vec<usize> = (0..rev.num_rows()).map(|i| rev.degree(i)).collect();
        if g.policy != EdgePolicy::Normal {
            got_in.sort_unstable();
            want_in.sort_unstable();
        }
        if got_in != want_in {
            return Err(format!("{src}.{col}: in-degrees differ"));
        }
    }
    Ok(())
}

/// Random seeds: existing nodes at or after their own timestamp.
pub fn random_seeds(rng: &mut ChaCha8Rng, g: &HeteroTemporalGraph, n: usize) -> Vec<(NodeRef, Timestamp)> {
    let types: Vec<usize> = (0..g.num_node_types()).filter(|&t| g.node_counts[t] > 0).collect();
    if types.is_empty() {
        return Vec::new();
    }
    (0..n)
        .map(|_| {
            let t = *types.choose(rng).expect("non-empty");
            let node = NodeRef::new(NodeType(t), rng.gen_range(0..g.node_counts[t]));
            let floor = g.time(node).map_or(0, |ts| ts.0);
            (node, Timestamp(floor + rng.gen_range(0..300)))
        })
        .collect()
}

pub fn edge_ids(g: &HeteroTemporalGraph) -> Vec<EdgeTypeId> {
    g.edge_type_ids().collect()
}

/// Small synthetic database with the given signal.
pub fn synth(signal: Signal, seed: u64, n_entities: usize) -> SynthOutput {
    let mut cfg = SynthConfig::new(signal, seed);
    cfg.n_entities = n_entities;
    cfg.time_span = 6 * STRIDE;
    generate(&cfg).expect("valid synth config")
}

pub fn synth_with(signal: Signal, seed: u64, n_entities: usize, f: impl FnOnce(&mut SynthConfig)) -> SynthOutput {
    let mut cfg = SynthConfig::new(signal, seed);
    cfg.n_entities = n_entities;
    cfg.time_span = 6 * STRIDE;
    f(&mut cfg);
    generate(&cfg).expect("valid synth config")
}

pub fn popularity_mode(cfg: &mut SynthConfig) {
    cfg.rec_mode = RecMode::Popularity;
}

/// Gradient check of one head on a tiny fixture.
pub fn gradcheck_case(head: HeadType, aggregation: Aggregation, time_embedding: bool) -> GradCheckReport {
    let (signal, task_type) = match head {
        HeadType::MlpEntity => (Signal::RecencyChurn, TaskType::EntityClassification),
        _ => (Signal::CopurchaseRec, TaskType::Recommendation),
    };
    let out = synth_with(signal, 11, 12, |c| {
        c.n_items = 12;
        c.n_events = 200;
        c.time_span = 4 * STRIDE;
    });
    let tables = make_training_table(&out.db, &out.task, out.split).expect("task");
    let g = build_graph(&out.db, EdgePolicy::Normal);
    let mut cfg = ModelConfig::for_task(task_type);
    cfg.encoder.hidden_dim = 8;
    cfg.encoder.time_embedding = time_embedding;
    cfg.gnn.aggregation = aggregation;
    cfg.head.head_type = head;
    cfg.sampler.fanout = 3;
    let cfg = cfg.resolved();
    let store = FeatureStore::build(&g, Some(out.split.val_timestamp));
    let net = Network::new(&cfg, &g, &store);
    let params = net.init_params(5);
    let entity = g.node_type(&out.task.entity_table).expect("entity table");
    let rows = &tables.train.rows[..tables.train.len().min(6)];
    let mut seeds: Vec<(NodeRef, Timestamp)> =
        rows.iter().map(|r| (NodeRef::new(entity, r.entity), r.seed_time)).collect();
    let task = match head {
        HeadType::MlpEntity => BatchTask::Entity {
            classification: true,
            targets: rows.iter().map(|r| r.target.scalar().expect("scalar")).collect(),
        },
        HeadType::Idgnn => BatchTask::IdGnn {
            dst_type: g.node_type("items").expect("items"),
            truth: rows.iter().map(|r| r.target.links().to_vec()).collect(),
        },
        HeadType::TwoTower => {
            let items = g.node_type("items").expect("items");
            let n = rows.len();
            let mut triples = Vec::new();
            for (i, r) in rows.iter().enumerate() {
                let pos = r.target.links()[0];
                let neg = (pos + 1 + i) % g.num_nodes(items);
                seeds.push((NodeRef::new(items, pos), r.seed_time));
                seeds.push((NodeRef::new(items, neg), r.seed_time));
                triples.push((i, n + 2 * i, n + 2 * i + 1));
            }
            BatchTask::TwoTower { triples }
        }
    };
    let sg = sample(&g, &seeds, &cfg.sampler).expect("sample");
    let b = net.batch(&g, &store, &sg);
    grad_check(&params, 1e-5, |p| net.loss(p, &sg, &b, &task))
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, var.sqrt())
}

pub fn rng(seed: u64, label: &str) -> ChaCha8Rng {
    rng_for(seed, label)
}
