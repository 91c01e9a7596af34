//! Leakage-free temporal neighbor sampling.
//!
//! Every seed gets its own rooted neighborhood. Expansion is breadth-first
//! over all edge types leaving a node; at each hop the candidate neighbors
//! are filtered to `time <= seed time` (untimed nodes always pass) and then
//! uniformly subsampled without replacement to at most `fanout` per node and
//! edge type. Within one root a global node appears at most once; the same
//! global node reached from two roots appears once per root.

use std::collections::{HashMap, HashSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::db::Timestamp;
use crate::graph::{Csr, EdgeTypeId, HeteroTemporalGraph, NodeRef, NodeType};

#[derive(Debug, Error, PartialEq)]
pub enum SampleError {
    #[error("seed {index} out of range for node type `{node_type}`")]
    SeedOutOfRange { node_type: String, index: usize },
    #[error("seed {index} of type `{node_type}` appears at {node_time}, after its seed time {seed_time}")]
    SeedInFuture {
        node_type: String,
        index: usize,
        node_time: Timestamp,
        seed_time: Timestamp,
    },
    #[error("invalid sampler config: {0}")]
    Config(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    #[default]
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub num_layers: usize,
    pub fanout: usize,
    pub strategy: SamplingStrategy,
    pub batch_size: usize,
    pub rng_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            num_layers: 2,
            fanout: 128,
            strategy: SamplingStrategy::Uniform,
            batch_size: 512,
            rng_seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SampleError> {
        if self.num_layers == 0 {
            return Err(SampleError::Config("num_layers must be positive"));
        }
        if self.fanout == 0 {
            return Err(SampleError::Config("fanout must be positive"));
        }
        if self.batch_size == 0 {
            return Err(SampleError::Config("batch_size must be positive"));
        }
        Ok(())
    }
}

/// A batch of rooted temporal neighborhoods in local indexing.
///
/// Local nodes are grouped by node type; `local_nodes[t][i]` is the global
/// index of local node `i` of type `t`. `local_edges[et]` holds
/// `(center, neighbor)` local index pairs, where the center (of the edge
/// type's source type) sampled the neighbor. A link between two local nodes
/// is recorded once, under the edge type it was first sampled through.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampledSubgraph {
    pub seed_refs: Vec<NodeRef>,
    pub seed_times: Vec<Timestamp>,
    /// Local index (within the seed's type) of each root's seed node.
    pub seed_local: Vec<usize>,
    pub local_nodes: Vec<Vec<usize>>,
    pub node_root: Vec<Vec<usize>>,
    pub hop_of_node: Vec<Vec<u8>>,
    pub seed_mask: Vec<Vec<bool>>,
    pub local_edges: Vec<Vec<(usize, usize)>>,
}

impl SampledSubgraph {
    pub fn num_roots(&self) -> usize {
        self.seed_refs.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.local_nodes.iter().map(Vec::len).sum()
    }

    pub fn num_edges(&self) -> usize {
        self.local_edges.iter().map(Vec::len).sum()
    }

    pub fn global(&self, t: NodeType, local: usize) -> NodeRef {
        NodeRef::new(t, self.local_nodes[t.0][local])
    }

    /// Seed time of the root that owns local node `(t, local)`.
    pub fn seed_time_of(&self, t: NodeType, local: usize) -> Timestamp {
        self.seed_times[self.node_root[t.0][local]]
    }

    /// Re-expresses the subgraph as a standalone graph over its local nodes
    /// (useful for dumping to an `RGH1` snapshot). Features are dropped.
    pub fn to_graph(&self, g: &HeteroTemporalGraph) -> HeteroTemporalGraph {
        let node_counts: Vec<usize> = self.local_nodes.iter().map(Vec::len).collect();
        let node_times = self
            .local_nodes
            .iter()
            .enumerate()
            .map(|(t, nodes)| nodes.iter().map(|&i| g.node_times[t][i]).collect())
            .collect();
        let adjacency = g
            .edge_type_ids()
            .map(|et| {
                let src = g.edge_type(et).src_type;
                let mut pairs = self.local_edges[et.0].clone();
                pairs.sort_unstable();
                Csr::from_pairs(node_counts[src.0], &pairs)
            })
            .collect();
        HeteroTemporalGraph {
            node_types: g.node_types.clone(),
            node_counts: node_counts.clone(),
            node_times,
            edge_types: g.edge_types.clone(),
            adjacency,
            features: node_counts
                .iter()
                .map(|&n| crate::features::FeatureTable {
                    num_rows: n,
                    columns: vec![],
                })
                .collect(),
            policy: g.policy,
        }
    }
}

/// One root's neighborhood before merging into the batch.
struct RootSample {
    nodes: Vec<(NodeRef, u8)>,
    edges: Vec<(EdgeTypeId, usize, usize)>,
}

fn visible(g: &HeteroTemporalGraph, n: NodeRef, seed_time: Timestamp) -> bool {
    g.time(n).is_none_or(|t| t <= seed_time)
}

/// Picks `k` of `n` positions uniformly without replacement (partial
/// Fisher-Yates), returned in ascending position order.
fn choose_positions(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

fn sample_root(
    g: &HeteroTemporalGraph,
    seed: NodeRef,
    seed_time: Timestamp,
    root: usize,
    cfg: &SamplerConfig,
) -> RootSample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(root as u64);

    let mut position: HashMap<NodeRef, usize> = HashMap::new();
    let mut links: HashSet<(EdgeTypeId, usize, usize)> = HashSet::new();
    let mut nodes = vec![(seed, 0u8)];
    let mut edges = Vec::new();
    position.insert(seed, 0);
    let mut frontier = vec![0usize];

    let mut candidates = Vec::new();
    for hop in 1..=cfg.num_layers {
        let mut next = Vec::new();
        for &center_pos in &frontier {
            let center = nodes[center_pos].0;
            for et in g.edge_types_from(center.node_type) {
                let dst_type = g.edge_type(et).dst_type;
                candidates.clear();
                candidates.extend(
                    g.adjacency[et.0]
                        .row(center.index)
                        .iter()
                        .map(|&i| NodeRef::new(dst_type, i))
                        .filter(|&n| visible(g, n, seed_time)),
                );
                for p in choose_positions(&mut rng, candidates.len(), cfg.fanout) {
                    let nb = candidates[p];
                    let nb_pos = *position.entry(nb).or_insert_with(|| {
                        nodes.push((nb, hop as u8));
                        next.push(nodes.len() - 1);
                        nodes.len() - 1
                    });
                    let key = if et.is_forward() {
                        (et, center_pos, nb_pos)
                    } else {
                        (et.canonical(), nb_pos, center_pos)
                    };
                    if links.insert(key) {
                        edges.push((et, center_pos, nb_pos));
                    }
                }
            }
        }
        frontier = next;
    }
    RootSample { nodes, edges }
}

pub fn sample(
    g: &HeteroTemporalGraph,
    seeds: &[(NodeRef, Timestamp)],
    cfg: &SamplerConfig,
) -> Result<SampledSubgraph, SampleError> {
    cfg.validate()?;
    for &(n, t) in seeds {
        if n.node_type.0 >= g.num_node_types() || n.index >= g.num_nodes(n.node_type) {
            return Err(SampleError::SeedOutOfRange {
                node_type: g
                    .node_types
                    .get(n.node_type.0)
                    .cloned()
                    .unwrap_or_else(|| format!("#{}", n.node_type.0)),
                index: n.index,
            });
        }
        if let Some(nt) = g.time(n) {
            if nt > t {
                return Err(SampleError::SeedInFuture {
                    node_type: g.type_name(n.node_type).to_string(),
                    index: n.index,
                    node_time: nt,
                    seed_time: t,
                });
            }
        }
    }

    let roots: Vec<RootSample> = seeds
        .par_iter()
        .enumerate()
        .map(|(r, &(n, t))| sample_root(g, n, t, r, cfg))
        .collect();

    let n_types = g.num_node_types();
    let mut sg = SampledSubgraph {
        seed_refs: seeds.iter().map(|s| s.0).collect(),
        seed_times: seeds.iter().map(|s| s.1).collect(),
        seed_local: Vec::with_capacity(seeds.len()),
        local_nodes: vec![Vec::new(); n_types],
        node_root: vec![Vec::new(); n_types],
        hop_of_node: vec![Vec::new(); n_types],
        seed_mask: vec![Vec::new(); n_types],
        local_edges: vec![Vec::new(); g.edge_types.len()],
    };
    for (r, root) in roots.into_iter().enumerate() {
        let local: Vec<usize> = root
            .nodes
            .iter()
            .map(|&(n, hop)| {
                let t = n.node_type.0;
                sg.local_nodes[t].push(n.index);
                sg.node_root[t].push(r);
                sg.hop_of_node[t].push(hop);
                sg.seed_mask[t].push(hop == 0);
                sg.local_nodes[t].len() - 1
            })
            .collect();
        sg.seed_local.push(local[0]);
        for (et, c, nb) in root.edges {
            sg.local_edges[et.0].push((local[c], local[nb]));
        }
    }
    Ok(sg)
}

/// True iff every timestamped local node is no later than its root's seed time.
pub fn leakage_audit(sg: &SampledSubgraph, g: &HeteroTemporalGraph) -> bool {
    sg.local_nodes.iter().enumerate().all(|(t, nodes)| {
        nodes.iter().enumerate().all(|(i, &global)| {
            let seed_time = sg.seed_times[sg.node_root[t][i]];
            g.node_times[t][global].is_none_or(|nt| nt <= seed_time)
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::db::{ColumnSpec, Database, SemanticType, Table, TableSpec, Value};
    use crate::graph::{build_graph, EdgePolicy};

    /// users(u0..u2, static) <- reviews(time, user_id)
    fn graph(reviews: &[(&str, i64)]) -> HeteroTemporalGraph {
        let pk = ColumnSpec {
            name: "id".into(),
            semantic_type: SemanticType::PrimaryKey,
            nullable: false,
        };
        let users = TableSpec {
            name: "users".into(),
            file: "u.csv".into(),
            time_column: None,
            columns: vec![pk.clone()],
        };
        let rs = TableSpec {
            name: "reviews".into(),
            file: "r.csv".into(),
            time_column: Some("ts".into()),
            columns: vec![
                pk,
                ColumnSpec {
                    name: "user_id".into(),
                    semantic_type: SemanticType::ForeignKey {
                        target: "users".into(),
                    },
                    nullable: false,
                },
                ColumnSpec {
                    name: "ts".into(),
                    semantic_type: SemanticType::Timestamp,
                    nullable: true,
                },
            ],
        };
        let urows = (0..3).map(|i| vec![Value::Key(format!("u{i}"))]).collect();
        let rrows = reviews
            .iter()
            .enumerate()
            .map(|(i, (u, t))| {
                vec![
                    Value::Key(format!("r{i}")),
                    Value::Key(u.to_string()),
                    Value::Time(Timestamp(*t)),
                ]
            })
            .collect();
        let db = Database::from_tables(
            vec![Table::new(users, urows).unwrap(), Table::new(rs, rrows).unwrap()],
            "t",
        )
        .unwrap();
        build_graph(&db, EdgePolicy::Normal)
    }

    fn cfg(layers: usize, fanout: usize) -> SamplerConfig {
        SamplerConfig {
            num_layers: layers,
            fanout,
            rng_seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn future_neighbors_are_excluded() {
        let g = graph(&[("u0", 3), ("u0", 7)]);
        let users = g.node_type("users").unwrap();
        let sg = sample(&g, &[(NodeRef::new(users, 0), Timestamp(5))], &cfg(1, 10)).unwrap();
        assert_eq!(sg.local_nodes[1], vec![0]);
        assert!(leakage_audit(&sg, &g));
    }

    #[test]
    fn fanout_caps_valid_neighbors() {
        let reviews: Vec<(&str, i64)> = (0..10).map(|i| ("u1", i)).chain([("u1", 99)]).collect();
        let g = graph(&reviews);
        let users = g.node_type("users").unwrap();
        let sg = sample(&g, &[(NodeRef::new(users, 1), Timestamp(50))], &cfg(1, 2)).unwrap();
        assert_eq!(sg.local_nodes[1].len(), 2);
        assert!(sg.local_nodes[1].iter().all(|&r| r < 10));
        assert_eq!(sg.local_edges[1].len(), 2);
    }

    #[test]
    fn same_seed_same_subgraph() {
        let reviews: Vec<(&str, i64)> = (0..30).map(|i| (["u0", "u1", "u2"][i % 3], i as i64)).collect();
        let g = graph(&reviews);
        let users = g.node_type("users").unwrap();
        let seeds: Vec<_> = (0..3).map(|u| (NodeRef::new(users, u), Timestamp(20))).collect();
        let a = sample(&g, &seeds, &cfg(2, 3)).unwrap();
        let b = sample(&g, &seeds, &cfg(2, 3)).unwrap();
        assert_eq!(a, b);
        let c = sample(&g, &seeds, &SamplerConfig { rng_seed: 12, ..cfg(2, 3) }).unwrap();
        assert_ne!(a.local_nodes, c.local_nodes);
    }

    #[test]
    fn links_are_recorded_once_per_root() {
        let g = graph(&[("u0", 1), ("u0", 2)]);
        let users = g.node_type("users").unwrap();
        let sg = sample(&g, &[(NodeRef::new(users, 0), Timestamp(5))], &cfg(3, 10)).unwrap();
        // Two reviews, each linked to u0 once; hop 2 re-reaches u0 without a new node.
        assert_eq!(sg.local_nodes[0], vec![0]);
        assert_eq!(sg.num_edges(), 2);
        assert_eq!(sg.hop_of_node[1], vec![1, 1]);
    }

    #[test]
    fn shared_nodes_appear_once_per_root() {
        let g = graph(&[("u0", 1)]);
        let users = g.node_type("users").unwrap();
        let seed = (NodeRef::new(users, 0), Timestamp(5));
        let sg = sample(&g, &[seed, seed], &cfg(1, 10)).unwrap();
        assert_eq!(sg.local_nodes[1], vec![0, 0]);
        assert_eq!(sg.node_root[1], vec![0, 1]);
        assert_eq!(sg.seed_local, vec![0, 1]);
    }

    #[test]
    fn seed_errors() {
        let g = graph(&[("u0", 9)]);
        let reviews = g.node_type("reviews").unwrap();
        let users = g.node_type("users").unwrap();
        assert!(matches!(
            sample(&g, &[(NodeRef::new(reviews, 0), Timestamp(5))], &cfg(1, 1)),
            Err(SampleError::SeedInFuture { .. })
        ));
        assert!(matches!(
            sample(&g, &[(NodeRef::new(users, 3), Timestamp(5))], &cfg(1, 1)),
            Err(SampleError::SeedOutOfRange { .. })
        ));
        assert!(matches!(
            sample(&g, &[], &cfg(1, 0)),
            Err(SampleError::Config(_))
        ));
    }

    #[test]
    fn audit_flags_injected_future_node() {
        let g = graph(&[("u0", 3), ("u0", 7)]);
        let users = g.node_type("users").unwrap();
        let mut sg = sample(&g, &[(NodeRef::new(users, 0), Timestamp(5))], &cfg(1, 10)).unwrap();
        assert!(leakage_audit(&sg, &g));
        sg.local_nodes[1].push(1);
        sg.node_root[1].push(0);
        sg.hop_of_node[1].push(1);
        sg.seed_mask[1].push(false);
        assert!(!leakage_audit(&sg, &g));
    }

    #[test]
    fn untimed_graph_always_passes_audit() {
        let mut g = graph(&[("u0", 3), ("u1", 7), ("u0", 70)]);
        for t in g.node_times.iter_mut() {
            t.iter_mut().for_each(|x| *x = None);
        }
        let users = g.node_type("users").unwrap();
        for st in [-5, 0, 5, 100] {
            let sg = sample(&g, &[(NodeRef::new(users, 0), Timestamp(st))], &cfg(2, 10)).unwrap();
            assert!(leakage_audit(&sg, &g));
            assert_eq!(sg.local_nodes[1].len(), 2);
        }
    }

    #[test]
    fn subgraph_exports_as_graph() {
        let g = graph(&[("u0", 1), ("u0", 2), ("u1", 3)]);
        let users = g.node_type("users").unwrap();
        let sg = sample(&g, &[(NodeRef::new(users, 0), Timestamp(5))], &cfg(2, 10)).unwrap();
        let local = sg.to_graph(&g);
        assert_eq!(local.node_counts, vec![1, 2]);
        assert_eq!(local.adjacency[1].num_edges(), 2);
        let bytes = crate::snapshot::to_bytes(&local);
        assert_eq!(crate::snapshot::read_graph(bytes.as_slice()).unwrap(), local);
    }
}
