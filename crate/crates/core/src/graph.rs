//! Exact heterogeneous temporal graph of a relational database.
//!
//! One node type per table, one node per row, and for every foreign-key
//! column a forward edge type (fkey holder -> referenced row) plus its
//! reverse. Edge type `2k` is the forward relation of the k-th fkey column
//! (manifest order) and `2k + 1` its reverse.

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::db::{Database, Timestamp};
use crate::features::FeatureTable;
use crate::rng::rng_for;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("edge type {edge_type} starts at node type `{expected}`, node is `{found}`")]
    TypeMismatch {
        edge_type: String,
        expected: String,
        found: String,
    },
    #[error("node {index} out of range for type `{node_type}` ({count} nodes)")]
    NodeOutOfRange {
        node_type: String,
        index: usize,
        count: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeType(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EdgeTypeId(pub usize);

impl EdgeTypeId {
    pub fn reverse(self) -> EdgeTypeId {
        EdgeTypeId(self.0 ^ 1)
    }

    /// The forward member of the pair.
    pub fn canonical(self) -> EdgeTypeId {
        EdgeTypeId(self.0 & !1)
    }

    pub fn is_forward(self) -> bool {
        self.0 & 1 == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeRef {
    pub node_type: NodeType,
    pub index: usize,
}

impl NodeRef {
    pub fn new(node_type: NodeType, index: usize) -> Self {
        NodeRef { node_type, index }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Forward,
    Reverse,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EdgeType {
    pub src_type: NodeType,
    pub fkey_column: String,
    pub dst_type: NodeType,
    pub direction: Direction,
}

/// Compressed sparse rows: neighbors of source `i` are
/// `targets[offsets[i]..offsets[i + 1]]`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Csr {
    pub offsets: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Csr {
    /// Builds CSR rows from `(src, dst)` pairs with a counting sort over
    /// sources. Within a row, pairs keep their input order.
    pub fn from_pairs(num_src: usize, pairs: &[(usize, usize)]) -> Csr {
        let mut offsets = vec![0usize; num_src + 1];
        for &(s, _) in pairs {
            offsets[s + 1] += 1;
        }
        for i in 0..num_src {
            offsets[i + 1] += offsets[i];
        }
        let mut cursor = offsets.clone();
        let mut targets = vec![0usize; pairs.len()];
        for &(s, d) in pairs {
            targets[cursor[s]] = d;
            cursor[s] += 1;
        }
        Csr { offsets, targets }
    }

    pub fn num_rows(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn num_edges(&self) -> usize {
        self.targets.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.targets[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        (0..self.num_rows())
            .flat_map(|s| self.row(s).iter().map(move |&d| (s, d)))
            .collect()
    }

    /// Transpose with `num_dst` rows; rows list sources in ascending order.
    pub fn transpose(&self, num_dst: usize) -> Csr {
        Csr::from_pairs(
            num_dst,
            &self.pairs().into_iter().map(|(s, d)| (d, s)).collect::<Vec<_>>(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgePolicy {
    Normal,
    /// Destinations of every edge type are shuffled among its edges with a
    /// seeded permutation; sources stay in place.
    Permuted { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeteroTemporalGraph {
    pub node_types: Vec<String>,
    pub node_counts: Vec<usize>,
    pub node_times: Vec<Vec<Option<Timestamp>>>,
    pub edge_types: Vec<EdgeType>,
    pub adjacency: Vec<Csr>,
    pub features: Vec<FeatureTable>,
    pub policy: EdgePolicy,
}

impl HeteroTemporalGraph {
    pub fn num_node_types(&self) -> usize {
        self.node_types.len()
    }

    pub fn node_type(&self, name: &str) -> Option<NodeType> {
        self.node_types.iter().position(|n| n == name).map(NodeType)
    }

    pub fn type_name(&self, t: NodeType) -> &str {
        &self.node_types[t.0]
    }

    pub fn num_nodes(&self, t: NodeType) -> usize {
        self.node_counts[t.0]
    }

    pub fn time(&self, n: NodeRef) -> Option<Timestamp> {
        self.node_times[n.node_type.0][n.index]
    }

    pub fn edge_type(&self, et: EdgeTypeId) -> &EdgeType {
        &self.edge_types[et.0]
    }

    pub fn edge_type_ids(&self) -> impl Iterator<Item = EdgeTypeId> {
        (0..self.edge_types.len()).map(EdgeTypeId)
    }

    /// Edge types whose source side is `t`, ascending.
    pub fn edge_types_from(&self, t: NodeType) -> impl Iterator<Item = EdgeTypeId> + '_ {
        self.edge_type_ids()
            .filter(move |et| self.edge_types[et.0].src_type == t)
    }

    pub fn find_edge_type(&self, src: &str, fkey_column: &str, dst: &str) -> Option<EdgeTypeId> {
        let (s, d) = (self.node_type(src)?, self.node_type(dst)?);
        self.edge_type_ids().find(|et| {
            let e = &self.edge_types[et.0];
            e.src_type == s && e.dst_type == d && e.fkey_column == fkey_column
        })
    }

    pub fn describe(&self, et: EdgeTypeId) -> String {
        let e = self.edge_type(et);
        format!(
            "{}.{}.{}.{}",
            self.type_name(e.src_type),
            e.fkey_column,
            self.type_name(e.dst_type),
            match e.direction {
                Direction::Forward => "fwd",
                Direction::Reverse => "rev",
            }
        )
    }

    /// Adjacency row of `n` under `et` as raw indices of `et`'s destination type.
    pub fn neighbor_indices(&self, n: NodeRef, et: EdgeTypeId) -> Result<&[usize], GraphError> {
        let e = self.edge_type(et);
        if e.src_type != n.node_type {
            return Err(GraphError::TypeMismatch {
                edge_type: self.describe(et),
                expected: self.type_name(e.src_type).to_string(),
                found: self.type_name(n.node_type).to_string(),
            });
        }
        let count = self.num_nodes(n.node_type);
        if n.index >= count {
            return Err(GraphError::NodeOutOfRange {
                node_type: self.type_name(n.node_type).to_string(),
                index: n.index,
                count,
            });
        }
        Ok(self.adjacency[et.0].row(n.index))
    }

    pub fn neighbors(&self, n: NodeRef, et: EdgeTypeId) -> Result<Vec<NodeRef>, GraphError> {
        let dst = self.edge_type(et).dst_type;
        Ok(self
            .neighbor_indices(n, et)?
            .iter()
            .map(|&i| NodeRef::new(dst, i))
            .collect())
    }

    pub fn num_edges(&self, et: EdgeTypeId) -> usize {
        self.adjacency[et.0].num_edges()
    }
}

impl fmt::Display for HeteroTemporalGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, n) in self.node_types.iter().zip(&self.node_counts) {
            writeln!(f, "node type {name}: {n}")?;
        }
        for et in self.edge_type_ids() {
            writeln!(f, "edge type {}: {}", self.describe(et), self.num_edges(et))?;
        }
        Ok(())
    }
}

/// Builds the graph. Dangling and null foreign keys produce no edge.
pub fn build_graph(db: &Database, policy: EdgePolicy) -> HeteroTemporalGraph {
    let node_types: Vec<String> = db.tables.keys().cloned().collect();
    let type_of: HashMap<&str, NodeType> = node_types
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), NodeType(i)))
        .collect();
    let node_counts: Vec<usize> = db.tables.values().map(|t| t.num_rows()).collect();
    let node_times = db
        .tables
        .values()
        .map(|t| (0..t.num_rows()).map(|r| t.time_of(r)).collect())
        .collect();
    let features = db.tables.values().map(FeatureTable::from_table).collect();

    let mut edge_types = Vec::with_capacity(2 * db.fkeys.len());
    let mut adjacency = Vec::with_capacity(2 * db.fkeys.len());
    for (k, link) in db.fkeys.iter().enumerate() {
        let src = type_of[link.table.as_str()];
        let dst = type_of[link.target.as_str()];
        let mut pairs: Vec<(usize, usize)> = link
            .resolved
            .iter()
            .enumerate()
            .filter_map(|(row, hit)| hit.map(|d| (row, d)))
            .collect();
        if let EdgePolicy::Permuted { seed } = policy {
            let mut dsts: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            dsts.shuffle(&mut rng_for(seed, &format!("permute-edges/{k}")));
            for (p, d) in pairs.iter_mut().zip(dsts) {
                p.1 = d;
            }
        }
        let forward = Csr::from_pairs(node_counts[src.0], &pairs);
        let reverse = forward.transpose(node_counts[dst.0]);
        edge_types.push(EdgeType {
            src_type: src,
            fkey_column: link.column.clone(),
            dst_type: dst,
            direction: Direction::Forward,
        });
        edge_types.push(EdgeType {
            src_type: dst,
            fkey_column: link.column.clone(),
            dst_type: src,
            direction: Direction::Reverse,
        });
        adjacency.push(forward);
        adjacency.push(reverse);
    }

    HeteroTemporalGraph {
        node_types,
        node_counts,
        node_times,
        edge_types,
        adjacency,
        features,
        policy,
    }
}

/// Brute-force check of `g` against `db`: node counts and times must match the
/// tables, and every forward edge set must equal the nested-loop join of
/// fkey cells against primary-key values; reverse adjacency must be the
/// transpose. Intended for small databases (quadratic in table size).
pub fn graph_oracle_check(db: &Database, g: &HeteroTemporalGraph) -> bool {
    if g.node_types.len() != db.tables.len() {
        return false;
    }
    for (i, t) in db.tables.values().enumerate() {
        if g.node_types[i] != t.spec.name || g.node_counts[i] != t.num_rows() {
            return false;
        }
        for r in 0..t.num_rows() {
            if g.node_times[i][r] != t.time_of(r) {
                return false;
            }
        }
    }

    let mut forward_types = 0;
    for src_table in db.tables.values() {
        let pk_target = |target: &str| db.tables.get(target).expect("validated fkey target");
        for (ci, col) in src_table.spec.columns.iter().enumerate() {
            let crate::db::SemanticType::ForeignKey { target } = &col.semantic_type else {
                continue;
            };
            forward_types += 1;
            let dst_table = pk_target(target);
            let mut joined = Vec::new();
            for (i, row) in src_table.rows.iter().enumerate() {
                let Some(fk) = row[ci].as_key() else { continue };
                for j in 0..dst_table.num_rows() {
                    if dst_table.primary_key(j) == fk {
                        joined.push((i, j));
                    }
                }
            }
            let Some(et) = g.find_edge_type(&src_table.spec.name, &col.name, target) else {
                return false;
            };
            if !et.is_forward() {
                return false;
            }
            let mut built = g.adjacency[et.0].pairs();
            built.sort_unstable();
            joined.sort_unstable();
            if built != joined {
                return false;
            }
            let mut rev: Vec<(usize, usize)> = g.adjacency[et.reverse().0]
                .pairs()
                .into_iter()
                .map(|(d, s)| (s, d))
                .collect();
            rev.sort_unstable();
            if rev != joined {
                return false;
            }
        }
    }
    forward_types * 2 == g.edge_types.len()
}
