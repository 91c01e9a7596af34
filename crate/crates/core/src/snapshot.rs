//! `RGH1` binary graph snapshot.
//!
//! All integers little-endian. `str` is a `u32` byte length followed by UTF-8.
//!
//! ```text
//! magic            4 bytes  "RGH1"
//! version          u32      1
//! policy           u8       0 = normal, 1 = permuted
//! policy_seed      u64      0 when normal
//! num_node_types   u32
//!   per type:      name: str, count: u64
//! per type:        count x i64 timestamps (-1 = null)
//! num_edge_types   u32
//!   per edge type: src_type u32, fkey_column str, dst_type u32,
//!                  direction u8 (0 = forward, 1 = reverse),
//!                  num_offsets u64, offsets u64 x num_offsets,
//!                  num_targets u64, targets u32 x num_targets
//! features         per type: num_columns u32, then per column:
//!                  name str, kind u8 (0 numeric, 1 categorical, 2 text),
//!                  numeric: count x f64 (NaN = null)
//!                  categorical/text: count x (present u8, [str if present])
//! ```
//!
//! A real timestamp equal to -1 reads back as null.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::db::Timestamp;
use crate::features::{FeatureColumn, FeatureTable, FeatureValues};
use crate::graph::{Csr, Direction, EdgePolicy, EdgeType, HeteroTemporalGraph, NodeType};

pub const MAGIC: &[u8; 4] = b"RGH1";
pub const VERSION: u32 = 1;
const NULL_TIME: i64 = -1;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not an RGH1 snapshot (bad magic)")]
    BadMagic,
    #[error("unsupported snapshot version {0}")]
    Version(u32),
    #[error("corrupt snapshot: {0}")]
    Corrupt(&'static str),
}

struct Out<W: Write>(W);

impl<W: Write> Out<W> {
    fn u8(&mut self, v: u8) -> io::Result<()> {
        self.0.write_all(&[v])
    }
    fn u32(&mut self, v: u32) -> io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn i64(&mut self, v: i64) -> io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn str(&mut self, s: &str) -> io::Result<()> {
        self.u32(s.len() as u32)?;
        self.0.write_all(s.as_bytes())
    }
}

struct In<R: Read>(R);

impl<R: Read> In<R> {
    fn bytes<const N: usize>(&mut self) -> io::Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b)?;
        Ok(b)
    }
    fn u8(&mut self) -> io::Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u32(&mut self) -> io::Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> io::Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn i64(&mut self) -> io::Result<i64> {
        Ok(i64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> io::Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn len(&mut self) -> Result<usize, SnapshotError> {
        let n = self.u64()?;
        usize::try_from(n).map_err(|_| SnapshotError::Corrupt("length overflow"))
    }
    fn str(&mut self) -> Result<String, SnapshotError> {
        let n = self.u32()? as usize;
        let mut buf = vec![0u8; n];
        self.0.read_exact(&mut buf)?;
        String::from_utf8(buf).map_err(|_| SnapshotError::Corrupt("invalid utf-8"))
    }
}

pub fn write_graph<W: Write>(g: &HeteroTemporalGraph, w: W) -> Result<(), SnapshotError> {
    let mut o = Out(w);
    o.0.write_all(MAGIC)?;
    o.u32(VERSION)?;
    match g.policy {
        EdgePolicy::Normal => {
            o.u8(0)?;
            o.u64(0)?;
        }
        EdgePolicy::Permuted { seed } => {
            o.u8(1)?;
            o.u64(seed)?;
        }
    }
    o.u32(g.node_types.len() as u32)?;
    for (name, count) in g.node_types.iter().zip(&g.node_counts) {
        o.str(name)?;
        o.u64(*count as u64)?;
    }
    for times in &g.node_times {
        for t in times {
            o.i64(t.map_or(NULL_TIME, |t| t.0))?;
        }
    }
    o.u32(g.edge_types.len() as u32)?;
    for (e, csr) in g.edge_types.iter().zip(&g.adjacency) {
        o.u32(e.src_type.0 as u32)?;
        o.str(&e.fkey_column)?;
        o.u32(e.dst_type.0 as u32)?;
        o.u8(match e.direction {
            Direction::Forward => 0,
            Direction::Reverse => 1,
        })?;
        o.u64(csr.offsets.len() as u64)?;
        for &x in &csr.offsets {
            o.u64(x as u64)?;
        }
        o.u64(csr.targets.len() as u64)?;
        for &x in &csr.targets {
            o.u32(x as u32)?;
        }
    }
    for ft in &g.features {
        o.u32(ft.columns.len() as u32)?;
        for col in &ft.columns {
            o.str(&col.name)?;
            match &col.values {
                FeatureValues::Numeric(v) => {
                    o.u8(0)?;
                    for x in v {
                        o.f64(x.unwrap_or(f64::NAN))?;
                    }
                }
                FeatureValues::Categorical(v) | FeatureValues::Text(v) => {
                    o.u8(if matches!(col.values, FeatureValues::Categorical(_)) { 1 } else { 2 })?;
                    for s in v {
                        match s {
                            Some(s) => {
                                o.u8(1)?;
                                o.str(s)?;
                            }
                            None => o.u8(0)?,
                        }
                    }
                }
            }
        }
    }
    o.0.flush()?;
    Ok(())
}

pub fn read_graph<R: Read>(r: R) -> Result<HeteroTemporalGraph, SnapshotError> {
    let mut i = In(r);
    if &i.bytes::<4>()? != MAGIC {
        return Err(SnapshotError::BadMagic);
    }
    let version = i.u32()?;
    if version != VERSION {
        return Err(SnapshotError::Version(version));
    }
    let policy = match (i.u8()?, i.u64()?) {
        (0, _) => EdgePolicy::Normal,
        (1, seed) => EdgePolicy::Permuted { seed },
        _ => return Err(SnapshotError::Corrupt("policy tag")),
    };
    let n_types = i.u32()? as usize;
    let mut node_types = Vec::with_capacity(n_types);
    let mut node_counts = Vec::with_capacity(n_types);
    for _ in 0..n_types {
        node_types.push(i.str()?);
        node_counts.push(i.len()?);
    }
    let mut node_times = Vec::with_capacity(n_types);
    for &count in &node_counts {
        let mut times = Vec::with_capacity(count);
        for _ in 0..count {
            let t = i.i64()?;
            times.push((t != NULL_TIME).then_some(Timestamp(t)));
        }
        node_times.push(times);
    }
    let n_edges = i.u32()? as usize;
    let mut edge_types = Vec::with_capacity(n_edges);
    let mut adjacency = Vec::with_capacity(n_edges);
    for _ in 0..n_edges {
        let src = i.u32()? as usize;
        let fkey_column = i.str()?;
        let dst = i.u32()? as usize;
        if src >= n_types || dst >= n_types {
            return Err(SnapshotError::Corrupt("edge type references unknown node type"));
        }
        let direction = match i.u8()? {
            0 => Direction::Forward,
            1 => Direction::Reverse,
            _ => return Err(SnapshotError::Corrupt("direction tag")),
        };
        let n_off = i.len()?;
        if n_off != node_counts[src] + 1 {
            return Err(SnapshotError::Corrupt("offset count does not match node count"));
        }
        let offsets = (0..n_off).map(|_| i.len()).collect::<Result<Vec<_>, _>>()?;
        let n_tgt = i.len()?;
        if offsets.last() != Some(&n_tgt) {
            return Err(SnapshotError::Corrupt("offsets do not end at target count"));
        }
        let targets = (0..n_tgt)
            .map(|_| i.u32().map(|x| x as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if targets.iter().any(|&t| t >= node_counts[dst]) {
            return Err(SnapshotError::Corrupt("edge target out of range"));
        }
        edge_types.push(EdgeType {
            src_type: NodeType(src),
            fkey_column,
            dst_type: NodeType(dst),
            direction,
        });
        adjacency.push(Csr { offsets, targets });
    }
    let mut features = Vec::with_capacity(n_types);
    for &count in &node_counts {
        let n_cols = i.u32()? as usize;
        let mut columns = Vec::with_capacity(n_cols);
        for _ in 0..n_cols {
            let name = i.str()?;
            let kind = i.u8()?;
            let values = match kind {
                0 => FeatureValues::Numeric(
                    (0..count)
                        .map(|_| i.f64().map(|x| (!x.is_nan()).then_some(x)))
                        .collect::<Result<_, _>>()?,
                ),
                1 | 2 => {
                    let mut v = Vec::with_capacity(count);
                    for _ in 0..count {
                        v.push(match i.u8()? {
                            0 => None,
                            _ => Some(i.str()?),
                        });
                    }
                    if kind == 1 {
                        FeatureValues::Categorical(v)
                    } else {
                        FeatureValues::Text(v)
                    }
                }
                _ => return Err(SnapshotError::Corrupt("feature kind tag")),
            };
            columns.push(FeatureColumn { name, values });
        }
        features.push(FeatureTable {
            num_rows: count,
            columns,
        });
    }
    Ok(HeteroTemporalGraph {
        node_types,
        node_counts,
        node_times,
        edge_types,
        adjacency,
        features,
        policy,
    })
}

pub fn to_bytes(g: &HeteroTemporalGraph) -> Vec<u8> {
    let mut buf = Vec::new();
    write_graph(g, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;
    use crate::synth::{generate, Signal, SynthConfig};

    #[test]
    fn snapshot_round_trips_graph() {
        let mut cfg = SynthConfig::new(Signal::RecencyChurn, 3);
        cfg.n_entities = 30;
        cfg.n_items = 12;
        let out = generate(&cfg).unwrap();
        for policy in [EdgePolicy::Normal, EdgePolicy::Permuted { seed: 5 }] {
            let g = build_graph(&out.db, policy);
            let bytes = to_bytes(&g);
            assert_eq!(&bytes[..4], b"RGH1");
            let back = read_graph(bytes.as_slice()).unwrap();
            assert_eq!(back, g);
            assert_eq!(to_bytes(&back), bytes);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(read_graph(&b"NOPE...."[..]), Err(SnapshotError::BadMagic)));
        let mut bytes = b"RGH1".to_vec();
        bytes.extend(9u32.to_le_bytes());
        assert!(matches!(read_graph(bytes.as_slice()), Err(SnapshotError::Version(9))));
        assert!(matches!(read_graph(&b"RGH1"[..]), Err(SnapshotError::Io(_))));
    }
}
