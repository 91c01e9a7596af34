//! Raw per-row feature columns and their dense numeric encoding.
//!
//! Key columns and a table's time column carry structure, not attributes, so
//! they never become features. Other timestamp columns are treated as numeric
//! seconds.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::db::{SemanticType, Table, Value};
use crate::rng::fnv1a;

/// Width of the hashed bag-of-tokens text encoding.
pub const TEXT_HASH_DIM: usize = 64;
/// Most frequent categories kept per column; the rest map to "unknown".
pub const MAX_VOCAB: usize = 64;
/// Category used for null categorical cells.
pub const NULL_CATEGORY: &str = "∅";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureValues {
    Numeric(Vec<Option<f64>>),
    Categorical(Vec<Option<String>>),
    Text(Vec<Option<String>>),
}

impl FeatureValues {
    pub fn len(&self) -> usize {
        match self {
            FeatureValues::Numeric(v) => v.len(),
            FeatureValues::Categorical(v) | FeatureValues::Text(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureColumn {
    pub name: String,
    pub values: FeatureValues,
}

/// Feature columns of one table (one node type).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub num_rows: usize,
    pub columns: Vec<FeatureColumn>,
}

impl FeatureTable {
    pub fn from_table(table: &Table) -> FeatureTable {
        let time_idx = table.spec.time_column_index();
        let columns = table
            .spec
            .columns
            .iter()
            .enumerate()
            .filter(|(ci, c)| !c.semantic_type.is_key() && Some(*ci) != time_idx)
            .map(|(ci, c)| {
                let cells = table.rows.iter().map(|r| &r[ci]);
                let values = match c.semantic_type {
                    SemanticType::Numeric => FeatureValues::Numeric(cells.map(Value::as_num).collect()),
                    SemanticType::Timestamp => FeatureValues::Numeric(
                        cells.map(|v| v.as_time().map(|t| t.0 as f64)).collect(),
                    ),
                    SemanticType::Categorical => FeatureValues::Categorical(
                        cells
                            .map(|v| match v {
                                Value::Cat(s) => Some(s.clone()),
                                _ => None,
                            })
                            .collect(),
                    ),
                    SemanticType::Text => FeatureValues::Text(
                        cells
                            .map(|v| match v {
                                Value::Text(s) => Some(s.clone()),
                                _ => None,
                            })
                            .collect(),
                    ),
                    SemanticType::PrimaryKey | SemanticType::ForeignKey { .. } => unreachable!(),
                };
                FeatureColumn {
                    name: c.name.clone(),
                    values,
                }
            })
            .collect();
        FeatureTable {
            num_rows: table.num_rows(),
            columns,
        }
    }

    /// The given rows, in order.
    pub fn subset(&self, rows: &[usize]) -> FeatureTable {
        fn pick<T: Clone>(v: &[T], rows: &[usize]) -> Vec<T> {
            rows.iter().map(|&r| v[r].clone()).collect()
        }
        let columns = self
            .columns
            .iter()
            .map(|c| FeatureColumn {
                name: c.name.clone(),
                values: match &c.values {
                    FeatureValues::Numeric(v) => FeatureValues::Numeric(pick(v, rows)),
                    FeatureValues::Categorical(v) => FeatureValues::Categorical(pick(v, rows)),
                    FeatureValues::Text(v) => FeatureValues::Text(pick(v, rows)),
                },
            })
            .collect();
        FeatureTable {
            num_rows: rows.len(),
            columns,
        }
    }
}

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Hashed bag of tokens, normalized to unit total mass. Null or empty text
/// encodes as all zeros.
pub fn hash_text(text: Option<&str>, out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    let Some(text) = text else { return };
    let mut n = 0usize;
    for tok in tokenize(text) {
        out[(fnv1a(tok.as_bytes()) % out.len() as u64) as usize] += 1.0;
        n += 1;
    }
    if n > 0 {
        out.iter_mut().for_each(|x| *x /= n as f64);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum ColumnEncoder {
    /// Standardized value plus a missing-mask indicator.
    Numeric { mean: f64, std: f64 },
    /// One-hot over `vocab`, slot 0 reserved for unknown values.
    Categorical { vocab: Vec<String> },
    Text,
}

impl ColumnEncoder {
    fn width(&self) -> usize {
        match self {
            ColumnEncoder::Numeric { .. } => 2,
            ColumnEncoder::Categorical { vocab } => vocab.len() + 1,
            ColumnEncoder::Text => TEXT_HASH_DIM,
        }
    }
}

/// Column-typed encoder turning a [`FeatureTable`] into a dense matrix.
///
/// Statistics (standardization, vocabularies) are fitted once on the rows
/// passed to [`TableEncoder::fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEncoder {
    columns: Vec<ColumnEncoder>,
}

impl TableEncoder {
    pub fn fit(table: &FeatureTable) -> TableEncoder {
        let columns = table
            .columns
            .iter()
            .map(|col| match &col.values {
                FeatureValues::Numeric(v) => {
                    let present: Vec<f64> = v.iter().flatten().copied().collect();
                    let n = present.len().max(1) as f64;
                    let mean = present.iter().sum::<f64>() / n;
                    let var = present.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                    let std = if var > 1e-24 { var.sqrt() } else { 1.0 };
                    ColumnEncoder::Numeric { mean, std }
                }
                FeatureValues::Categorical(v) => {
                    let mut counts: std::collections::HashMap<&str, usize> = Default::default();
                    for c in v {
                        *counts.entry(c.as_deref().unwrap_or(NULL_CATEGORY)).or_default() += 1;
                    }
                    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
                    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
                    ranked.truncate(MAX_VOCAB);
                    let mut vocab: Vec<String> = ranked.into_iter().map(|(s, _)| s.to_string()).collect();
                    vocab.sort();
                    ColumnEncoder::Categorical { vocab }
                }
                FeatureValues::Text(_) => ColumnEncoder::Text,
            })
            .collect();
        TableEncoder { columns }
    }

    pub fn width(&self) -> usize {
        self.columns.iter().map(ColumnEncoder::width).sum()
    }

    /// Encodes every row of `table`; the table must have the fitted schema.
    pub fn encode(&self, table: &FeatureTable) -> Array2<f64> {
        assert_eq!(table.columns.len(), self.columns.len(), "feature schema mismatch");
        let mut out = Array2::zeros((table.num_rows, self.width()));
        let mut offset = 0;
        for (enc, col) in self.columns.iter().zip(&table.columns) {
            match (enc, &col.values) {
                (ColumnEncoder::Numeric { mean, std }, FeatureValues::Numeric(v)) => {
                    for (r, x) in v.iter().enumerate() {
                        match x {
                            Some(x) => out[[r, offset]] = (x - mean) / std,
                            None => out[[r, offset + 1]] = 1.0,
                        }
                    }
                }
                (ColumnEncoder::Categorical { vocab }, FeatureValues::Categorical(v)) => {
                    for (r, c) in v.iter().enumerate() {
                        let c = c.as_deref().unwrap_or(NULL_CATEGORY);
                        let slot = vocab
                            .binary_search_by(|probe| probe.as_str().cmp(c))
                            .map(|i| i + 1)
                            .unwrap_or(0);
                        out[[r, offset + slot]] = 1.0;
                    }
                }
                (ColumnEncoder::Text, FeatureValues::Text(v)) => {
                    let mut buf = [0.0; TEXT_HASH_DIM];
                    for (r, t) in v.iter().enumerate() {
                        hash_text(t.as_deref(), &mut buf);
                        for (k, x) in buf.iter().enumerate() {
                            out[[r, offset + k]] = *x;
                        }
                    }
                }
                _ => panic!("feature column `{}` changed kind since fit", col.name),
            }
            offset += enc.width();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> FeatureTable {
        FeatureTable {
            num_rows: 3,
            columns: vec![
                FeatureColumn {
                    name: "x".into(),
                    values: FeatureValues::Numeric(vec![Some(1.0), None, Some(3.0)]),
                },
                FeatureColumn {
                    name: "c".into(),
                    values: FeatureValues::Categorical(vec![Some("b".into()), None, Some("a".into())]),
                },
                FeatureColumn {
                    name: "t".into(),
                    values: FeatureValues::Text(vec![Some("Hello hello".into()), None, Some("".into())]),
                },
            ],
        }
    }

    #[test]
    fn encodes_each_column_kind() {
        let t = table();
        let enc = TableEncoder::fit(&t);
        // numeric 2 + categorical (a, b, ∅) + unknown + text
        assert_eq!(enc.width(), 2 + 4 + TEXT_HASH_DIM);
        let x = enc.encode(&t);
        assert_eq!(x[[0, 0]], -1.0);
        assert_eq!(x[[2, 0]], 1.0);
        assert_eq!((x[[1, 0]], x[[1, 1]]), (0.0, 1.0));
        // vocab sorted: a, b, ∅ at slots 1..=3
        assert_eq!(x[[0, 2 + 2]], 1.0);
        assert_eq!(x[[1, 2 + 3]], 1.0);
        assert_eq!(x[[2, 2 + 1]], 1.0);
        let text0: f64 = x.row(0).iter().skip(6).sum();
        assert!((text0 - 1.0).abs() < 1e-12);
        assert_eq!(x.row(0).iter().skip(6).filter(|v| **v > 0.0).count(), 1);
        assert_eq!(x.row(1).iter().skip(6).sum::<f64>(), 0.0);
    }

    #[test]
    fn unseen_category_maps_to_unknown_slot() {
        let t = table();
        let enc = TableEncoder::fit(&t);
        let mut other = t.clone();
        other.columns[1].values = FeatureValues::Categorical(vec![Some("zzz".into()); 3]);
        let x = enc.encode(&other);
        assert_eq!(x[[0, 2]], 1.0);
    }
}
