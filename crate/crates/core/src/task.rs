//! Training-table generation for entity classification, entity regression and
//! recommendation tasks, with strictly temporal train/val/test splits.
//!
//! Seed times lie on a regular grid of spacing `seed_stride` (default: the
//! label window) anchored at the validation timestamp for the train and
//! validation splits and at the test timestamp for the test split. The
//! target of a row with seed time `t` is computed from event rows whose time
//! falls in `(t, t + window]`. Only entities with at least one event strictly
//! before `t` get a row.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::db::{format_float, Database, DbError, SemanticType, Timestamp};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error(transparent)]
    Db(#[from] DbError),
    #[error("invalid task spec `{task}`: {reason}")]
    InvalidSpec { task: String, reason: String },
    #[error("invalid split: val_timestamp {val} must precede test_timestamp {test}")]
    InvalidSplit { val: Timestamp, test: Timestamp },
    #[error("training table csv, line {line}: {reason}")]
    Csv { line: usize, reason: String },
}

pub type Result<T, E = TaskError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    EntityClassification,
    EntityRegression,
    Recommendation,
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskType::EntityClassification => "entity_classification",
            TaskType::EntityRegression => "entity_regression",
            TaskType::Recommendation => "recommendation",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelRule {
    /// 1 if any event falls in the window.
    #[default]
    Exists,
    Count,
    Sum { value_column: String },
    /// 1 if at least `min_count` events fall in the window.
    Threshold { min_count: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub task_type: TaskType,
    pub entity_table: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst_table: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub event_table: String,
    pub event_fkey_to_entity: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_fkey_to_dst: Option<String>,
    #[serde(default)]
    pub label_rule: LabelRule,
    #[serde(default)]
    pub negate: bool,
    /// Label window length in seconds.
    pub window: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_stride: Option<i64>,
}

impl TaskSpec {
    pub fn stride(&self) -> i64 {
        self.seed_stride.unwrap_or(self.window)
    }

    fn invalid(&self, reason: impl Into<String>) -> TaskError {
        TaskError::InvalidSpec {
            task: self.name.clone(),
            reason: reason.into(),
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.window <= 0 {
            return Err(self.invalid("window must be positive"));
        }
        if self.stride() <= 0 {
            return Err(self.invalid("seed_stride must be positive"));
        }
        match self.task_type {
            TaskType::EntityClassification => {
                if !matches!(self.label_rule, LabelRule::Exists | LabelRule::Threshold { .. }) {
                    return Err(self.invalid("classification needs an exists or threshold rule"));
                }
            }
            TaskType::EntityRegression => {
                if !matches!(self.label_rule, LabelRule::Count | LabelRule::Sum { .. }) {
                    return Err(self.invalid("regression needs a count or sum rule"));
                }
                if self.negate {
                    return Err(self.invalid("negate applies to binary labels only"));
                }
            }
            TaskType::Recommendation => {
                if self.dst_table.is_none() || self.event_fkey_to_dst.is_none() {
                    return Err(self.invalid("recommendation needs dst_table and event_fkey_to_dst"));
                }
                if self.k.unwrap_or(0) < 1 {
                    return Err(self.invalid("recommendation needs k >= 1"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub val_timestamp: Timestamp,
    pub test_timestamp: Timestamp,
}

impl SplitConfig {
    pub fn check(&self) -> Result<()> {
        if self.val_timestamp >= self.test_timestamp {
            return Err(TaskError::InvalidSplit {
                val: self.val_timestamp,
                test: self.test_timestamp,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Scalar(f64),
    /// Distinct destination indices, ascending.
    Links(Vec<usize>),
}

impl Target {
    pub fn scalar(&self) -> Option<f64> {
        match self {
            Target::Scalar(x) => Some(*x),
            Target::Links(_) => None,
        }
    }

    pub fn links(&self) -> &[usize] {
        match self {
            Target::Links(l) => l,
            Target::Scalar(_) => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRow {
    pub entity: usize,
    pub seed_time: Timestamp,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTable {
    pub task: String,
    pub task_type: TaskType,
    pub entity_type: String,
    pub dst_type: Option<String>,
    pub k: Option<usize>,
    pub window: i64,
    pub split: Split,
    pub rows: Vec<TrainingRow>,
}

impl TrainingTable {
    /// A table with the metadata of `spec` and no rows.
    pub fn empty(spec: &TaskSpec, split: Split) -> TrainingTable {
        TrainingTable {
            task: spec.name.clone(),
            task_type: spec.task_type,
            entity_type: spec.entity_table.clone(),
            dst_type: spec.dst_table.clone(),
            k: spec.k,
            window: spec.window,
            split,
            rows: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn scalar_targets(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.target.scalar()).collect()
    }

    /// CSV with columns `entity_type, entity_index, seed_time, target`;
    /// recommendation targets are `|`-separated destination indices.
    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["entity_type", "entity_index", "seed_time", "target"])
            .expect("in-memory csv");
        for r in &self.rows {
            let target = match &r.target {
                Target::Scalar(x) => format_float(*x),
                Target::Links(l) => l
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join("|"),
            };
            w.write_record([
                self.entity_type.clone(),
                r.entity.to_string(),
                r.seed_time.0.to_string(),
                target,
            ])
            .expect("in-memory csv");
        }
        w.into_inner().expect("in-memory csv")
    }

    /// Parses rows written by [`TrainingTable::to_csv_bytes`]; `template`
    /// supplies the table metadata (its rows are ignored).
    pub fn from_csv_bytes(bytes: &[u8], template: &TrainingTable) -> Result<TrainingTable> {
        let mut reader = csv::Reader::from_reader(bytes);
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| TaskError::Csv {
                line: 1,
                reason: e.to_string(),
            })?
            .iter()
            .map(str::to_string)
            .collect();
        if header != ["entity_type", "entity_index", "seed_time", "target"] {
            return Err(TaskError::Csv {
                line: 1,
                reason: format!("unexpected header {header:?}"),
            });
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let line = i + 2;
            let bad = |reason: String| TaskError::Csv { line, reason };
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            if &rec[0] != template.entity_type.as_str() {
                return Err(bad(format!("entity type `{}`", &rec[0])));
            }
            let entity = rec[1].parse().map_err(|_| bad(format!("entity index `{}`", &rec[1])))?;
            let seed_time = Timestamp(rec[2].parse().map_err(|_| bad(format!("seed time `{}`", &rec[2])))?);
            let target = if template.task_type == TaskType::Recommendation {
                let links = if rec[3].is_empty() {
                    Vec::new()
                } else {
                    rec[3]
                        .split('|')
                        .map(|s| s.parse::<usize>().map_err(|_| bad(format!("link `{s}`"))))
                        .collect::<Result<Vec<_>>>()?
                };
                Target::Links(links)
            } else {
                Target::Scalar(rec[3].parse().map_err(|_| bad(format!("target `{}`", &rec[3])))?)
            };
            rows.push(TrainingRow {
                entity,
                seed_time,
                target,
            });
        }
        Ok(TrainingTable {
            rows,
            ..template.clone()
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskTables {
    pub spec: TaskSpec,
    pub split: SplitConfig,
    pub train: TrainingTable,
    pub val: TrainingTable,
    pub test: TrainingTable,
    /// Rows whose label window would cross a split boundary.
    pub dropped: usize,
}

impl TaskTables {
    pub fn get(&self, split: Split) -> &TrainingTable {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Per-entity sorted event times, used for label computation.
#[derive(Debug, Clone)]
pub struct EventIndex {
    /// `(time, event row)` per entity, sorted.
    events: Vec<Vec<(Timestamp, usize)>>,
    /// Entity has an event with a null timestamp (always counts as activity).
    untimed_activity: Vec<bool>,
    pub min_time: Option<Timestamp>,
    pub max_time: Option<Timestamp>,
}

impl EventIndex {
    pub fn build(db: &Database, spec: &TaskSpec) -> Result<EventIndex> {
        let entity = db.table(&spec.entity_table)?;
        let events = db.table(&spec.event_table)?;
        if events.spec.time_column.is_none() {
            return Err(spec.invalid(format!("event table `{}` has no time column", spec.event_table)));
        }
        let link = db
            .fkey(&spec.event_table, &spec.event_fkey_to_entity)
            .ok_or_else(|| {
                spec.invalid(format!(
                    "`{}.{}` is not a foreign key",
                    spec.event_table, spec.event_fkey_to_entity
                ))
            })?;
        if link.target != spec.entity_table {
            return Err(spec.invalid(format!(
                "`{}.{}` references `{}`, not `{}`",
                spec.event_table, spec.event_fkey_to_entity, link.target, spec.entity_table
            )));
        }
        let mut per_entity = vec![Vec::new(); entity.num_rows()];
        let mut untimed = vec![false; entity.num_rows()];
        let (mut lo, mut hi) = (None::<Timestamp>, None::<Timestamp>);
        for (row, hit) in link.resolved.iter().enumerate() {
            let Some(e) = *hit else { continue };
            match events.time_of(row) {
                Some(t) => {
                    per_entity[e].push((t, row));
                    lo = Some(lo.map_or(t, |x| x.min(t)));
                    hi = Some(hi.map_or(t, |x| x.max(t)));
                }
                None => untimed[e] = true,
            }
        }
        for v in per_entity.iter_mut() {
            v.sort_unstable();
        }
        Ok(EventIndex {
            events: per_entity,
            untimed_activity: untimed,
            min_time: lo,
            max_time: hi,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.events.len()
    }

    /// Active at `t`: some event strictly before `t` (or an untimed event).
    pub fn is_active(&self, entity: usize, t: Timestamp) -> bool {
        self.untimed_activity[entity] || self.events[entity].first().is_some_and(|e| e.0 < t)
    }

    /// Event rows of `entity` with time in `(from, to]`.
    pub fn window(&self, entity: usize, from: Timestamp, to: Timestamp) -> &[(Timestamp, usize)] {
        let ev = &self.events[entity];
        let a = ev.partition_point(|e| e.0 <= from);
        let b = ev.partition_point(|e| e.0 <= to);
        &ev[a..b.max(a)]
    }

    pub fn count(&self, entity: usize, from: Timestamp, to: Timestamp) -> usize {
        self.window(entity, from, to).len()
    }
}

fn seed_grid(anchor: i64, stride: i64, lo_exclusive: i64, hi_exclusive: i64, backwards: bool) -> Vec<Timestamp> {
    let mut out = Vec::new();
    if backwards {
        let mut t = anchor - stride;
        while t > lo_exclusive {
            out.push(Timestamp(t));
            t -= stride;
        }
        out.reverse();
    } else {
        let mut t = anchor;
        while t < hi_exclusive {
            out.push(Timestamp(t));
            t += stride;
        }
    }
    out
}

pub fn make_training_table(db: &Database, spec: &TaskSpec, split: SplitConfig) -> Result<TaskTables> {
    spec.check()?;
    split.check()?;
    let index = EventIndex::build(db, spec)?;
    let events = db.table(&spec.event_table)?;

    let value_col = match &spec.label_rule {
        LabelRule::Sum { value_column } => {
            let ci = events
                .spec
                .column_index(value_column)
                .ok_or_else(|| DbError::NoSuchColumn {
                    table: spec.event_table.clone(),
                    column: value_column.clone(),
                })?;
            if events.spec.columns[ci].semantic_type != SemanticType::Numeric {
                return Err(spec.invalid(format!("sum column `{value_column}` is not numeric")));
            }
            Some(ci)
        }
        _ => None,
    };
    let dst_link = match spec.task_type {
        TaskType::Recommendation => {
            let col = spec.event_fkey_to_dst.as_deref().unwrap_or_default();
            let dst = spec.dst_table.as_deref().unwrap_or_default();
            db.table(dst)?;
            let link = db
                .fkey(&spec.event_table, col)
                .ok_or_else(|| spec.invalid(format!("`{}.{col}` is not a foreign key", spec.event_table)))?;
            if link.target != dst {
                return Err(spec.invalid(format!("`{}.{col}` does not reference `{dst}`", spec.event_table)));
            }
            Some(link)
        }
        _ => None,
    };

    let template = |s: Split| TrainingTable::empty(spec, s);
    let mut tables = TaskTables {
        spec: spec.clone(),
        split,
        train: template(Split::Train),
        val: template(Split::Val),
        test: template(Split::Test),
        dropped: 0,
    };
    let (Some(min_t), Some(max_t)) = (index.min_time, index.max_time) else {
        return Ok(tables);
    };

    let stride = spec.stride();
    let (val_ts, test_ts) = (split.val_timestamp.0, split.test_timestamp.0);
    let grids = [
        (Split::Train, seed_grid(val_ts, stride, min_t.0, val_ts, true), val_ts),
        (Split::Val, seed_grid(val_ts, stride, min_t.0, test_ts, false), test_ts),
        (Split::Test, seed_grid(test_ts, stride, min_t.0, max_t.0, false), i64::MAX),
    ];

    let target_of = |entity: usize, t: Timestamp| -> Target {
        let hits = index.window(entity, t, Timestamp(t.0 + spec.window));
        let binary = |b: bool| Target::Scalar(if b != spec.negate { 1.0 } else { 0.0 });
        if let Some(link) = dst_link {
            let mut dsts: Vec<usize> = hits.iter().filter_map(|&(_, row)| link.resolved[row]).collect();
            dsts.sort_unstable();
            dsts.dedup();
            return Target::Links(dsts);
        }
        match &spec.label_rule {
            LabelRule::Exists => binary(!hits.is_empty()),
            LabelRule::Threshold { min_count } => binary(hits.len() >= *min_count),
            LabelRule::Count => Target::Scalar(hits.len() as f64),
            LabelRule::Sum { .. } => {
                let ci = value_col.expect("sum rule resolved its column");
                Target::Scalar(
                    hits.iter()
                        .filter_map(|&(_, row)| events.rows[row][ci].as_num())
                        .sum(),
                )
            }
        }
    };

    for (which, grid, boundary) in grids {
        let mut rows = Vec::new();
        for entity in 0..index.num_entities() {
            for &t in &grid {
                if !index.is_active(entity, t) {
                    continue;
                }
                if t.0.saturating_add(spec.window) > boundary {
                    tables.dropped += 1;
                    continue;
                }
                let target = target_of(entity, t);
                if matches!(&target, Target::Links(l) if l.is_empty()) {
                    continue;
                }
                rows.push(TrainingRow {
                    entity,
                    seed_time: t,
                    target,
                });
            }
        }
        match which {
            Split::Train => tables.train.rows = rows,
            Split::Val => tables.val.rows = rows,
            Split::Test => tables.test.rows = rows,
        }
    }
    Ok(tables)
}

/// True iff every row respects its split's temporal boundaries.
pub fn leakage_guard(t: &TrainingTable, split: &SplitConfig) -> bool {
    let (val, test) = (split.val_timestamp.0, split.test_timestamp.0);
    t.rows.iter().all(|r| {
        let s = r.seed_time.0;
        let end = s.saturating_add(t.window);
        match t.split {
            Split::Train => end <= val,
            Split::Val => s >= val && end <= test,
            Split::Test => s >= test,
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StatsReport {
    Classification {
        rows: usize,
        positives: usize,
        negatives: usize,
    },
    Regression {
        rows: usize,
        min: f64,
        median: f64,
        mean: f64,
        max: f64,
    },
    Recommendation {
        rows: usize,
        links: usize,
        avg_links_per_row: f64,
        /// Percentage of links already present in the earlier splits.
        repeated_link_pct: f64,
    },
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Target statistics of `t`. `earlier` holds the tables of preceding splits,
/// used for the repeated-link percentage of recommendation tasks.
pub fn table_stats(t: &TrainingTable, earlier: &[&TrainingTable]) -> StatsReport {
    let rows = t.len();
    match t.task_type {
        TaskType::EntityClassification => {
            let positives = t.rows.iter().filter(|r| r.target.scalar() == Some(1.0)).count();
            StatsReport::Classification {
                rows,
                positives,
                negatives: rows - positives,
            }
        }
        TaskType::EntityRegression => {
            let v = t.scalar_targets();
            StatsReport::Regression {
                rows,
                min: v.iter().copied().fold(f64::INFINITY, f64::min),
                median: median(&v),
                mean: v.iter().sum::<f64>() / v.len().max(1) as f64,
                max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        }
        TaskType::Recommendation => {
            let seen: HashSet<(usize, usize)> = earlier
                .iter()
                .flat_map(|e| e.rows.iter())
                .flat_map(|r| r.target.links().iter().map(move |&d| (r.entity, d)))
                .collect();
            let links: usize = t.rows.iter().map(|r| r.target.links().len()).sum();
            let repeated = t
                .rows
                .iter()
                .flat_map(|r| r.target.links().iter().map(move |&d| (r.entity, d)))
                .filter(|p| seen.contains(p))
                .count();
            StatsReport::Recommendation {
                rows,
                links,
                avg_links_per_row: links as f64 / rows.max(1) as f64,
                repeated_link_pct: 100.0 * repeated as f64 / links.max(1) as f64,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::db::{ColumnSpec, Table, TableSpec, Value};

    const DAY: i64 = 86_400;

    fn col(name: &str, t: SemanticType) -> ColumnSpec {
        ColumnSpec {
            name: name.into(),
            semantic_type: t,
            nullable: false,
        }
    }

    /// customers c0..c2, products p0..p2, purchases(customer, product, ts, price)
    fn shop(purchases: &[(usize, usize, i64, f64)]) -> Database {
        let customers = TableSpec {
            name: "customers".into(),
            file: "c.csv".into(),
            time_column: None,
            columns: vec![col("id", SemanticType::PrimaryKey)],
        };
        let products = TableSpec {
            name: "products".into(),
            file: "p.csv".into(),
            time_column: None,
            columns: vec![col("id", SemanticType::PrimaryKey)],
        };
        let fk = |n: &str, t: &str| {
            col(
                n,
                SemanticType::ForeignKey {
                    target: t.into(),
                },
            )
        };
        let purchase_spec = TableSpec {
            name: "purchases".into(),
            file: "o.csv".into(),
            time_column: Some("ts".into()),
            columns: vec![
                col("id", SemanticType::PrimaryKey),
                fk("customer", "customers"),
                fk("product", "products"),
                col("ts", SemanticType::Timestamp),
                col("price", SemanticType::Numeric),
            ],
        };
        let keys = |p: &str| (0..3).map(|i| vec![Value::Key(format!("{p}{i}"))]).collect();
        let rows = purchases
            .iter()
            .enumerate()
            .map(|(i, &(c, p, t, x))| {
                vec![
                    Value::Key(format!("o{i}")),
                    Value::Key(format!("c{c}")),
                    Value::Key(format!("p{p}")),
                    Value::Time(Timestamp(t * DAY)),
                    Value::Num(x),
                ]
            })
            .collect();
        Database::from_tables(
            vec![
                Table::new(customers, keys("c")).unwrap(),
                Table::new(products, keys("p")).unwrap(),
                Table::new(purchase_spec, rows).unwrap(),
            ],
            "shop",
        )
        .unwrap()
    }

    fn spec(task_type: TaskType, rule: LabelRule, negate: bool) -> TaskSpec {
        TaskSpec {
            name: "t".into(),
            task_type,
            entity_table: "customers".into(),
            dst_table: None,
            k: None,
            event_table: "purchases".into(),
            event_fkey_to_entity: "customer".into(),
            event_fkey_to_dst: None,
            label_rule: rule,
            negate,
            window: 7 * DAY,
            seed_stride: None,
        }
    }

    fn split(val_day: i64, test_day: i64) -> SplitConfig {
        SplitConfig {
            val_timestamp: Timestamp(val_day * DAY),
            test_timestamp: Timestamp(test_day * DAY),
        }
    }

    fn row_at(t: &TrainingTable, entity: usize, day: i64) -> Option<&TrainingRow> {
        t.rows
            .iter()
            .find(|r| r.entity == entity && r.seed_time == Timestamp(day * DAY))
    }

    #[test]
    fn churn_label_is_one_without_events() {
        // c0 buys on day 1 and day 16; c1 buys on day 1 only.
        let db = shop(&[(0, 0, 1, 1.0), (1, 0, 1, 1.0), (0, 1, 16, 1.0), (0, 0, 40, 1.0)]);
        let s = spec(TaskType::EntityClassification, LabelRule::Exists, true);
        let tables = make_training_table(&db, &s, split(21, 35)).unwrap();
        // Train seeds: day 14 (window to 21) and day 7.
        assert_eq!(row_at(&tables.train, 0, 14).unwrap().target, Target::Scalar(0.0));
        assert_eq!(row_at(&tables.train, 1, 14).unwrap().target, Target::Scalar(1.0));
        assert_eq!(row_at(&tables.train, 0, 7).unwrap().target, Target::Scalar(1.0));
        // c2 never bought anything: never eligible.
        assert!(tables.train.rows.iter().all(|r| r.entity != 2));
        for t in [&tables.train, &tables.val, &tables.test] {
            assert!(leakage_guard(t, &tables.split));
        }
        assert_eq!(tables.test.rows.len(), 2);
    }

    #[test]
    fn sum_rule_adds_window_values() {
        let db = shop(&[(0, 0, 1, 9.0), (0, 1, 8, 2.0), (0, 2, 10, 3.5), (0, 2, 15, 100.0)]);
        let s = spec(
            TaskType::EntityRegression,
            LabelRule::Sum {
                value_column: "price".into(),
            },
            false,
        );
        let tables = make_training_table(&db, &s, split(14, 28)).unwrap();
        assert_eq!(row_at(&tables.train, 0, 7).unwrap().target, Target::Scalar(5.5));
        assert_eq!(row_at(&tables.val, 0, 14).unwrap().target, Target::Scalar(100.0));
    }

    #[test]
    fn recommendation_targets_are_distinct() {
        let db = shop(&[(0, 2, 1, 1.0), (0, 0, 8, 1.0), (0, 0, 9, 1.0), (0, 1, 10, 1.0)]);
        let mut s = spec(TaskType::Recommendation, LabelRule::Exists, false);
        s.dst_table = Some("products".into());
        s.event_fkey_to_dst = Some("product".into());
        s.k = Some(2);
        let tables = make_training_table(&db, &s, split(14, 28)).unwrap();
        assert_eq!(tables.train.rows.len(), 1);
        assert_eq!(tables.train.rows[0].target, Target::Links(vec![0, 1]));
    }

    #[test]
    fn rows_crossing_a_boundary_are_dropped_and_counted() {
        let db = shop(&[(0, 0, 1, 1.0), (0, 0, 30, 1.0)]);
        let mut s = spec(TaskType::EntityClassification, LabelRule::Exists, false);
        s.seed_stride = Some(3 * DAY);
        // val grid: 14, 17, 20 (ok, window ends <= 21 only for 14), test at 21.
        let tables = make_training_table(&db, &s, split(14, 21)).unwrap();
        assert_eq!(tables.val.rows.len(), 1);
        assert!(tables.dropped >= 2);
        assert!(leakage_guard(&tables.val, &tables.split));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let db = shop(&[(0, 0, 1, 1.0)]);
        let mut s = spec(TaskType::EntityRegression, LabelRule::Exists, false);
        assert!(make_training_table(&db, &s, split(14, 21)).is_err());
        s.label_rule = LabelRule::Sum {
            value_column: "nope".into(),
        };
        assert!(matches!(
            make_training_table(&db, &s, split(14, 21)),
            Err(TaskError::Db(DbError::NoSuchColumn { .. }))
        ));
        s.label_rule = LabelRule::Count;
        s.event_fkey_to_entity = "product".into();
        assert!(make_training_table(&db, &s, split(14, 21)).is_err());
        s.event_fkey_to_entity = "customer".into();
        assert!(make_training_table(&db, &s, split(21, 14)).is_err());
        s.window = 0;
        assert!(make_training_table(&db, &s, split(14, 21)).is_err());
    }

    #[test]
    fn guard_rejects_leaky_rows() {
        let mk = |split: Split, day: i64| TrainingTable {
            task: "t".into(),
            task_type: TaskType::EntityClassification,
            entity_type: "customers".into(),
            dst_type: None,
            k: None,
            window: 7 * DAY,
            split,
            rows: vec![TrainingRow {
                entity: 0,
                seed_time: Timestamp(day * DAY),
                target: Target::Scalar(1.0),
            }],
        };
        let sc = split(14, 28);
        assert!(leakage_guard(&mk(Split::Train, 7), &sc));
        assert!(!leakage_guard(&mk(Split::Train, 8), &sc));
        assert!(!leakage_guard(&mk(Split::Test, 27), &sc));
        assert!(!leakage_guard(&mk(Split::Val, 13), &sc));
        assert!(leakage_guard(&mk(Split::Val, 21), &sc));
    }

    #[test]
    fn stats_reports() {
        let mut t = TrainingTable {
            task: "t".into(),
            task_type: TaskType::EntityClassification,
            entity_type: "e".into(),
            dst_type: None,
            k: None,
            window: 1,
            split: Split::Train,
            rows: [1.0, 1.0, 0.0]
                .iter()
                .map(|&y| TrainingRow {
                    entity: 0,
                    seed_time: Timestamp(0),
                    target: Target::Scalar(y),
                })
                .collect(),
        };
        assert_eq!(
            table_stats(&t, &[]),
            StatsReport::Classification {
                rows: 3,
                positives: 2,
                negatives: 1
            }
        );
        t.task_type = TaskType::EntityRegression;
        for (r, y) in t.rows.iter_mut().zip([0.0, 2.0, 4.0]) {
            r.target = Target::Scalar(y);
        }
        assert_eq!(
            table_stats(&t, &[]),
            StatsReport::Regression {
                rows: 3,
                min: 0.0,
                median: 2.0,
                mean: 2.0,
                max: 4.0
            }
        );
        t.task_type = TaskType::Recommendation;
        for (i, r) in t.rows.iter_mut().enumerate() {
            r.entity = i;
            r.target = Target::Links(vec![i, i + 10]);
        }
        let mut earlier = t.clone();
        earlier.rows.truncate(1);
        match table_stats(&t, &[&earlier]) {
            StatsReport::Recommendation {
                links,
                avg_links_per_row,
                repeated_link_pct,
                ..
            } => {
                assert_eq!(links, 6);
                assert_eq!(avg_links_per_row, 2.0);
                assert!((repeated_link_pct - 100.0 / 3.0).abs() < 1e-9);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_round_trip() {
        let db = shop(&[(0, 2, 1, 1.0), (0, 0, 8, 1.0), (1, 1, 9, 1.0), (0, 1, 10, 1.0)]);
        let mut s = spec(TaskType::Recommendation, LabelRule::Exists, false);
        s.dst_table = Some("products".into());
        s.event_fkey_to_dst = Some("product".into());
        s.k = Some(2);
        let tables = make_training_table(&db, &s, split(14, 28)).unwrap();
        let bytes = tables.train.to_csv_bytes();
        assert!(String::from_utf8_lossy(&bytes).contains("customers,0,604800,0|1"));
        let back = TrainingTable::from_csv_bytes(&bytes, &tables.train).unwrap();
        assert_eq!(back, tables.train);
        let err = TrainingTable::from_csv_bytes(b"entity_type,entity_index,seed_time,target\ncustomers,x,1,2\n", &tables.train);
        assert!(matches!(err, Err(TaskError::Csv { line: 2, .. })));
    }

    #[test]
    fn spec_json_shape() {
        let text = r#"{"name":"churn","task_type":"entity_classification","entity_table":"customers",
            "event_table":"purchases","event_fkey_to_entity":"customer",
            "label_rule":{"kind":"threshold","min_count":2},"negate":false,"window":604800}"#;
        let s: TaskSpec = serde_json::from_str(text).unwrap();
        assert_eq!(s.label_rule, LabelRule::Threshold { min_count: 2 });
        assert_eq!(s.stride(), 604_800);
        let again: TaskSpec = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(again, s);
    }
}
