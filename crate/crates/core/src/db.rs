//! Typed multi-table relational databases loaded from a JSON schema manifest
//! plus one CSV file per table.
//!
//! Tables are immutable once loaded. Foreign keys are resolved at load time:
//! each fkey cell either points at exactly one row of its target table or is
//! counted as dangling (kept as a row, but it produces no graph edge).

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DbError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest parse error: {0}")]
    ManifestSyntax(#[from] serde_json::Error),
    #[error("table `{table}` column `{column}`: unknown semantic type `{kind}`")]
    UnknownType {
        table: String,
        column: String,
        kind: String,
    },
    #[error("table `{table}` column `{column}`: unknown fkey target `{target}`")]
    UnknownFkeyTarget {
        table: String,
        column: String,
        target: String,
    },
    #[error("table `{table}` column `{column}`: foreign_key column needs a `target`")]
    MissingFkeyTarget { table: String, column: String },
    #[error("duplicate table name `{0}`")]
    DuplicateTable(String),
    #[error("table `{table}`: duplicate column name `{column}`")]
    DuplicateColumn { table: String, column: String },
    #[error("table `{table}`: expected exactly one primary_key column, found {found}")]
    PrimaryKeyCount { table: String, found: usize },
    #[error("table `{table}`: time column `{column}` {problem}")]
    BadTimeColumn {
        table: String,
        column: String,
        problem: &'static str,
    },
    #[error("table `{table}`: missing table file {path}")]
    MissingFile { table: String, path: PathBuf },
    #[error("table `{table}`: header mismatch, expected {expected:?}, found {found:?}")]
    HeaderMismatch {
        table: String,
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("table `{table}` row {row} column `{column}`: cannot parse `{value}` as {kind}")]
    BadCell {
        table: String,
        row: usize,
        column: String,
        value: String,
        kind: &'static str,
    },
    #[error("table `{table}` row {row} column `{column}`: null in non-nullable column")]
    NullCell {
        table: String,
        row: usize,
        column: String,
    },
    #[error("table `{table}`: duplicate primary key `{key}` (row {row})")]
    DuplicatePrimaryKey {
        table: String,
        key: String,
        row: usize,
    },
    #[error("csv error in table `{table}`: {source}")]
    Csv {
        table: String,
        #[source]
        source: csv::Error,
    },
    #[error("no table named `{0}`")]
    NoSuchTable(String),
    #[error("table `{table}` has no column `{column}`")]
    NoSuchColumn { table: String, column: String },
}

pub type Result<T, E = DbError> = std::result::Result<T, E>;

/// Seconds since the Unix epoch, UTC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

impl Timestamp {
    /// Accepts integer epoch seconds, `YYYY-MM-DD` (midnight UTC),
    /// `YYYY-MM-DD[T ]HH:MM:SS` (UTC) or RFC 3339.
    pub fn parse(s: &str) -> Option<Timestamp> {
        let s = s.trim();
        if let Ok(secs) = s.parse::<i64>() {
            return Some(Timestamp(secs));
        }
        if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
            return Some(Timestamp(d.and_hms_opt(0, 0, 0)?.and_utc().timestamp()));
        }
        for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
            if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
                return Some(Timestamp(dt.and_utc().timestamp()));
            }
        }
        DateTime::parse_from_rfc3339(s)
            .ok()
            .map(|dt| Timestamp(dt.timestamp()))
    }

    pub fn secs(self) -> i64 {
        self.0
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SemanticType {
    PrimaryKey,
    ForeignKey { target: String },
    Numeric,
    Categorical,
    Text,
    Timestamp,
}

impl SemanticType {
    pub fn label(&self) -> &'static str {
        match self {
            SemanticType::PrimaryKey => "primary_key",
            SemanticType::ForeignKey { .. } => "foreign_key",
            SemanticType::Numeric => "numeric",
            SemanticType::Categorical => "categorical",
            SemanticType::Text => "text",
            SemanticType::Timestamp => "timestamp",
        }
    }

    pub fn is_key(&self) -> bool {
        matches!(self, SemanticType::PrimaryKey | SemanticType::ForeignKey { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSpec {
    pub name: String,
    pub semantic_type: SemanticType,
    pub nullable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableSpec {
    pub name: String,
    pub file: String,
    pub time_column: Option<String>,
    pub columns: Vec<ColumnSpec>,
}

impl TableSpec {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn primary_key_index(&self) -> usize {
        self.columns
            .iter()
            .position(|c| c.semantic_type == SemanticType::PrimaryKey)
            .expect("validated manifest has a primary key")
    }

    pub fn time_column_index(&self) -> Option<usize> {
        self.time_column.as_deref().and_then(|c| self.column_index(c))
    }
}

/// Parsed and validated schema manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemaManifest {
    pub tables: Vec<TableSpec>,
    /// Directory the manifest was read from; relative table files resolve here.
    pub base_dir: PathBuf,
    pub source: String,
}

#[derive(Serialize, Deserialize)]
struct RawManifest {
    tables: Vec<RawTable>,
}

#[derive(Serialize, Deserialize)]
struct RawTable {
    name: String,
    file: String,
    #[serde(default)]
    time_column: Option<String>,
    columns: Vec<RawColumn>,
}

#[derive(Serialize, Deserialize)]
struct RawColumn {
    name: String,
    #[serde(rename = "type")]
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<String>,
    #[serde(default)]
    nullable: bool,
}

impl SchemaManifest {
    pub fn from_json(text: &str, base_dir: impl Into<PathBuf>, source: &str) -> Result<Self> {
        let raw: RawManifest = serde_json::from_str(text)?;
        let mut seen_tables = HashSet::new();
        for t in &raw.tables {
            if !seen_tables.insert(t.name.as_str()) {
                return Err(DbError::DuplicateTable(t.name.clone()));
            }
        }

        let mut tables = Vec::with_capacity(raw.tables.len());
        for t in &raw.tables {
            let mut seen_cols = HashSet::new();
            let mut columns = Vec::with_capacity(t.columns.len());
            for c in &t.columns {
                if !seen_cols.insert(c.name.as_str()) {
                    return Err(DbError::DuplicateColumn {
                        table: t.name.clone(),
                        column: c.name.clone(),
                    });
                }
                let semantic_type = match c.kind.as_str() {
                    "primary_key" => SemanticType::PrimaryKey,
                    "foreign_key" => {
                        let target = c.target.clone().ok_or_else(|| DbError::MissingFkeyTarget {
                            table: t.name.clone(),
                            column: c.name.clone(),
                        })?;
                        if !seen_tables.contains(target.as_str()) {
                            return Err(DbError::UnknownFkeyTarget {
                                table: t.name.clone(),
                                column: c.name.clone(),
                                target,
                            });
                        }
                        SemanticType::ForeignKey { target }
                    }
                    "numeric" => SemanticType::Numeric,
                    "categorical" => SemanticType::Categorical,
                    "text" => SemanticType::Text,
                    "timestamp" => SemanticType::Timestamp,
                    other => {
                        return Err(DbError::UnknownType {
                            table: t.name.clone(),
                            column: c.name.clone(),
                            kind: other.to_string(),
                        })
                    }
                };
                columns.push(ColumnSpec {
                    name: c.name.clone(),
                    semantic_type,
                    nullable: c.nullable,
                });
            }

            let pkeys = columns
                .iter()
                .filter(|c| c.semantic_type == SemanticType::PrimaryKey)
                .count();
            if pkeys != 1 {
                return Err(DbError::PrimaryKeyCount {
                    table: t.name.clone(),
                    found: pkeys,
                });
            }
            if let Some(tc) = &t.time_column {
                match columns.iter().find(|c| &c.name == tc) {
                    None => {
                        return Err(DbError::BadTimeColumn {
                            table: t.name.clone(),
                            column: tc.clone(),
                            problem: "is not a declared column",
                        })
                    }
                    Some(c) if c.semantic_type != SemanticType::Timestamp => {
                        return Err(DbError::BadTimeColumn {
                            table: t.name.clone(),
                            column: tc.clone(),
                            problem: "is not a timestamp column",
                        })
                    }
                    Some(_) => {}
                }
            }
            tables.push(TableSpec {
                name: t.name.clone(),
                file: t.file.clone(),
                time_column: t.time_column.clone(),
                columns,
            });
        }
        Ok(SchemaManifest {
            tables,
            base_dir: base_dir.into(),
            source: source.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        let raw = RawManifest {
            tables: self
                .tables
                .iter()
                .map(|t| RawTable {
                    name: t.name.clone(),
                    file: t.file.clone(),
                    time_column: t.time_column.clone(),
                    columns: t
                        .columns
                        .iter()
                        .map(|c| RawColumn {
                            name: c.name.clone(),
                            kind: c.semantic_type.label().to_string(),
                            target: match &c.semantic_type {
                                SemanticType::ForeignKey { target } => Some(target.clone()),
                                _ => None,
                            },
                            nullable: c.nullable,
                        })
                        .collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("manifest serializes")
    }

    pub fn table(&self, name: &str) -> Option<&TableSpec> {
        self.tables.iter().find(|t| t.name == name)
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<SchemaManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DbError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    SchemaManifest::from_json(&text, base, &path.display().to_string())
}

/// A single typed cell. Null is allowed only in nullable columns.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Null,
    Key(String),
    Num(f64),
    Cat(String),
    Text(String),
    Time(Timestamp),
}

impl Value {
    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    pub fn as_key(&self) -> Option<&str> {
        match self {
            Value::Key(k) => Some(k),
            _ => None,
        }
    }

    pub fn as_num(&self) -> Option<f64> {
        match self {
            Value::Num(x) => Some(*x),
            _ => None,
        }
    }

    pub fn as_time(&self) -> Option<Timestamp> {
        match self {
            Value::Time(t) => Some(*t),
            _ => None,
        }
    }

    /// CSV rendering. Floats use the shortest decimal that round-trips.
    pub fn render(&self) -> String {
        match self {
            Value::Null => String::new(),
            Value::Key(s) | Value::Cat(s) | Value::Text(s) => s.clone(),
            Value::Num(x) => format_float(*x),
            Value::Time(t) => t.0.to_string(),
        }
    }
}

pub fn format_float(x: f64) -> String {
    if x.is_finite() && x == x.trunc() && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

fn parse_cell(raw: &str, col: &ColumnSpec, table: &str, row: usize) -> Result<Value> {
    let null = |_: ()| -> Result<Value> {
        if col.nullable && col.semantic_type != SemanticType::PrimaryKey {
            Ok(Value::Null)
        } else {
            Err(DbError::NullCell {
                table: table.to_string(),
                row,
                column: col.name.clone(),
            })
        }
    };
    if raw.is_empty() {
        return null(());
    }
    let bad = |kind| DbError::BadCell {
        table: table.to_string(),
        row,
        column: col.name.clone(),
        value: raw.to_string(),
        kind,
    };
    Ok(match &col.semantic_type {
        SemanticType::PrimaryKey | SemanticType::ForeignKey { .. } => Value::Key(raw.to_string()),
        SemanticType::Numeric => {
            let x: f64 = raw.trim().parse().map_err(|_| bad("numeric"))?;
            if x.is_nan() {
                return null(());
            }
            Value::Num(x)
        }
        SemanticType::Categorical => Value::Cat(raw.to_string()),
        SemanticType::Text => Value::Text(raw.to_string()),
        SemanticType::Timestamp => Value::Time(Timestamp::parse(raw).ok_or_else(|| bad("timestamp"))?),
    })
}

#[derive(Debug, Clone)]
pub struct Table {
    pub spec: TableSpec,
    pub rows: Vec<Vec<Value>>,
    pkey_lookup: HashMap<String, usize>,
}

impl PartialEq for Table {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.rows == other.rows
    }
}

impl Table {
    /// Builds a table from already-typed rows, checking arity and pkey uniqueness.
    pub fn new(spec: TableSpec, rows: Vec<Vec<Value>>) -> Result<Table> {
        let pk = spec.primary_key_index();
        let mut pkey_lookup = HashMap::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), spec.columns.len(), "row arity must match the schema");
            let key = row[pk].as_key().ok_or_else(|| DbError::NullCell {
                table: spec.name.clone(),
                row: i,
                column: spec.columns[pk].name.clone(),
            })?;
            if pkey_lookup.insert(key.to_string(), i).is_some() {
                return Err(DbError::DuplicatePrimaryKey {
                    table: spec.name.clone(),
                    key: key.to_string(),
                    row: i,
                });
            }
        }
        Ok(Table {
            spec,
            rows,
            pkey_lookup,
        })
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn row_of_key(&self, key: &str) -> Option<usize> {
        self.pkey_lookup.get(key).copied()
    }

    pub fn primary_key(&self, row: usize) -> &str {
        self.rows[row][self.spec.primary_key_index()]
            .as_key()
            .expect("primary keys are never null")
    }

    /// Row timestamp from the time column; `None` for static tables or null cells.
    pub fn time_of(&self, row: usize) -> Option<Timestamp> {
        self.spec
            .time_column_index()
            .and_then(|c| self.rows[row][c].as_time())
    }

    pub fn column_values(&self, column: &str) -> Result<impl Iterator<Item = &Value> + '_> {
        let idx = self.spec.column_index(column).ok_or_else(|| DbError::NoSuchColumn {
            table: self.spec.name.clone(),
            column: column.to_string(),
        })?;
        Ok(self.rows.iter().map(move |r| &r[idx]))
    }

    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.spec.columns.iter().map(|c| c.name.as_str()))
            .expect("in-memory csv write");
        for row in &self.rows {
            w.write_record(row.iter().map(Value::render))
                .expect("in-memory csv write");
        }
        w.into_inner().expect("in-memory csv flush")
    }
}

/// Resolution of one foreign-key column against its target table.
#[derive(Debug, Clone)]
pub struct FkeyLink {
    pub table: String,
    pub column: String,
    pub target: String,
    /// Target row per source row; `None` for null or dangling cells.
    pub resolved: Vec<Option<usize>>,
    pub dangling: usize,
}

#[derive(Debug, Clone)]
pub struct Database {
    pub tables: IndexMap<String, Table>,
    pub manifest_path: String,
    /// One entry per foreign-key column, in manifest order.
    pub fkeys: Vec<FkeyLink>,
}

impl Database {
    /// Assembles a database from typed tables and resolves foreign keys.
    pub fn from_tables(tables: Vec<Table>, manifest_path: &str) -> Result<Database> {
        let tables: IndexMap<String, Table> =
            tables.into_iter().map(|t| (t.spec.name.clone(), t)).collect();
        let mut fkeys = Vec::new();
        for t in tables.values() {
            for (ci, col) in t.spec.columns.iter().enumerate() {
                let SemanticType::ForeignKey { target } = &col.semantic_type else {
                    continue;
                };
                let target_table = tables
                    .get(target)
                    .ok_or_else(|| DbError::NoSuchTable(target.clone()))?;
                let mut dangling = 0;
                let resolved = t
                    .rows
                    .iter()
                    .map(|row| match &row[ci] {
                        Value::Key(k) => {
                            let hit = target_table.row_of_key(k);
                            if hit.is_none() {
                                dangling += 1;
                            }
                            hit
                        }
                        _ => None,
                    })
                    .collect();
                fkeys.push(FkeyLink {
                    table: t.spec.name.clone(),
                    column: col.name.clone(),
                    target: target.clone(),
                    resolved,
                    dangling,
                });
            }
        }
        Ok(Database {
            tables,
            manifest_path: manifest_path.to_string(),
            fkeys,
        })
    }

    pub fn table(&self, name: &str) -> Result<&Table> {
        self.tables
            .get(name)
            .ok_or_else(|| DbError::NoSuchTable(name.to_string()))
    }

    pub fn fkey(&self, table: &str, column: &str) -> Option<&FkeyLink> {
        self.fkeys
            .iter()
            .find(|f| f.table == table && f.column == column)
    }

    pub fn dangling_fkeys(&self) -> usize {
        self.fkeys.iter().map(|f| f.dangling).sum()
    }

    pub fn row_counts(&self) -> IndexMap<String, usize> {
        self.tables
            .iter()
            .map(|(n, t)| (n.clone(), t.num_rows()))
            .collect()
    }

    pub fn manifest(&self) -> SchemaManifest {
        SchemaManifest {
            tables: self.tables.values().map(|t| t.spec.clone()).collect(),
            base_dir: PathBuf::new(),
            source: self.manifest_path.clone(),
        }
    }

    /// Writes `manifest.json` and one CSV per table into `dir`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| DbError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let mpath = dir.join("manifest.json");
        fs::write(&mpath, self.manifest().to_json()).map_err(io(&mpath))?;
        for t in self.tables.values() {
            let p = dir.join(&t.spec.file);
            fs::write(&p, t.to_csv_bytes()).map_err(io(&p))?;
        }
        Ok(())
    }
}

fn load_table(spec: &TableSpec, dir: &Path) -> Result<Table> {
    let path = dir.join(&spec.file);
    if !path.is_file() {
        return Err(DbError::MissingFile {
            table: spec.name.clone(),
            path,
        });
    }
    let csv_err = |source| DbError::Csv {
        table: spec.name.clone(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&path)
        .map_err(csv_err)?;
    let header: Vec<String> = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    let expected: Vec<String> = spec.columns.iter().map(|c| c.name.clone()).collect();
    if header != expected {
        return Err(DbError::HeaderMismatch {
            table: spec.name.clone(),
            expected,
            found: header,
        });
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let row = record
            .iter()
            .zip(&spec.columns)
            .map(|(raw, col)| parse_cell(raw, col, &spec.name, i))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Table::new(spec.clone(), rows)
}

/// Loads every table declared in `manifest` from `dir`. Tables load in parallel.
pub fn load_database(manifest: &SchemaManifest, dir: impl AsRef<Path>) -> Result<Database> {
    let dir = dir.as_ref();
    let tables = manifest
        .tables
        .par_iter()
        .map(|spec| load_table(spec, dir))
        .collect::<Result<Vec<_>>>()?;
    Database::from_tables(tables, &manifest.source)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TableReport {
    pub name: String,
    pub rows: usize,
    pub null_fraction: IndexMap<String, f64>,
    pub time_min: Option<Timestamp>,
    pub time_max: Option<Timestamp>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FkeyReport {
    pub table: String,
    pub column: String,
    pub target: String,
    pub dangling: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ValidationReport {
    pub tables: Vec<TableReport>,
    pub fkeys: Vec<FkeyReport>,
    pub dangling: usize,
}

pub fn validate(db: &Database) -> ValidationReport {
    let tables = db
        .tables
        .values()
        .map(|t| {
            let n = t.num_rows().max(1) as f64;
            let null_fraction = t
                .spec
                .columns
                .iter()
                .enumerate()
                .map(|(ci, c)| {
                    let nulls = t.rows.iter().filter(|r| r[ci].is_null()).count();
                    (c.name.clone(), nulls as f64 / n)
                })
                .collect();
            let times = (0..t.num_rows()).filter_map(|r| t.time_of(r));
            let (time_min, time_max) = times.fold((None, None), |(lo, hi), ts| {
                (
                    Some(lo.map_or(ts, |l: Timestamp| l.min(ts))),
                    Some(hi.map_or(ts, |h: Timestamp| h.max(ts))),
                )
            });
            TableReport {
                name: t.spec.name.clone(),
                rows: t.num_rows(),
                null_fraction,
                time_min,
                time_max,
            }
        })
        .collect();
    let fkeys = db
        .fkeys
        .iter()
        .map(|f| FkeyReport {
            table: f.table.clone(),
            column: f.column.clone(),
            target: f.target.clone(),
            dangling: f.dangling,
        })
        .collect();
    ValidationReport {
        tables,
        fkeys,
        dangling: db.dangling_fkeys(),
    }
}
