//! Synthetic three-table databases (entities, items, events) with a planted
//! signal that only relational, time-aware aggregation can recover.
//!
//! Time is organised in periods `t_j = T0 + j * STRIDE`. Each period has a
//! label window `(t_j, t_j + WINDOW]`; the "gap" before `t_j` carries the
//! signal:
//!
//! * `recency_churn`: one gap event at a recency drawn either below or above
//!   127 hours; entities whose last event is old churn (no window events).
//!   With `noise = p`, each label is replaced by a fair coin with probability
//!   `p`. With `informative_features`, tier `basic` entities invert the rule
//!   and churn when their gap event is recent.
//! * `degree_regression`: `c ~ U{0..4}` gap events within 126 hours of `t_j`;
//!   one window event whose `amount` is `(1 - noise) * c + noise * N(0, 1)`.
//! * `copurchase_rec`: purchases spread over every period. In `repeat` mode
//!   an entity mostly re-buys one of its last three distinct items, otherwise
//!   a Zipf-ranked item of its preferred category; in `popularity` mode items
//!   follow global weights with per-item log-linear trends.
//!
//! Entity attributes are noise unless `informative_features` is set.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::db::{ColumnSpec, Database, SemanticType, Table, TableSpec, Timestamp, Value};
use crate::rng::rng_for;
use crate::task::{LabelRule, SplitConfig, TaskSpec, TaskType, TrainingTable};

pub const HOUR: i64 = 3_600;
pub const DAY: i64 = 24 * HOUR;
/// 2020-01-01T00:00:00Z
pub const T0: i64 = 1_577_836_800;
pub const WINDOW: i64 = 7 * DAY;
pub const STRIDE: i64 = 14 * DAY;

const REGIONS: [&str; 5] = ["north", "south", "east", "west", "central"];
const WORDS: [&str; 16] = [
    "alpha", "bravo", "cedar", "delta", "ember", "fjord", "grove", "harbor", "iris", "juniper",
    "kestrel", "lumen", "maple", "nova", "onyx", "prairie",
];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Db(#[from] crate::db::DbError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    RecencyChurn,
    DegreeRegression,
    CopurchaseRec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecMode {
    Repeat,
    Popularity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_entities: usize,
    pub n_items: usize,
    /// Target number of purchases for `copurchase_rec`; the other signals
    /// derive their event counts from the planted rule.
    pub n_events: usize,
    /// Seconds; the number of periods is `max(4, time_span / STRIDE)`.
    pub time_span: i64,
    pub signal: Signal,
    pub noise: f64,
    pub rng_seed: u64,
    pub informative_features: bool,
    pub rec_mode: RecMode,
    pub repeat_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_entities: 1000,
            n_items: 50,
            n_events: 24_000,
            time_span: 8 * STRIDE,
            signal: Signal::RecencyChurn,
            noise: 0.1,
            rng_seed: 0,
            informative_features: false,
            rec_mode: RecMode::Repeat,
            repeat_prob: 0.75,
        }
    }
}

impl SynthConfig {
    pub fn new(signal: Signal, rng_seed: u64) -> SynthConfig {
        SynthConfig {
            signal,
            rng_seed,
            ..SynthConfig::default()
        }
    }

    pub fn periods(&self) -> usize {
        ((self.time_span / STRIDE).max(4)) as usize
    }

    pub fn period_start(&self, j: usize) -> i64 {
        T0 + j as i64 * STRIDE
    }

    pub fn check(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.n_entities < 10 || self.n_items < 10 || self.n_events < 10 {
            return bad("counts must be at least 10");
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad("noise must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.repeat_prob) {
            return bad("repeat_prob must lie in [0, 1]");
        }
        if self.time_span <= 0 {
            return bad("time_span must be positive");
        }
        Ok(())
    }
}

/// Expected label under the generating rule, per (entity, seed time).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleRow {
    pub entity: usize,
    pub seed_time: Timestamp,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub db: Database,
    pub task: TaskSpec,
    pub split: SplitConfig,
    pub oracle: Vec<OracleRow>,
}

impl SynthOutput {
    /// Oracle score for every row of `table`, if all rows are covered.
    pub fn oracle_scores(&self, table: &TrainingTable) -> Option<Vec<f64>> {
        let map: HashMap<(usize, Timestamp), f64> = self
            .oracle
            .iter()
            .map(|o| ((o.entity, o.seed_time), o.score))
            .collect();
        table
            .rows
            .iter()
            .map(|r| map.get(&(r.entity, r.seed_time)).copied())
            .collect()
    }
}

struct Event {
    entity: usize,
    item: usize,
    ts: i64,
    amount: f64,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn words(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n)
        .map(|_| *WORDS.choose(rng).expect("non-empty"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn pick_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        x -= w;
        if x < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

fn col(name: &str, semantic_type: SemanticType) -> ColumnSpec {
    ColumnSpec {
        name: name.into(),
        semantic_type,
        nullable: false,
    }
}

fn fkey(name: &str, target: &str) -> ColumnSpec {
    col(
        name,
        SemanticType::ForeignKey {
            target: target.into(),
        },
    )
}

pub fn task_for(cfg: &SynthConfig) -> TaskSpec {
    let base = TaskSpec {
        name: String::new(),
        task_type: TaskType::EntityClassification,
        entity_table: "entities".into(),
        dst_table: None,
        k: None,
        event_table: "events".into(),
        event_fkey_to_entity: "entity_id".into(),
        event_fkey_to_dst: None,
        label_rule: LabelRule::Exists,
        negate: false,
        window: WINDOW,
        seed_stride: Some(STRIDE),
    };
    match cfg.signal {
        Signal::RecencyChurn => TaskSpec {
            name: "churn".into(),
            negate: true,
            ..base
        },
        Signal::DegreeRegression => TaskSpec {
            name: "event_value".into(),
            task_type: TaskType::EntityRegression,
            label_rule: LabelRule::Sum {
                value_column: "amount".into(),
            },
            ..base
        },
        Signal::CopurchaseRec => TaskSpec {
            name: "copurchase".into(),
            task_type: TaskType::Recommendation,
            dst_table: Some("items".into()),
            k: Some(10),
            event_fkey_to_dst: Some("item_id".into()),
            ..base
        },
    }
}

pub fn split_for(cfg: &SynthConfig) -> SplitConfig {
    let p = cfg.periods();
    SplitConfig {
        val_timestamp: Timestamp(cfg.period_start(p - 2)),
        test_timestamp: Timestamp(cfg.period_start(p - 1)),
    }
}

#[allow(clippy::needless_range_loop)]
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput, SynthError> {
    cfg.check()?;
    let n_clusters = (cfg.n_items / 10).max(2);

    let mut rng = rng_for(cfg.rng_seed, "synth/entities");
    let mut tiers = Vec::with_capacity(cfg.n_entities);
    let mut entity_rows = Vec::with_capacity(cfg.n_entities);
    for i in 0..cfg.n_entities {
        let basic = rng.gen_bool(0.5);
        tiers.push(basic);
        entity_rows.push(vec![
            Value::Key(format!("e{i}")),
            Value::Time(Timestamp(T0 - 3 * STRIDE - rng.gen_range(0..30 * DAY))),
            Value::Num((gauss(&mut rng) * 1000.0).round() / 1000.0),
            Value::Cat(REGIONS.choose(&mut rng).expect("non-empty").to_string()),
            Value::Text(words(&mut rng, 4)),
            Value::Cat(if basic { "basic" } else { "pro" }.into()),
        ]);
    }

    let mut rng = rng_for(cfg.rng_seed, "synth/items");
    let mut item_rows = Vec::with_capacity(cfg.n_items);
    let mut trend = Vec::with_capacity(cfg.n_items);
    for i in 0..cfg.n_items {
        item_rows.push(vec![
            Value::Key(format!("i{i}")),
            Value::Num(((3.0 + 0.5 * gauss(&mut rng)).exp() * 100.0).round() / 100.0),
            Value::Cat(format!("cat{}", i % n_clusters)),
            Value::Text(words(&mut rng, 3)),
        ]);
        trend.push((gauss(&mut rng), 0.35 * gauss(&mut rng)));
    }
    let clusters: Vec<Vec<usize>> = (0..n_clusters)
        .map(|c| (0..cfg.n_items).filter(|i| i % n_clusters == c).collect())
        .collect();
    let zipf = |n: usize| -> Vec<f64> { (0..n).map(|r| 1.0 / (r as f64 + 1.0)).collect() };

    let mut rng = rng_for(cfg.rng_seed, "synth/events");
    let periods = cfg.periods();
    let mut events = Vec::new();
    let mut oracle = Vec::new();
    let noise_amount = |rng: &mut ChaCha8Rng| (gauss(rng) * 1000.0).round() / 1000.0;
    let rec_rate = (cfg.n_events as f64 / (cfg.n_entities * periods) as f64).max(1.0);

    for e in 0..cfg.n_entities {
        let preferred = rng.gen_range(0..n_clusters);
        let first_item = match cfg.signal {
            Signal::CopurchaseRec => {
                let members = &clusters[preferred];
                members[pick_weighted(&mut rng, &zipf(members.len()))]
            }
            _ => rng.gen_range(0..cfg.n_items),
        };
        let amount = noise_amount(&mut rng);
        events.push(Event {
            entity: e,
            item: first_item,
            ts: T0 - 8 * DAY - rng.gen_range(0..5 * DAY),
            amount,
        });
        let mut history = vec![first_item];

        for j in 0..periods {
            let t = cfg.period_start(j);
            match cfg.signal {
                Signal::RecencyChurn => {
                    let recent = rng.gen_bool(0.5);
                    let delta = if recent {
                        rng.gen_range(HOUR..=126 * HOUR)
                    } else {
                        rng.gen_range(128 * HOUR..=167 * HOUR)
                    };
                    let item = rng.gen_range(0..cfg.n_items);
                    let amount = noise_amount(&mut rng);
                    events.push(Event {
                        entity: e,
                        item,
                        ts: t - delta,
                        amount,
                    });
                    let rule = (cfg.informative_features && tiers[e]) == recent;
                    let churn = if rng.gen_bool(cfg.noise) {
                        rng.gen_bool(0.5)
                    } else {
                        rule
                    };
                    oracle.push(OracleRow {
                        entity: e,
                        seed_time: Timestamp(t),
                        score: 0.5 * cfg.noise + (1.0 - cfg.noise) * f64::from(u8::from(rule)),
                    });
                    if !churn {
                        for _ in 0..rng.gen_range(1..=2) {
                            let item = rng.gen_range(0..cfg.n_items);
                            let amount = noise_amount(&mut rng);
                            events.push(Event {
                                entity: e,
                                item,
                                ts: t + rng.gen_range(1..=WINDOW),
                                amount,
                            });
                        }
                    }
                }
                Signal::DegreeRegression => {
                    let c = rng.gen_range(0..=4usize);
                    for _ in 0..c {
                        let item = rng.gen_range(0..cfg.n_items);
                        let amount = noise_amount(&mut rng);
                        events.push(Event {
                            entity: e,
                            item,
                            ts: t - rng.gen_range(HOUR..=126 * HOUR),
                            amount,
                        });
                    }
                    let expected = (1.0 - cfg.noise) * c as f64;
                    let target = expected + cfg.noise * gauss(&mut rng);
                    events.push(Event {
                        entity: e,
                        item: rng.gen_range(0..cfg.n_items),
                        ts: t + rng.gen_range(1..=WINDOW),
                        amount: (target * 1e6).round() / 1e6,
                    });
                    oracle.push(OracleRow {
                        entity: e,
                        seed_time: Timestamp(t),
                        score: expected,
                    });
                }
                Signal::CopurchaseRec => {
                    let whole = rec_rate.floor() as usize;
                    let m = whole + usize::from(rng.gen_bool(rec_rate - whole as f64));
                    let mut times: Vec<i64> = (0..m).map(|_| t + rng.gen_range(1..=STRIDE)).collect();
                    times.sort_unstable();
                    let weights: Vec<f64> = trend
                        .iter()
                        .map(|&(a, b)| (a + b * j as f64).exp())
                        .collect();
                    for ts in times {
                        let item = match cfg.rec_mode {
                            RecMode::Repeat if rng.gen_bool(cfg.repeat_prob) => {
                                let mut recent = Vec::with_capacity(3);
                                for &it in history.iter().rev() {
                                    if !recent.contains(&it) {
                                        recent.push(it);
                                        if recent.len() == 3 {
                                            break;
                                        }
                                    }
                                }
                                *recent.choose(&mut rng).expect("history is non-empty")
                            }
                            RecMode::Repeat => {
                                let members = &clusters[preferred];
                                members[pick_weighted(&mut rng, &zipf(members.len()))]
                            }
                            RecMode::Popularity => pick_weighted(&mut rng, &weights),
                        };
                        history.push(item);
                        let amount = noise_amount(&mut rng);
                        events.push(Event {
                            entity: e,
                            item,
                            ts,
                            amount,
                        });
                    }
                }
            }
        }
    }
    events.sort_by_key(|ev| (ev.ts, ev.entity));

    let event_rows = events
        .iter()
        .enumerate()
        .map(|(k, ev)| {
            vec![
                Value::Key(format!("v{k}")),
                Value::Key(format!("e{}", ev.entity)),
                Value::Key(format!("i{}", ev.item)),
                Value::Time(Timestamp(ev.ts)),
                Value::Num(ev.amount),
            ]
        })
        .collect();

    let entities = TableSpec {
        name: "entities".into(),
        file: "entities.csv".into(),
        time_column: Some("joined_at".into()),
        columns: vec![
            col("entity_id", SemanticType::PrimaryKey),
            col("joined_at", SemanticType::Timestamp),
            col("score", SemanticType::Numeric),
            col("region", SemanticType::Categorical),
            col("bio", SemanticType::Text),
            col("tier", SemanticType::Categorical),
        ],
    };
    let items = TableSpec {
        name: "items".into(),
        file: "items.csv".into(),
        time_column: None,
        columns: vec![
            col("item_id", SemanticType::PrimaryKey),
            col("price", SemanticType::Numeric),
            col("category", SemanticType::Categorical),
            col("title", SemanticType::Text),
        ],
    };
    let event_spec = TableSpec {
        name: "events".into(),
        file: "events.csv".into(),
        time_column: Some("ts".into()),
        columns: vec![
            col("event_id", SemanticType::PrimaryKey),
            fkey("entity_id", "entities"),
            fkey("item_id", "items"),
            col("ts", SemanticType::Timestamp),
            col("amount", SemanticType::Numeric),
        ],
    };
    let db = Database::from_tables(
        vec![
            Table::new(entities, entity_rows)?,
            Table::new(items, item_rows)?,
            Table::new(event_spec, event_rows)?,
        ],
        "manifest.json",
    )?;
    Ok(SynthOutput {
        db,
        task: task_for(cfg),
        split: split_for(cfg),
        oracle,
    })
}
