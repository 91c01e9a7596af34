//! Non-relational reference predictors.
//!
//! `tabular_linear` stands in for a gradient-boosted tree model on the
//! entity row's own attributes: ridge regression for regression tasks,
//! L2-regularized logistic regression (Newton's method) for classification,
//! and a pairwise logistic scorer over the 100 most popular destinations for
//! recommendation.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::db::{Database, DbError};
use crate::features::{FeatureTable, TableEncoder};
use crate::metrics::Predictions;
use crate::rng::rng_for;
use crate::task::{median, TaskType, TrainingTable};

const RIDGE: f64 = 1.0;
const NEWTON_STEPS: usize = 25;
const REC_CANDIDATES: usize = 100;
const REC_NEGATIVES: usize = 5;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("empty training table")]
    EmptyTable,
    #[error("baseline `{kind}` does not apply to {task_type} tasks")]
    WrongTask { kind: BaselineKind, task_type: TaskType },
    #[error("unknown baseline `{0}`")]
    UnknownKind(String),
    #[error(transparent)]
    Db(#[from] DbError),
    #[error("linear system is singular")]
    Singular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    EntityMean,
    EntityMedian,
    GlobalMean,
    GlobalMedian,
    GlobalZero,
    GlobalPopularity,
    PastVisit,
    TabularLinear,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 8] = [
        BaselineKind::EntityMean,
        BaselineKind::EntityMedian,
        BaselineKind::GlobalMean,
        BaselineKind::GlobalMedian,
        BaselineKind::GlobalZero,
        BaselineKind::GlobalPopularity,
        BaselineKind::PastVisit,
        BaselineKind::TabularLinear,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::EntityMean => "entity_mean",
            BaselineKind::EntityMedian => "entity_median",
            BaselineKind::GlobalMean => "global_mean",
            BaselineKind::GlobalMedian => "global_median",
            BaselineKind::GlobalZero => "global_zero",
            BaselineKind::GlobalPopularity => "global_popularity",
            BaselineKind::PastVisit => "past_visit",
            BaselineKind::TabularLinear => "tabular_linear",
        }
    }

    pub fn applies_to(self, t: TaskType) -> bool {
        match self {
            BaselineKind::GlobalPopularity | BaselineKind::PastVisit => t == TaskType::Recommendation,
            BaselineKind::TabularLinear => true,
            _ => t != TaskType::Recommendation,
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineKind {
    type Err = BaselineError;
    fn from_str(s: &str) -> Result<Self, BaselineError> {
        let norm = s.replace('-', "_");
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| BaselineError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BaselinePredictor {
    Entity { stats: HashMap<usize, f64>, fallback: f64 },
    Constant(f64),
    Popularity { ranking: Vec<usize>, k: usize },
    PastVisit { history: HashMap<usize, Vec<usize>>, popularity: Vec<usize>, k: usize },
    Linear(LinearModel),
    LinearRec(LinearRec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub classification: bool,
    /// Weights over encoded features, intercept last.
    pub weights: Vec<f64>,
    features: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearRec {
    pub weights: Vec<f64>,
    candidates: Vec<usize>,
    dst_features: Array2<f64>,
    counts: Vec<usize>,
    history: HashMap<usize, HashMap<usize, usize>>,
    popularity: Vec<usize>,
    k: usize,
}

fn link_counts(train: &TrainingTable) -> HashMap<usize, usize> {
    let mut counts = HashMap::new();
    for r in &train.rows {
        for &d in r.target.links() {
            *counts.entry(d).or_insert(0) += 1;
        }
    }
    counts
}

/// Destinations by descending count, ties by ascending index.
fn ranked(counts: &HashMap<usize, usize>) -> Vec<usize> {
    let mut v: Vec<(usize, usize)> = counts.iter().map(|(&d, &c)| (d, c)).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().map(|x| x.0).collect()
}

fn pad(mut list: Vec<usize>, fallback: &[usize], k: usize) -> Vec<usize> {
    list.truncate(k);
    for &d in fallback {
        if list.len() >= k {
            break;
        }
        if !list.contains(&d) {
            list.push(d);
        }
    }
    list
}

fn encoded_table(db: &Database, name: &str) -> Result<Array2<f64>, BaselineError> {
    let ft = FeatureTable::from_table(db.table(name)?);
    Ok(TableEncoder::fit(&ft).encode(&ft))
}

fn with_intercept(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.push(1.0);
    v
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Solves `(X^T W X + R) w = X^T W y` style systems; `R` is `RIDGE` on every
/// weight except the trailing intercept.
fn ridge_system(xtx: &mut DMatrix<f64>) {
    let n = xtx.nrows();
    for i in 0..n.saturating_sub(1) {
        xtx[(i, i)] += RIDGE;
    }
    // keeps the intercept solvable when every row is identical
    xtx[(n - 1, n - 1)] += 1e-9;
}

fn fit_ridge(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Vec<f64>, BaselineError> {
    let mut a = x.transpose() * x;
    ridge_system(&mut a);
    let b = x.transpose() * y;
    let w = a.cholesky().ok_or(BaselineError::Singular)?.solve(&b);
    Ok(w.iter().copied().collect())
}

fn fit_logistic(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Vec<f64>, BaselineError> {
    let d = x.ncols();
    let mut w = DVector::zeros(d);
    for _ in 0..NEWTON_STEPS {
        let p = (x * &w).map(sigmoid);
        let mut grad = x.transpose() * (&p - y);
        for i in 0..d - 1 {
            grad[i] += RIDGE * w[i];
        }
        let s = p.map(|v| (v * (1.0 - v)).max(1e-12));
        let mut xs = x.clone();
        for (i, mut row) in xs.row_iter_mut().enumerate() {
            row *= s[i];
        }
        let mut h = x.transpose() * xs;
        ridge_system(&mut h);
        let step = h.cholesky().ok_or(BaselineError::Singular)?.solve(&grad);
        w -= &step;
        if step.amax() < 1e-10 {
            break;
        }
    }
    Ok(w.iter().copied().collect())
}

fn dot(w: &[f64], x: impl IntoIterator<Item = f64>) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

impl LinearRec {
    fn pair_features(&self, dst: usize, past: usize) -> Vec<f64> {
        let mut v: Vec<f64> = self.dst_features.row(dst).to_vec();
        v.push((1.0 + self.counts[dst] as f64).ln());
        v.push((1.0 + past as f64).ln());
        v.push(1.0);
        v
    }

    fn rank(&self, entity: usize) -> Vec<usize> {
        let hist = self.history.get(&entity);
        let mut scored: Vec<(usize, f64)> = self
            .candidates
            .iter()
            .map(|&c| {
                let past = hist.and_then(|h| h.get(&c)).copied().unwrap_or(0);
                (c, dot(&self.weights, self.pair_features(c, past)))
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        pad(scored.into_iter().map(|s| s.0).collect(), &self.popularity, self.k)
    }
}

pub fn fit(kind: BaselineKind, train: &TrainingTable, db: &Database) -> Result<BaselinePredictor, BaselineError> {
    if !kind.applies_to(train.task_type) {
        return Err(BaselineError::WrongTask {
            kind,
            task_type: train.task_type,
        });
    }
    if train.is_empty() {
        return Err(BaselineError::EmptyTable);
    }
    let k = train.k.unwrap_or(10);
    let targets = train.scalar_targets();
    let global_mean = || targets.iter().sum::<f64>() / targets.len() as f64;
    Ok(match kind {
        BaselineKind::EntityMean | BaselineKind::EntityMedian => {
            let mut per: HashMap<usize, Vec<f64>> = HashMap::new();
            for r in &train.rows {
                per.entry(r.entity).or_default().extend(r.target.scalar());
            }
            let stat = |v: &[f64]| match kind {
                BaselineKind::EntityMean => v.iter().sum::<f64>() / v.len() as f64,
                _ => median(v),
            };
            BaselinePredictor::Entity {
                stats: per.iter().map(|(&e, v)| (e, stat(v))).collect(),
                fallback: stat(&targets),
            }
        }
        BaselineKind::GlobalMean => BaselinePredictor::Constant(global_mean()),
        BaselineKind::GlobalMedian => BaselinePredictor::Constant(median(&targets)),
        BaselineKind::GlobalZero => BaselinePredictor::Constant(0.0),
        BaselineKind::GlobalPopularity => BaselinePredictor::Popularity {
            ranking: ranked(&link_counts(train)),
            k,
        },
        BaselineKind::PastVisit => {
            let mut per: HashMap<usize, HashMap<usize, usize>> = HashMap::new();
            for r in &train.rows {
                let h = per.entry(r.entity).or_default();
                for &d in r.target.links() {
                    *h.entry(d).or_insert(0) += 1;
                }
            }
            BaselinePredictor::PastVisit {
                history: per.iter().map(|(&e, h)| (e, ranked(h))).collect(),
                popularity: ranked(&link_counts(train)),
                k,
            }
        }
        BaselineKind::TabularLinear if train.task_type == TaskType::Recommendation => {
            fit_linear_rec(train, db, k)?
        }
        BaselineKind::TabularLinear => {
            let features = encoded_table(db, &train.entity_type)?;
            let d = features.ncols() + 1;
            let rows: Vec<f64> = train
                .rows
                .iter()
                .flat_map(|r| with_intercept(&features.row(r.entity).to_vec()))
                .collect();
            let x = DMatrix::from_row_slice(train.len(), d, &rows);
            let y = DVector::from_vec(targets.clone());
            let classification = train.task_type == TaskType::EntityClassification;
            let weights = if classification {
                fit_logistic(&x, &y)?
            } else {
                fit_ridge(&x, &y)?
            };
            BaselinePredictor::Linear(LinearModel {
                classification,
                weights,
                features,
            })
        }
    })
}

fn fit_linear_rec(train: &TrainingTable, db: &Database, k: usize) -> Result<BaselinePredictor, BaselineError> {
    let dst_name = train.dst_type.clone().unwrap_or_default();
    let dst_features = encoded_table(db, &dst_name)?;
    let n_dst = dst_features.nrows();
    let counts_map = link_counts(train);
    let popularity = ranked(&counts_map);
    let mut counts = vec![0usize; n_dst];
    for (&d, &c) in &counts_map {
        counts[d] = c;
    }
    let candidates: Vec<usize> = popularity.iter().copied().take(REC_CANDIDATES).collect();
    let mut model = LinearRec {
        weights: Vec::new(),
        candidates,
        dst_features,
        counts,
        history: HashMap::new(),
        popularity,
        k,
    };

    // Rows in seed-time order so each pair only sees strictly earlier history.
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.sort_by_key(|&i| (train.rows[i].seed_time, train.rows[i].entity));
    let mut rng = rng_for(0, "baseline/tabular_linear/negatives");
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let t = train.rows[order[i]].seed_time;
        let same_time: Vec<usize> = order[i..]
            .iter()
            .copied()
            .take_while(|&j| train.rows[j].seed_time == t)
            .collect();
        for &j in &same_time {
            let r = &train.rows[j];
            let hist = model.history.get(&r.entity);
            let past = |d: usize| hist.and_then(|h| h.get(&d)).copied().unwrap_or(0);
            for &d in r.target.links() {
                xs.extend(model.pair_features(d, past(d)));
                ys.push(1.0);
            }
            let negs: Vec<usize> = model
                .candidates
                .iter()
                .copied()
                .filter(|c| r.target.links().binary_search(c).is_err())
                .collect();
            for &d in negs.choose_multiple(&mut rng, REC_NEGATIVES) {
                xs.extend(model.pair_features(d, past(d)));
                ys.push(0.0);
            }
        }
        for &j in &same_time {
            let r = &train.rows[j];
            let h = model.history.entry(r.entity).or_default();
            for &d in r.target.links() {
                *h.entry(d).or_insert(0) += 1;
            }
        }
        i += same_time.len();
    }
    let d = model.dst_features.ncols() + 3;
    let x = DMatrix::from_row_slice(ys.len(), d, &xs);
    model.weights = fit_logistic(&x, &DVector::from_vec(ys))?;
    Ok(BaselinePredictor::LinearRec(model))
}

impl BaselinePredictor {
    pub fn predict(&self, rows: &TrainingTable) -> Predictions {
        match self {
            BaselinePredictor::Entity { stats, fallback } => Predictions::Scores(
                rows.rows
                    .iter()
                    .map(|r| stats.get(&r.entity).copied().unwrap_or(*fallback))
                    .collect(),
            ),
            BaselinePredictor::Constant(c) => Predictions::Scores(vec![*c; rows.len()]),
            BaselinePredictor::Popularity { ranking, k } => {
                let top: Vec<usize> = ranking.iter().copied().take(*k).collect();
                Predictions::Rankings(vec![top; rows.len()])
            }
            BaselinePredictor::PastVisit { history, popularity, k } => Predictions::Rankings(
                rows.rows
                    .iter()
                    .map(|r| pad(history.get(&r.entity).cloned().unwrap_or_default(), popularity, *k))
                    .collect(),
            ),
            BaselinePredictor::Linear(m) => Predictions::Scores(
                rows.rows
                    .iter()
                    .map(|r| {
                        let z = dot(&m.weights, with_intercept(&m.features.row(r.entity).to_vec()));
                        if m.classification {
                            sigmoid(z)
                        } else {
                            z
                        }
                    })
                    .collect(),
            ),
            BaselinePredictor::LinearRec(m) => {
                Predictions::Rankings(rows.rows.iter().map(|r| m.rank(r.entity)).collect())
            }
        }
    }
}
