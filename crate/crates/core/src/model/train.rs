//! Minibatch training with validation-based model selection, and inference.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use super::net::{BatchTask, FeatureStore, Network};
use super::params::{Adam, Params};
use super::{HeadType, ModelConfig, ModelError};
use crate::db::Timestamp;
use crate::graph::{HeteroTemporalGraph, NodeRef, NodeType};
use crate::metrics::{evaluate, EvalReport, Predictions};
use crate::rng::{rng_for, substream};
use crate::sampler::{sample, SampledSubgraph, SamplerConfig};
use crate::task::{leakage_guard, Split, TaskTables, TaskType, TrainingTable};

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
}

/// Trained parameters together with everything inference needs.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub net: Network,
    pub params: Params,
    pub store: FeatureStore,
    pub task_type: TaskType,
    pub entity_type: NodeType,
    pub dst_type: Option<NodeType>,
    pub k: usize,
    /// Destinations by descending training-link count, ties by index.
    pub popularity: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    /// Per-epoch train loss and validation metric, then the selected
    /// model's validation and test metrics.
    pub reports: Vec<EvalReport>,
    /// ID-GNN rows whose subgraph held no destination candidate.
    pub skipped_rows: usize,
    /// ID-GNN rows whose true destinations were all outside the subgraph.
    pub unreachable_rows: usize,
}

fn lower_is_better(t: TaskType) -> bool {
    t == TaskType::EntityRegression
}

fn popularity(table: &TrainingTable, n_dst: usize) -> Vec<usize> {
    let mut counts = vec![0usize; n_dst];
    for r in &table.rows {
        for &d in r.target.links() {
            counts[d] += 1;
        }
    }
    let mut order: Vec<usize> = (0..n_dst).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    order
}

/// Top `k` of `scored` (descending score, ties by index), padded from
/// `fallback`.
fn rank_top_k(mut scored: Vec<(usize, f64)>, k: usize, fallback: &[usize]) -> Vec<usize> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out: Vec<usize> = scored.into_iter().map(|s| s.0).take(k).collect();
    for &d in fallback {
        if out.len() >= k {
            break;
        }
        if !out.contains(&d) {
            out.push(d);
        }
    }
    out
}

/// Earliest moment each destination may serve as a negative: the later of
/// its own timestamp and its first timestamped neighbor.
fn first_activity(g: &HeteroTemporalGraph, dst: NodeType) -> Vec<Option<Timestamp>> {
    (0..g.num_nodes(dst))
        .map(|i| {
            let n = NodeRef::new(dst, i);
            let first = g
                .edge_types_from(dst)
                .flat_map(|et| {
                    let to = g.edge_type(et).dst_type;
                    g.neighbor_indices(n, et)
                        .expect("node in range")
                        .iter()
                        .filter_map(move |&j| g.node_times[to.0][j])
                })
                .min()?;
            Some(g.time(n).map_or(first, |t| t.max(first)))
        })
        .collect()
}

impl TrainedModel {
    fn sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            rng_seed: seed,
            ..self.net.cfg.sampler
        }
    }

    fn seed_for(&self, label: &str) -> u64 {
        substream(self.net.cfg.train.rng_seed, label)
    }

    fn embed(
        &self,
        g: &HeteroTemporalGraph,
        seeds: &[(NodeRef, Timestamp)],
        label: &str,
    ) -> Result<(SampledSubgraph, super::net::Batch, Array2<f64>), ModelError> {
        let sg = sample(g, seeds, &self.sampler(self.seed_for(label)))?;
        let b = self.net.batch(g, &self.store, &sg);
        let h = self.net.forward(&self.params, &b).h.pop().expect("output");
        Ok((sg, b, h))
    }

    /// Predictions for every row of `table`: probabilities (classification),
    /// values (regression) or top-K rankings (recommendation).
    pub fn predict(&self, g: &HeteroTemporalGraph, table: &TrainingTable) -> Result<Predictions, ModelError> {
        let bs = self.net.cfg.train.batch_size;
        let split = table.split.as_str();
        match self.net.cfg.head.head_type {
            HeadType::MlpEntity => {
                let mut out = Vec::with_capacity(table.len());
                for (ci, chunk) in table.rows.chunks(bs).enumerate() {
                    let seeds: Vec<_> = chunk
                        .iter()
                        .map(|r| (NodeRef::new(self.entity_type, r.entity), r.seed_time))
                        .collect();
                    let (_, b, h) = self.embed(g, &seeds, &format!("eval/{split}/{ci}"))?;
                    let (y, _) = self.net.mlp_scores(&self.params, h.select(Axis(0), &b.seed_rows).view());
                    out.extend(y.into_iter().map(|x| match self.task_type {
                        TaskType::EntityClassification => 1.0 / (1.0 + (-x).exp()),
                        _ => x,
                    }));
                }
                Ok(Predictions::Scores(out))
            }
            HeadType::Idgnn => {
                let dst = self.dst_type.expect("recommendation model");
                let mut out = Vec::with_capacity(table.len());
                for (ci, chunk) in table.rows.chunks(bs).enumerate() {
                    let seeds: Vec<_> = chunk
                        .iter()
                        .map(|r| (NodeRef::new(self.entity_type, r.entity), r.seed_time))
                        .collect();
                    let (sg, b, h) = self.embed(g, &seeds, &format!("eval/{split}/{ci}"))?;
                    for cands in Network::candidates(&sg, &b, dst) {
                        if cands.is_empty() {
                            out.push(rank_top_k(Vec::new(), self.k, &self.popularity));
                            continue;
                        }
                        let rows: Vec<usize> = cands.iter().map(|c| c.0).collect();
                        let (y, _) = self.net.mlp_scores(&self.params, h.select(Axis(0), &rows).view());
                        let scored = cands.iter().map(|c| c.1).zip(y).collect();
                        out.push(rank_top_k(scored, self.k, &self.popularity));
                    }
                }
                Ok(Predictions::Rankings(out))
            }
            HeadType::TwoTower => {
                let dst = self.dst_type.expect("recommendation model");
                let mut by_time: BTreeMap<Timestamp, Vec<usize>> = BTreeMap::new();
                for (i, r) in table.rows.iter().enumerate() {
                    by_time.entry(r.seed_time).or_default().push(i);
                }
                let mut out = vec![Vec::new(); table.len()];
                for (t, rows) in by_time {
                    let items: Vec<usize> = (0..g.num_nodes(dst))
                        .filter(|&i| g.time(NodeRef::new(dst, i)).is_none_or(|nt| nt <= t))
                        .collect();
                    let mut dst_vecs = Array2::zeros((items.len(), self.net.hidden()));
                    for (ci, chunk) in items.chunks(bs).enumerate() {
                        let seeds: Vec<_> = chunk.iter().map(|&i| (NodeRef::new(dst, i), t)).collect();
                        let (_, b, h) = self.embed(g, &seeds, &format!("eval/{split}/dst/{}/{ci}", t.0))?;
                        let tower = self.net.tower(&self.params, h.select(Axis(0), &b.seed_rows).view(), false);
                        let start = ci * bs;
                        dst_vecs.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&tower);
                    }
                    for (ci, chunk) in rows.chunks(bs).enumerate() {
                        let seeds: Vec<_> = chunk
                            .iter()
                            .map(|&i| (NodeRef::new(self.entity_type, table.rows[i].entity), t))
                            .collect();
                        let (_, b, h) = self.embed(g, &seeds, &format!("eval/{split}/src/{}/{ci}", t.0))?;
                        let src = self.net.tower(&self.params, h.select(Axis(0), &b.seed_rows).view(), true);
                        let scores = src.dot(&dst_vecs.t());
                        for (j, &row) in chunk.iter().enumerate() {
                            let scored = items.iter().copied().zip(scores.row(j).iter().copied()).collect();
                            out[row] = rank_top_k(scored, self.k, &self.popularity);
                        }
                    }
                }
                Ok(Predictions::Rankings(out))
            }
        }
    }

    pub fn evaluate(&self, g: &HeteroTemporalGraph, table: &TrainingTable) -> Result<EvalReport, ModelError> {
        let preds = self.predict(g, table)?;
        Ok(evaluate(table, &preds)?)
    }
}

/// Trains on `tables.train`, selects the epoch with the best validation
/// metric and reports validation and test metrics of that epoch.
pub fn train(g: &HeteroTemporalGraph, tables: &TaskTables, cfg: &ModelConfig) -> Result<TrainOutcome, ModelError> {
    let cfg = cfg.clone().resolved();
    let task_type = tables.spec.task_type;
    cfg.check(task_type)?;
    for s in Split::ALL {
        if !leakage_guard(tables.get(s), &tables.split) {
            return Err(ModelError::Leakage { split: s.to_string() });
        }
    }
    if tables.train.is_empty() {
        return Err(ModelError::EmptyTable("train".into()));
    }
    if tables.val.is_empty() {
        return Err(ModelError::EmptyTable("val".into()));
    }
    let type_of = |name: &str| {
        g.node_type(name)
            .ok_or_else(|| ModelError::Config(format!("graph has no node type `{name}`")))
    };
    let entity_type = type_of(&tables.spec.entity_table)?;
    let dst_type = match &tables.spec.dst_table {
        Some(d) if task_type == TaskType::Recommendation => Some(type_of(d)?),
        _ => None,
    };
    let seed = cfg.train.rng_seed;
    let store = FeatureStore::build(g, Some(tables.split.val_timestamp));
    let net = Network::new(&cfg, g, &store);
    let params = net.init_params(seed);
    let mut model = TrainedModel {
        net,
        params,
        store,
        task_type,
        entity_type,
        dst_type,
        k: tables.spec.k.unwrap_or(10),
        popularity: dst_type.map_or_else(Vec::new, |d| popularity(&tables.train, g.num_nodes(d))),
    };
    let mut adam = Adam::new(&model.params, cfg.train.learning_rate);
    let train_rows = &tables.train.rows;
    let model_tag = format!(
        "rdl/{}",
        match cfg.head.head_type {
            HeadType::MlpEntity => "mlp_entity",
            HeadType::TwoTower => "two_tower",
            HeadType::Idgnn => "idgnn",
        }
    );
    let tag = |mut r: EvalReport, epoch: Option<usize>| {
        r.model = Some(model_tag.clone());
        r.seed = Some(seed);
        r.epoch = epoch;
        r
    };

    // Training units: rows, or (row, positive destination) pairs.
    let units: Vec<(usize, usize)> = match cfg.head.head_type {
        HeadType::TwoTower => {
            let dst = dst_type.expect("recommendation task");
            train_rows
                .iter()
                .enumerate()
                .flat_map(|(i, r)| r.target.links().iter().map(move |&d| (i, d)))
                .filter(|&(i, d)| g.time(NodeRef::new(dst, d)).is_none_or(|t| t <= train_rows[i].seed_time))
                .collect()
        }
        _ => (0..train_rows.len()).map(|i| (i, 0)).collect(),
    };
    let negatives: Vec<(Timestamp, usize)> = match (cfg.head.head_type, dst_type) {
        (HeadType::TwoTower, Some(dst)) => {
            let mut v: Vec<(Timestamp, usize)> = first_activity(g, dst)
                .into_iter()
                .enumerate()
                .filter_map(|(i, t)| t.map(|t| (t, i)))
                .collect();
            v.sort_unstable();
            v
        }
        _ => Vec::new(),
    };

    let mut epochs = Vec::new();
    let mut reports = Vec::new();
    let mut best: Option<(f64, usize, Params)> = None;
    let (mut skipped_rows, mut unreachable_rows) = (0, 0);
    for epoch in 0..cfg.train.max_epochs.max(1) {
        let mut epoch_loss = 0.0;
        let mut epoch_terms = 0usize;
        if epoch < cfg.train.max_epochs {
            let mut order = units.clone();
            order.shuffle(&mut rng_for(seed, &format!("train/shuffle/{epoch}")));
            let mut neg_rng = rng_for(seed, &format!("train/negatives/{epoch}"));
            for (bi, chunk) in order.chunks(cfg.train.batch_size).enumerate() {
                let (seeds, task) = batch_seeds(
                    chunk,
                    tables,
                    &cfg,
                    entity_type,
                    dst_type,
                    &negatives,
                    &mut neg_rng,
                    g,
                );
                let sampler = SamplerConfig {
                    rng_seed: substream(seed, &format!("train/sample/{epoch}/{bi}")),
                    ..cfg.sampler
                };
                let sg = sample(g, &seeds, &sampler)?;
                let b = model.net.batch(g, &model.store, &sg);
                let ev = model.net.loss(&model.params, &sg, &b, &task);
                if !ev.loss.is_finite() {
                    return Err(ModelError::Diverged {
                        epoch,
                        batch: bi,
                        loss: ev.loss,
                    });
                }
                if epoch == 0 {
                    skipped_rows += ev.skipped;
                    unreachable_rows += ev.unreachable;
                }
                epoch_loss += ev.loss * ev.terms as f64;
                epoch_terms += ev.terms;
                adam.step(&mut model.params, &ev.grads);
                if !model.params.all_finite() {
                    return Err(ModelError::Diverged {
                        epoch,
                        batch: bi,
                        loss: f64::NAN,
                    });
                }
            }
        }
        let val = model.evaluate(g, &tables.val)?;
        let train_loss = epoch_loss / epoch_terms.max(1) as f64;
        let mut loss_report = EvalReport::new(&tables.spec.name, "train", "loss", train_loss, tables.train.len());
        loss_report.k = None;
        reports.push(tag(loss_report, Some(epoch)));
        reports.push(tag(val.clone(), Some(epoch)));
        epochs.push(EpochLog {
            epoch,
            train_loss,
            val_metric: val.value,
        });
        let improved = match &best {
            None => true,
            Some((v, _, _)) if lower_is_better(task_type) => val.value < *v,
            Some((v, _, _)) => val.value > *v,
        };
        if improved {
            best = Some((val.value, epoch, model.params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    model.params = params;
    reports.push(tag(model.evaluate(g, &tables.val)?, Some(best_epoch)));
    if !tables.test.is_empty() {
        reports.push(tag(model.evaluate(g, &tables.test)?, Some(best_epoch)));
    }
    Ok(TrainOutcome {
        model,
        epochs,
        best_epoch,
        reports,
        skipped_rows,
        unreachable_rows,
    })
}

#[allow(clippy::too_many_arguments)]
fn batch_seeds(
    chunk: &[(usize, usize)],
    tables: &TaskTables,
    cfg: &ModelConfig,
    entity_type: NodeType,
    dst_type: Option<NodeType>,
    negatives: &[(Timestamp, usize)],
    rng: &mut rand_chacha::ChaCha8Rng,
    g: &HeteroTemporalGraph,
) -> (Vec<(NodeRef, Timestamp)>, BatchTask) {
    let rows = &tables.train.rows;
    match cfg.head.head_type {
        HeadType::MlpEntity => (
            chunk
                .iter()
                .map(|&(i, _)| (NodeRef::new(entity_type, rows[i].entity), rows[i].seed_time))
                .collect(),
            BatchTask::Entity {
                classification: tables.spec.task_type == TaskType::EntityClassification,
                targets: chunk.iter().map(|&(i, _)| rows[i].target.scalar().unwrap_or(0.0)).collect(),
            },
        ),
        HeadType::Idgnn => (
            chunk
                .iter()
                .map(|&(i, _)| (NodeRef::new(entity_type, rows[i].entity), rows[i].seed_time))
                .collect(),
            BatchTask::IdGnn {
                dst_type: dst_type.expect("recommendation task"),
                truth: chunk.iter().map(|&(i, _)| rows[i].target.links().to_vec()).collect(),
            },
        ),
        HeadType::TwoTower => {
            let dst = dst_type.expect("recommendation task");
            let n_dst = g.num_nodes(dst);
            let mut seeds = Vec::new();
            let mut index: HashMap<(NodeRef, Timestamp), usize> = HashMap::new();
            let mut root = |n: NodeRef, t: Timestamp, seeds: &mut Vec<(NodeRef, Timestamp)>| {
                *index.entry((n, t)).or_insert_with(|| {
                    seeds.push((n, t));
                    seeds.len() - 1
                })
            };
            let mut triples = Vec::with_capacity(chunk.len());
            for &(i, pos) in chunk {
                let row = &rows[i];
                let t = row.seed_time;
                let active = negatives.partition_point(|(ft, _)| *ft < t);
                let mut neg = 0;
                for _ in 0..8 {
                    neg = if active > 0 {
                        negatives[rng.gen_range(0..active)].1
                    } else {
                        rng.gen_range(0..n_dst)
                    };
                    if row.target.links().binary_search(&neg).is_err() {
                        break;
                    }
                }
                if g.time(NodeRef::new(dst, neg)).is_some_and(|nt| nt > t) {
                    neg = pos;
                }
                let s = root(NodeRef::new(entity_type, row.entity), t, &mut seeds);
                let p = root(NodeRef::new(dst, pos), t, &mut seeds);
                let q = root(NodeRef::new(dst, neg), t, &mut seeds);
                triples.push((s, p, q));
            }
            (seeds, BatchTask::TwoTower { triples })
        }
    }
}
