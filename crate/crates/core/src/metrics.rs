//! AUROC, MAE and MAP@K plus the JSON-lines evaluation report.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::db::format_float;
use crate::task::{TaskType, TrainingTable};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {predictions} predictions for {targets} targets")]
    LengthMismatch { predictions: usize, targets: usize },
    #[error("undefined AUROC: targets contain a single class")]
    SingleClass,
    #[error("empty input")]
    Empty,
    #[error("no row has a non-empty ground truth")]
    NoRelevantRows,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("non-finite prediction at row {0}")]
    NonFinite(usize),
    #[error("predictions csv, line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

fn check_len(pred: usize, target: usize) -> Result<(), MetricError> {
    if pred != target {
        return Err(MetricError::LengthMismatch {
            predictions: pred,
            targets: target,
        });
    }
    if pred == 0 {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Area under the ROC curve via the rank-sum statistic; ties in scores get
/// their mid-rank. Targets are treated as positive when `> 0.5`.
pub fn auroc(scores: &[f64], targets: &[f64]) -> Result<f64, MetricError> {
    check_len(scores.len(), targets.len())?;
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite(i));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = targets.iter().filter(|&&y| y > 0.5).count();
    let n_neg = targets.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if targets[idx] > 0.5 {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn mae(predictions: &[f64], targets: &[f64]) -> Result<f64, MetricError> {
    check_len(predictions.len(), targets.len())?;
    if let Some(i) = predictions.iter().position(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite(i));
    }
    let total: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, y)| (p - y).abs())
        .sum();
    Ok(total / predictions.len() as f64)
}

/// Average precision of one ranking truncated at `k`, normalized by
/// `min(|truth|, k)`. `truth` must be non-empty.
pub fn average_precision_at_k(ranking: &[usize], truth: &[usize], k: usize) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    let mut seen = Vec::with_capacity(k);
    for (pos, item) in ranking.iter().take(k).enumerate() {
        if seen.contains(item) {
            continue;
        }
        seen.push(*item);
        if truth.contains(item) {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    sum / truth.len().min(k) as f64
}

/// Mean average precision at `k` over rows with a non-empty ground truth.
pub fn map_at_k(rankings: &[Vec<usize>], truth: &[Vec<usize>], k: usize) -> Result<f64, MetricError> {
    if k == 0 {
        return Err(MetricError::ZeroK);
    }
    check_len(rankings.len(), truth.len())?;
    let mut total = 0.0;
    let mut rows = 0usize;
    for (r, t) in rankings.iter().zip(truth) {
        if t.is_empty() {
            continue;
        }
        total += average_precision_at_k(r, t, k);
        rows += 1;
    }
    if rows == 0 {
        return Err(MetricError::NoRelevantRows);
    }
    Ok(total / rows as f64)
}

/// Model output aligned with the rows of a training table.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictions {
    Scores(Vec<f64>),
    /// Ranked destination indices per row.
    Rankings(Vec<Vec<usize>>),
}

impl Predictions {
    pub fn len(&self) -> usize {
        match self {
            Predictions::Scores(v) => v.len(),
            Predictions::Rankings(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Single `prediction` column; rankings are `|`-separated.
    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut out = String::from("prediction\n");
        match self {
            Predictions::Scores(v) => {
                for x in v {
                    out.push_str(&format_float(*x));
                    out.push('\n');
                }
            }
            Predictions::Rankings(v) => {
                for r in v {
                    let cells: Vec<String> = r.iter().map(usize::to_string).collect();
                    out.push_str(&cells.join("|"));
                    out.push('\n');
                }
            }
        }
        out.into_bytes()
    }

    pub fn from_csv_bytes(bytes: &[u8], rankings: bool) -> Result<Predictions, MetricError> {
        let text = String::from_utf8_lossy(bytes);
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("prediction") {
            return Err(MetricError::Parse {
                line: 1,
                reason: "expected header `prediction`".into(),
            });
        }
        let bad = |line: usize, cell: &str| MetricError::Parse {
            line,
            reason: format!("cannot parse `{cell}`"),
        };
        if rankings {
            let mut out = Vec::new();
            for (i, l) in lines.enumerate() {
                let l = l.trim();
                let r = if l.is_empty() {
                    Vec::new()
                } else {
                    l.split('|')
                        .map(|c| c.parse().map_err(|_| bad(i + 2, c)))
                        .collect::<Result<Vec<usize>, _>>()?
                };
                out.push(r);
            }
            Ok(Predictions::Rankings(out))
        } else {
            let v = lines
                .enumerate()
                .map(|(i, l)| l.trim().parse::<f64>().map_err(|_| bad(i + 2, l)))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Predictions::Scores(v))
        }
    }
}

/// Scores `preds` against `table` with the task's metric.
pub fn evaluate(table: &TrainingTable, preds: &Predictions) -> Result<EvalReport, MetricError> {
    if preds.len() != table.len() {
        return Err(MetricError::LengthMismatch {
            predictions: preds.len(),
            targets: table.len(),
        });
    }
    let split = table.split.as_str();
    match (table.task_type, preds) {
        (TaskType::EntityClassification, Predictions::Scores(s)) => Ok(EvalReport::new(
            &table.task,
            split,
            "auroc",
            auroc(s, &table.scalar_targets())?,
            s.len(),
        )),
        (TaskType::EntityRegression, Predictions::Scores(s)) => Ok(EvalReport::new(
            &table.task,
            split,
            "mae",
            mae(s, &table.scalar_targets())?,
            s.len(),
        )),
        (TaskType::Recommendation, Predictions::Rankings(r)) => {
            let k = table.k.unwrap_or(10);
            let truth: Vec<Vec<usize>> = table.rows.iter().map(|row| row.target.links().to_vec()).collect();
            let mut rep = EvalReport::new(&table.task, split, "map_at_k", map_at_k(r, &truth, k)?, r.len());
            rep.k = Some(k);
            Ok(rep)
        }
        _ => Err(MetricError::Parse {
            line: 0,
            reason: format!("prediction kind does not fit a {} task", table.task_type),
        }),
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
}

impl EvalReport {
    pub fn new(task: &str, split: &str, metric: &str, value: f64, n: usize) -> EvalReport {
        EvalReport {
            task: task.to_string(),
            split: split.to_string(),
            metric: metric.to_string(),
            value,
            n,
            k: None,
            model: None,
            ablation: None,
            seed: None,
            epoch: None,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

pub fn write_jsonl(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&r.to_json_line());
        out.push('\n');
    }
    out
}

pub fn read_jsonl(text: &str) -> Result<Vec<EvalReport>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
