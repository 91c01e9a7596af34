//! Aggregation of `metrics.jsonl` files into mean ± std per configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use relgraph_core::metrics::read_jsonl;

use crate::run::RunManifest;

#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub task: String,
    pub model: String,
    pub ablation: Option<String>,
    pub split: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
    pub seeds: Vec<u64>,
}

fn metric_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            metric_files(&p, out)?;
        } else if e.file_name() == "metrics.jsonl" {
            out.push(p);
        }
    }
    Ok(())
}

type Key = (String, String, Option<String>, String, String);

pub fn collect(dir: &Path, rm: &mut RunManifest) -> Result<Vec<SummaryRow>> {
    let mut files = Vec::new();
    metric_files(dir, &mut files)?;
    let mut groups: BTreeMap<Key, (Vec<f64>, Vec<u64>)> = BTreeMap::new();
    for f in files {
        let text = fs::read_to_string(&f)?;
        rm.input_bytes(&f, text.as_bytes());
        for r in read_jsonl(&text).with_context(|| format!("parsing {}", f.display()))? {
            let key = (
                r.task,
                r.model.unwrap_or_else(|| "-".into()),
                r.ablation,
                r.split,
                r.metric,
            );
            let g = groups.entry(key).or_default();
            g.0.push(r.value);
            g.1.extend(r.seed);
        }
    }
    Ok(groups
        .into_iter()
        .map(|((task, model, ablation, split, metric), (values, mut seeds))| {
            seeds.sort_unstable();
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let std = if values.len() > 1 {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            SummaryRow {
                task,
                model,
                ablation,
                split,
                metric,
                mean,
                std,
                runs: values.len(),
                seeds,
            }
        })
        .collect())
}

pub fn render(rows: &[SummaryRow]) -> String {
    let header = ["task", "model", "ablation", "split", "metric", "mean ± std", "runs"];
    let cells: Vec<[String; 7]> = rows
        .iter()
        .map(|r| {
            [
                r.task.clone(),
                r.model.clone(),
                r.ablation.clone().unwrap_or_else(|| "-".into()),
                r.split.clone(),
                r.metric.clone(),
                format!("{:.4} ± {:.4}", r.mean, r.std),
                r.runs.to_string(),
            ]
        })
        .collect();
    let mut width = header.map(|h| h.chars().count());
    for c in &cells {
        for (w, s) in width.iter_mut().zip(c) {
            *w = (*w).max(s.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cols: &[String]| {
        let padded: Vec<String> = cols
            .iter()
            .zip(width)
            .map(|(s, w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(&header.map(String::from));
    for c in &cells {
        line(c);
    }
    out
}
