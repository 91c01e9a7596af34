mod report;
mod run;

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use relgraph_core::baselines;
use relgraph_core::model::write_checkpoint;
use relgraph_core::snapshot::{read_graph, write_graph};
use relgraph_core::task::table_stats;
use relgraph_core::*;

use run::RunManifest;

/// Relational databases as temporal graphs: build, sample, train, evaluate.
#[derive(Debug, Parser)]
#[command(name = "relgraph", version)]
struct Cli {
    /// Root seed; every random stream of the command derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load a database and print a validation report.
    Validate { manifest: PathBuf },
    /// Build the heterogeneous temporal graph and write an RGH1 snapshot.
    BuildGraph {
        manifest: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Shuffle edge destinations with this seed (ablation).
        #[arg(long, value_name = "SEED")]
        permute_edges: Option<u64>,
    },
    /// Generate train/val/test training tables for a task.
    MakeTask {
        manifest: PathBuf,
        task: PathBuf,
        #[arg(long, value_name = "T")]
        val_ts: String,
        #[arg(long, value_name = "T")]
        test_ts: String,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Fit a non-learned baseline and score the val and test tables.
    Baseline {
        kind: String,
        task_dir: PathBuf,
        /// Run directory; defaults to `<task dir>/runs/baseline-<kind>`.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Train the GNN on a graph snapshot and a task directory.
    Train {
        graph: PathBuf,
        task_dir: PathBuf,
        /// Partial JSON config overlaid on the task-type defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        ablate: Option<Ablation>,
        /// Run directory; defaults to `<task dir>/runs/<model>-seed<seed>[-<ablation>]`.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Score a predictions CSV against a split of a task directory.
    Evaluate {
        predictions: PathBuf,
        task_dir: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Generate a synthetic database with planted signal.
    Synth {
        config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Aggregate the metrics of every run below a directory.
    Report {
        run_dir: PathBuf,
        /// Print JSON lines instead of a table.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Ablation {
    FeatureMask,
    TimeEmbedding,
}

impl Ablation {
    fn tag(self) -> &'static str {
        match self {
            Ablation::FeatureMask => "feature-mask",
            Ablation::TimeEmbedding => "time-embedding",
        }
    }
}

/// Input problems detected before any work starts; exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("RELGRAPH_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("RELGRAPH_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn require_file(p: &Path) -> Result<()> {
    if !p.is_file() {
        return Err(usage(format!("no such file: {}", p.display())));
    }
    Ok(())
}

fn require_dir(p: &Path) -> Result<()> {
    if !p.is_dir() {
        return Err(usage(format!("no such directory: {}", p.display())));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let argv: Vec<String> = std::env::args().collect();
    let mut rm = RunManifest::new(argv);
    match cli.command {
        Command::Validate { manifest } => {
            require_file(&manifest)?;
            rm.command = "validate".into();
            rm.input(&manifest)?;
            let db = rm.time("load", || load_db(&manifest))?;
            let report = validate(&db);
            println!("{}", serde_json::to_string(&report)?);
            rm.emit_stderr()
        }
        Command::BuildGraph {
            manifest,
            output,
            permute_edges,
        } => {
            require_file(&manifest)?;
            rm.command = "build-graph".into();
            rm.input(&manifest)?;
            if let Some(s) = permute_edges {
                rm.seeds.insert("permute_edges".into(), s);
            }
            let db = rm.time("load", || load_db(&manifest))?;
            let policy = permute_edges.map_or(EdgePolicy::Normal, |seed| EdgePolicy::Permuted { seed });
            let g = rm.time("build", || build_graph(&db, policy));
            let file = fs::File::create(&output).with_context(|| format!("creating {}", output.display()))?;
            rm.time("write", || write_graph(&g, BufWriter::new(file)))?;
            rm.artifact("graph", &output)?;
            println!("{g}");
            rm.write(&sidecar(&output))
        }
        Command::MakeTask {
            manifest,
            task,
            val_ts,
            test_ts,
            output,
        } => {
            require_file(&manifest)?;
            require_file(&task)?;
            rm.command = "make-task".into();
            rm.config(&task)?;
            rm.input(&manifest)?;
            let parse_ts = |flag: &str, s: &str| {
                Timestamp::parse(s).ok_or_else(|| usage(format!("{flag}: cannot parse timestamp `{s}`")))
            };
            let split = SplitConfig {
                val_timestamp: parse_ts("--val-ts", &val_ts)?,
                test_timestamp: parse_ts("--test-ts", &test_ts)?,
            };
            let spec: TaskSpec = serde_json::from_str(&fs::read_to_string(&task)?)
                .with_context(|| format!("parsing {}", task.display()))?;
            let db = rm.time("load", || load_db(&manifest))?;
            let tables = rm.time("tables", || make_training_table(&db, &spec, split))?;
            write_task_dir(&mut rm, &output, &manifest, &tables)?;
            for s in Split::ALL {
                println!("{s}: {} rows", tables.get(s).len());
            }
            println!("dropped at split boundaries: {}", tables.dropped);
            rm.write(&output.join("run.json"))
        }
        Command::Baseline { kind, task_dir, output } => {
            require_dir(&task_dir)?;
            let kind: BaselineKind = kind.parse().map_err(|_| {
                let kinds: Vec<&str> = BaselineKind::ALL.iter().map(|k| k.as_str()).collect();
                usage(format!("unknown baseline `{kind}`; expected one of {}", kinds.join(", ")))
            })?;
            rm.command = "baseline".into();
            let td = TaskDir::load(&task_dir, &mut rm)?;
            let db = rm.time("load", || load_db(&td.meta.manifest))?;
            let model = baselines::fit(kind, &td.tables.train, &db)?;
            let out = output.unwrap_or_else(|| task_dir.join("runs").join(format!("baseline-{kind}")));
            fs::create_dir_all(&out)?;
            let mut reports = Vec::new();
            for s in [Split::Val, Split::Test] {
                let table = td.tables.get(s);
                if table.is_empty() {
                    continue;
                }
                let preds = model.predict(table);
                write_artifact(&mut rm, &out, &format!("preds_{s}.csv"), &preds.to_csv_bytes())?;
                let mut r = evaluate(table, &preds)?;
                r.model = Some(format!("baseline/{kind}"));
                println!("{}", r.to_json_line());
                reports.push(r);
            }
            write_artifact(&mut rm, &out, "metrics.jsonl", relgraph_core::metrics::write_jsonl(&reports).as_bytes())?;
            rm.write(&out.join("run.json"))
        }
        Command::Train {
            graph,
            task_dir,
            config,
            ablate,
            output,
        } => {
            require_file(&graph)?;
            require_dir(&task_dir)?;
            rm.command = "train".into();
            rm.input(&graph)?;
            let td = TaskDir::load(&task_dir, &mut rm)?;
            let task_type = td.tables.spec.task_type;
            let mut cfg = match &config {
                Some(p) => {
                    require_file(p)?;
                    rm.config(p)?;
                    ModelConfig::from_json_overlay(task_type, &fs::read_to_string(p)?)
                        .with_context(|| format!("config {}", p.display()))?
                }
                None => ModelConfig::for_task(task_type).resolved(),
            };
            match ablate {
                Some(Ablation::FeatureMask) => cfg.encoder.feature_mask = true,
                Some(Ablation::TimeEmbedding) => cfg.encoder.time_embedding = false,
                None => {}
            }
            let seed = cli.seed.unwrap_or(cfg.train.rng_seed);
            cfg.train.rng_seed = seed;
            rm.seeds.insert("train".into(), seed);
            let g = rm.time("load graph", || -> Result<_> {
                let f = fs::File::open(&graph)?;
                Ok(read_graph(BufReader::new(f))?)
            })?;
            let mut tags: Vec<&str> = ablate.map(Ablation::tag).into_iter().collect();
            if let EdgePolicy::Permuted { seed } = g.policy {
                rm.seeds.insert("permute_edges".into(), seed);
                tags.push("permute-edges");
            }
            let ablation = (!tags.is_empty()).then(|| tags.join("+"));
            let head = serde_json::to_value(cfg.head.head_type)?;
            let head = head.as_str().unwrap_or("model");
            let out = output.unwrap_or_else(|| {
                let mut name = format!("{head}-seed{seed}");
                if let Some(a) = &ablation {
                    name.push('-');
                    name.push_str(a);
                }
                task_dir.join("runs").join(name)
            });
            fs::create_dir_all(&out)?;

            let res = rm.time("train", || train(&g, &td.tables, &cfg))?;
            let tag = |mut r: EvalReport| {
                r.ablation = ablation.clone();
                r
            };
            let n_epoch_reports = 2 * res.epochs.len();
            let epoch_reports: Vec<EvalReport> = res.reports[..n_epoch_reports].iter().cloned().map(tag).collect();
            let final_reports: Vec<EvalReport> = res.reports[n_epoch_reports..].iter().cloned().map(tag).collect();
            write_artifact(&mut rm, &out, "config.json", serde_json::to_string_pretty(&cfg)?.as_bytes())?;
            let mut ckpt = Vec::new();
            write_checkpoint(&res.model.params, &mut ckpt)?;
            write_artifact(&mut rm, &out, "checkpoint.rpm", &ckpt)?;
            write_artifact(&mut rm, &out, "epochs.jsonl", relgraph_core::metrics::write_jsonl(&epoch_reports).as_bytes())?;
            write_artifact(&mut rm, &out, "metrics.jsonl", relgraph_core::metrics::write_jsonl(&final_reports).as_bytes())?;
            for s in [Split::Val, Split::Test] {
                let table = td.tables.get(s);
                if table.is_empty() {
                    continue;
                }
                let preds = rm.time(&format!("predict {s}"), || res.model.predict(&g, table))?;
                write_artifact(&mut rm, &out, &format!("preds_{s}.csv"), &preds.to_csv_bytes())?;
            }
            for r in &final_reports {
                println!("{}", r.to_json_line());
            }
            rm.write(&out.join("run.json"))
        }
        Command::Evaluate {
            predictions,
            task_dir,
            split,
        } => {
            require_file(&predictions)?;
            require_dir(&task_dir)?;
            rm.command = "evaluate".into();
            rm.input(&predictions)?;
            let td = TaskDir::load(&task_dir, &mut rm)?;
            let table = td.tables.get(split);
            let rec = td.tables.spec.task_type == TaskType::Recommendation;
            let preds = Predictions::from_csv_bytes(&fs::read(&predictions)?, rec)
                .with_context(|| format!("reading {}", predictions.display()))?;
            let report = match evaluate(table, &preds) {
                Err(MetricError::LengthMismatch { predictions, targets }) => {
                    bail!("row count mismatch: {predictions} predictions for {targets} {split} rows")
                }
                r => r?,
            };
            println!("{}", report.to_json_line());
            rm.emit_stderr()
        }
        Command::Synth { config, output } => {
            require_file(&config)?;
            rm.command = "synth".into();
            rm.config(&config)?;
            let mut cfg: SynthConfig = serde_json::from_str(&fs::read_to_string(&config)?)
                .with_context(|| format!("parsing {}", config.display()))?;
            if let Some(s) = cli.seed {
                cfg.rng_seed = s;
            }
            rm.seeds.insert("synth".into(), cfg.rng_seed);
            let out = rm.time("generate", || generate(&cfg))?;
            fs::create_dir_all(&output)?;
            out.db.write_to_dir(&output)?;
            rm.artifact("manifest", &output.join("manifest.json"))?;
            for t in out.db.tables.values() {
                rm.artifact(t.name(), &output.join(&t.spec.file))?;
            }
            write_artifact(&mut rm, &output, "task.json", serde_json::to_string_pretty(&out.task)?.as_bytes())?;
            write_artifact(&mut rm, &output, "split.json", serde_json::to_string_pretty(&out.split)?.as_bytes())?;
            println!(
                "{} tables; suggested split --val-ts {} --test-ts {}",
                out.db.tables.len(),
                out.split.val_timestamp,
                out.split.test_timestamp
            );
            rm.write(&output.join("run.json"))
        }
        Command::Report { run_dir, json } => {
            require_dir(&run_dir)?;
            rm.command = "report".into();
            let rows = report::collect(&run_dir, &mut rm)?;
            if rows.is_empty() {
                bail!("no metrics.jsonl below {}", run_dir.display());
            }
            if json {
                for r in &rows {
                    println!("{}", serde_json::to_string(r)?);
                }
            } else {
                print!("{}", report::render(&rows));
            }
            rm.emit_stderr()
        }
    }
}

fn load_db(manifest: &Path) -> Result<Database> {
    let m = load_manifest(manifest)?;
    let dir = m.base_dir.clone();
    Ok(load_database(&m, dir)?)
}

fn sidecar(p: &Path) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

fn write_artifact(rm: &mut RunManifest, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    rm.artifact_bytes(name, bytes);
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct TaskMeta {
    manifest: PathBuf,
    manifest_sha256: String,
    rows: SplitRows,
    dropped: usize,
    stats: Vec<(Split, relgraph_core::task::StatsReport)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitRows {
    train: usize,
    val: usize,
    test: usize,
}

fn write_task_dir(rm: &mut RunManifest, out: &Path, manifest: &Path, tables: &TaskTables) -> Result<()> {
    fs::create_dir_all(out)?;
    write_artifact(rm, out, "task.json", serde_json::to_string_pretty(&tables.spec)?.as_bytes())?;
    write_artifact(rm, out, "split.json", serde_json::to_string_pretty(&tables.split)?.as_bytes())?;
    let mut stats = Vec::new();
    for (i, s) in Split::ALL.into_iter().enumerate() {
        let earlier: Vec<&TrainingTable> = Split::ALL[..i].iter().map(|&e| tables.get(e)).collect();
        stats.push((s, table_stats(tables.get(s), &earlier)));
        write_artifact(rm, out, &format!("{s}.csv"), &tables.get(s).to_csv_bytes())?;
    }
    let manifest = fs::canonicalize(manifest)?;
    let meta = TaskMeta {
        manifest_sha256: run::sha256_file(&manifest)?,
        manifest,
        rows: SplitRows {
            train: tables.train.len(),
            val: tables.val.len(),
            test: tables.test.len(),
        },
        dropped: tables.dropped,
        stats,
    };
    write_artifact(rm, out, "meta.json", serde_json::to_string_pretty(&meta)?.as_bytes())
}

struct TaskDir {
    meta: TaskMeta,
    tables: TaskTables,
}

impl TaskDir {
    fn load(dir: &Path, rm: &mut RunManifest) -> Result<TaskDir> {
        let read = |name: &str| -> Result<Vec<u8>> {
            let p = dir.join(name);
            fs::read(&p).map_err(|e| usage(format!("{}: {e}", p.display())))
        };
        let spec: TaskSpec = serde_json::from_slice(&read("task.json")?).context("task.json")?;
        let split: SplitConfig = serde_json::from_slice(&read("split.json")?).context("split.json")?;
        let meta: TaskMeta = serde_json::from_slice(&read("meta.json")?).context("meta.json")?;
        let mut tables = Vec::new();
        for s in Split::ALL {
            let name = format!("{s}.csv");
            let bytes = read(&name)?;
            rm.input_bytes(&dir.join(&name), &bytes);
            tables.push(TrainingTable::from_csv_bytes(&bytes, &TrainingTable::empty(&spec, s)).context(name)?);
        }
        let [train, val, test]: [TrainingTable; 3] = tables.try_into().expect("three splits");
        Ok(TaskDir {
            tables: TaskTables {
                dropped: meta.dropped,
                spec,
                split,
                train,
                val,
                test,
            },
            meta,
        })
    }
}
