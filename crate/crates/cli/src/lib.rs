//! Command implementations behind the `exitcascade` binary.
//!
//! Every command reads one settings file plus `--set key=value` overrides
//! and writes its results into `--out`: CSV tables, line-delimited JSON plot
//! data and, with `--svg`, rendered charts.

pub mod svg;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use exitcascade::checkpoint;
use exitcascade::config::Settings;
use exitcascade::dataset::{generate_synthetic, load_dataset, save_dataset, save_difficulty};
use exitcascade::eval::{
    compare_fixed_vs_adaptive, evaluate, exit_matrix, fixed_budget_curve, sweep_beta,
};
use exitcascade::trainer::{train, train_gates, PreparedSet, LOG_HEADER};
use exitcascade::{CascadeModel, VideoFeatures};

use svg::Series;

#[derive(Debug, Parser)]
#[command(name = "exitcascade", version, about = "Early-exit video recognition cascades")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Settings file (`key = value` per line).
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (created if missing).
    #[arg(long, short)]
    pub out: PathBuf,
    /// Also render SVG charts.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic train/test split.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train classifiers, then gates.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training manifest.
        #[arg(long)]
        train: PathBuf,
    },
    /// Retrain only the gates of an existing checkpoint with `train.beta`.
    TrainGates {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Gated inference over a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Retrain gates for every `sweep.betas` value and evaluate each.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Stage-1 checkpoint whose classifiers are shared.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Accuracy of every classifier on every exit cohort.
    ExitMatrix {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Adaptive exiting against fixed budgets at matched frame counts.
    CompareFixed {
        #[command(flatten)]
        common: Common,
        /// Gated checkpoints; repeatable.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
    },
}

/// Runs one command, returning lines to print on standard output.
pub fn run(cli: Cli) -> Result<Vec<String>> {
    match cli.command {
        Command::Gen { common } => cmd_gen(&common),
        Command::Train { common, train } => cmd_train(&common, &train),
        Command::TrainGates { common, train, checkpoint } => cmd_train_gates(&common, &train, &checkpoint),
        Command::Eval { common, checkpoint, data } => cmd_eval(&common, &checkpoint, &data),
        Command::Sweep { common, checkpoint, train, test } => cmd_sweep(&common, &checkpoint, &train, &test),
        Command::ExitMatrix { common, checkpoint, data } => cmd_exit_matrix(&common, &checkpoint, &data),
        Command::CompareFixed { common, checkpoints, data } => cmd_compare(&common, &checkpoints, &data),
    }
}

/// One-line machine-readable description of a failure.
pub fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<exitcascade::Error>())
        .map_or("cli", exitcascade::Error::kind);
    // Library errors already render their own causes.
    let mut parts = Vec::new();
    for e in err.chain() {
        parts.push(e.to_string());
        if e.is::<exitcascade::Error>() {
            break;
        }
    }
    let message = parts.join(": ");
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

fn settings(common: &Common) -> Result<Settings> {
    let mut s = match &common.config {
        Some(path) => Settings::from_file(path)?,
        None => Settings::default(),
    };
    s.apply_overrides(&common.overrides)?;
    fs::create_dir_all(&common.out)
        .with_context(|| format!("creating output directory {}", common.out.display()))?;
    Ok(s)
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn jsonl<T: Serialize>(records: impl IntoIterator<Item = T>) -> String {
    records
        .into_iter()
        .map(|r| serde_json::to_string(&r).expect("plain data serializes") + "\n")
        .collect()
}

fn load(path: &Path) -> Result<Vec<VideoFeatures>> {
    let videos = load_dataset(path)?;
    if videos.is_empty() {
        bail!("dataset {} is empty", path.display());
    }
    Ok(videos)
}

fn load_model(path: &Path, settings: &Settings) -> Result<(CascadeModel, checkpoint::CheckpointMeta)> {
    let (model, meta) = checkpoint::load(path)?;
    let t = &settings.train;
    if model.dims().categories != t.categories {
        bail!(
            "checkpoint {} has {} categories but data.categories is {}",
            path.display(),
            model.dims().categories,
            t.categories
        );
    }
    Ok((model, meta))
}

fn cmd_gen(common: &Common) -> Result<Vec<String>> {
    let s = settings(common)?;
    let ds = generate_synthetic(&s.data)?;
    let out = &common.out;
    save_dataset(out.join("train.tsv"), &ds.train)?;
    save_dataset(out.join("test.tsv"), &ds.test)?;
    save_difficulty(out.join("train.difficulty.tsv"), &ds.train, &ds.train_meta)?;
    save_difficulty(out.join("test.difficulty.tsv"), &ds.test, &ds.test_meta)?;
    write(out, "settings.cfg", s.canonical())?;
    let hard = |m: &[exitcascade::dataset::Difficulty]| m.iter().filter(|d| !d.easy).count();
    Ok(vec![
        "split,videos,hard".into(),
        format!("train,{},{}", ds.train.len(), hard(&ds.train_meta)),
        format!("test,{},{}", ds.test.len(), hard(&ds.test_meta)),
    ])
}

fn log_csv(log: &[exitcascade::trainer::EpochLog]) -> String {
    let mut csv = format!("{LOG_HEADER}\n");
    for l in log {
        csv.push_str(&l.csv_line());
        csv.push('\n');
    }
    csv
}

fn cmd_train(common: &Common, train_path: &Path) -> Result<Vec<String>> {
    let s = settings(common)?;
    let videos = load(train_path)?;
    let outcome = train(&videos, &s.train)?;
    let out = &common.out;
    let final_stage = if s.train.joint { 0 } else { 2 };
    checkpoint::save(&out.join("stage1.ckpt"), &outcome.stage1, if s.train.joint { 0 } else { 1 }, None)?;
    checkpoint::save(&out.join("model.ckpt"), &outcome.model, final_stage, Some(s.train.beta))?;
    write(out, "train_log.csv", log_csv(&outcome.log))?;
    write(out, "train_log.jsonl", jsonl(&outcome.log))?;
    write(out, "settings.cfg", s.canonical())?;
    if common.svg {
        let series = |stage: u8, name: &str| Series {
            name: name.into(),
            points: outcome
                .log
                .iter()
                .filter(|l| l.stage == stage)
                .map(|l| (l.epoch as f64, l.loss))
                .collect(),
        };
        let chart = svg::line_chart(
            "Training loss",
            "epoch",
            "mean loss",
            &[series(1, "classifiers"), series(2, "gates"), series(0, "joint")],
        );
        write(out, "train_log.svg", chart)?;
    }
    Ok(outcome.log.iter().map(|l| l.csv_line()).collect())
}

fn cmd_train_gates(common: &Common, train_path: &Path, ckpt: &Path) -> Result<Vec<String>> {
    let s = settings(common)?;
    let (stage1, _) = load_model(ckpt, &s)?;
    let videos = load(train_path)?;
    let set = PreparedSet::new(&videos, &s.train)?;
    let (model, log) = train_gates(&stage1, &set, &s.train, s.train.beta)?;
    let out = &common.out;
    checkpoint::save(&out.join("model.ckpt"), &model, 2, Some(s.train.beta))?;
    write(out, "gate_log.csv", log_csv(&log))?;
    write(out, "gate_log.jsonl", jsonl(&log))?;
    write(out, "settings.cfg", s.canonical())?;
    Ok(log.iter().map(|l| l.csv_line()).collect())
}

#[derive(Serialize)]
struct BucketRecord {
    timestep: usize,
    count: usize,
    share: f64,
    accuracy: Option<f64>,
}

fn cmd_eval(common: &Common, ckpt: &Path, data: &Path) -> Result<Vec<String>> {
    let s = settings(common)?;
    let (model, _) = load_model(ckpt, &s)?;
    let videos = load(data)?;
    let ev = evaluate(&model, &videos, &s)?;
    let r = &ev.report;
    let out = &common.out;
    write(out, "report.csv", format!("{}\n{}\n", exitcascade::EvalReport::CSV_HEADER, r.csv_row()))?;
    write(out, "report.json", serde_json::to_string_pretty(r)? + "\n")?;
    write(out, "traces.jsonl", jsonl(&ev.traces))?;
    let mut hist = String::from("timestep,count,share,accuracy\n");
    for b in &r.exit_histogram {
        let acc = b.accuracy.map_or("NaN".to_string(), |a| a.to_string());
        hist.push_str(&format!("{},{},{},{}\n", b.timestep, b.count, b.share, acc));
    }
    write(out, "histogram.csv", hist)?;
    write(
        out,
        "histogram.jsonl",
        jsonl(r.exit_histogram.iter().map(|b| BucketRecord {
            timestep: b.timestep,
            count: b.count,
            share: b.share,
            accuracy: b.accuracy,
        })),
    )?;
    if common.svg {
        let bubbles: Vec<(f64, f64, f64)> = r
            .exit_histogram
            .iter()
            .filter_map(|b| b.accuracy.map(|a| (b.timestep as f64, a, b.share)))
            .collect();
        write(
            out,
            "histogram.svg",
            svg::bubble_chart("Exit timesteps (area = share)", "exit timestep", "accuracy", &bubbles),
        )?;
    }
    Ok(vec![exitcascade::EvalReport::CSV_HEADER.into(), r.csv_row()])
}

#[derive(Serialize)]
struct SweepRecord {
    beta: f64,
    metric: String,
    value: f64,
    mean_flops: f64,
    mean_exit_timestep: f64,
    positive_rate: Vec<f64>,
    fingerprint: String,
}

fn cmd_sweep(common: &Common, ckpt: &Path, train_path: &Path, test_path: &Path) -> Result<Vec<String>> {
    let s = settings(common)?;
    let (stage1, _) = load_model(ckpt, &s)?;
    let train_videos = load(train_path)?;
    let test = load(test_path)?;
    let set = PreparedSet::new(&train_videos, &s.train)?;
    let points = sweep_beta(&stage1, &set, &test, &s, &s.sweep_betas)?;
    let out = &common.out;
    let gates_dir = out.join("gates");
    fs::create_dir_all(&gates_dir).with_context(|| format!("creating {}", gates_dir.display()))?;

    let mut csv = format!("{}\n", exitcascade::eval::SweepPoint::CSV_HEADER);
    let mut rates = String::from("beta");
    for t in 1..=stage1.timesteps() {
        rates.push_str(&format!(",t{t}"));
    }
    rates.push('\n');
    let mut records = Vec::new();
    for p in &points {
        csv.push_str(&p.csv_row());
        csv.push('\n');
        rates.push_str(&p.beta.to_string());
        for r in &p.positive_rate {
            rates.push_str(&format!(",{r}"));
        }
        rates.push('\n');
        checkpoint::save(&gates_dir.join(format!("beta-{}.ckpt", p.beta)), &p.model, 2, Some(p.beta))?;
        records.push(SweepRecord {
            beta: p.beta,
            metric: p.report.metric.name.clone(),
            value: p.report.metric.value,
            mean_flops: p.report.mean_flops,
            mean_exit_timestep: p.report.mean_exit_timestep,
            positive_rate: p.positive_rate.clone(),
            fingerprint: p.report.fingerprint.clone(),
        });
    }
    write(out, "sweep.csv", &csv)?;
    write(out, "positive_rate.csv", rates)?;
    write(out, "sweep.jsonl", jsonl(&records))?;
    if common.svg {
        let curve = Series {
            name: "adaptive".into(),
            points: points
                .iter()
                .map(|p| (p.report.mean_flops / 1e9, p.report.metric.value))
                .collect(),
        };
        write(out, "sweep.svg", svg::line_chart("Accuracy vs cost", "GFLOPs per video", "metric", &[curve]))?;
    }
    Ok(csv.lines().map(String::from).collect())
}

#[derive(Serialize)]
struct CellRecord {
    exit: usize,
    classifier: usize,
    cohort: usize,
    accuracy: Option<f64>,
}

fn cmd_exit_matrix(common: &Common, ckpt: &Path, data: &Path) -> Result<Vec<String>> {
    let s = settings(common)?;
    let (model, _) = load_model(ckpt, &s)?;
    let videos = load(data)?;
    let m = exit_matrix(&model, &videos, &s)?;
    let csv = m.to_csv();
    let out = &common.out;
    write(out, "exit_matrix.csv", &csv)?;
    let t = m.cohort_sizes.len();
    let cells = (1..=t).flat_map(|i| {
        let m = &m;
        (1..=t).map(move |j| CellRecord {
            exit: i,
            classifier: j,
            cohort: m.cohort_sizes[i - 1],
            accuracy: m.get(i, j),
        })
    });
    write(out, "exit_matrix.jsonl", jsonl(cells))?;
    Ok(csv.lines().map(String::from).collect())
}

fn cmd_compare(common: &Common, ckpts: &[PathBuf], data: &Path) -> Result<Vec<String>> {
    let s = settings(common)?;
    let videos = load(data)?;
    let mut models = Vec::with_capacity(ckpts.len());
    for path in ckpts {
        let (model, meta) = load_model(path, &s)?;
        models.push((meta.beta.unwrap_or(s.train.beta), model));
    }
    let points: Vec<(f64, &CascadeModel)> = models.iter().map(|(b, m)| (*b, m)).collect();
    let rows = compare_fixed_vs_adaptive(&points, &videos, &s)?;
    let budgets: Vec<usize> = (1..=models[0].1.timesteps()).collect();
    let curve = fixed_budget_curve(&models[0].1, &videos, &s, &budgets)?;

    let out = &common.out;
    let mut csv = format!("{}\n", exitcascade::eval::ComparisonRow::CSV_HEADER);
    for r in &rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write(out, "compare.csv", &csv)?;
    write(out, "compare.jsonl", jsonl(&rows))?;
    let mut fixed = String::from("budget,mean_frames,mean_flops,metric,value\n");
    for p in &curve {
        fixed.push_str(&format!(
            "{},{},{},{},{}\n",
            p.budget, p.mean_frames, p.mean_flops, p.metric.name, p.metric.value
        ));
    }
    write(out, "fixed_budget.csv", fixed)?;
    write(out, "fixed_budget.jsonl", jsonl(&curve))?;
    if common.svg {
        let adaptive = Series {
            name: "adaptive".into(),
            points: rows.iter().map(|r| (r.adaptive_frames, r.adaptive_metric)).collect(),
        };
        let fixed = Series {
            name: "fixed budget".into(),
            points: curve.iter().map(|p| (p.mean_frames, p.metric.value)).collect(),
        };
        write(
            out,
            "compare.svg",
            svg::line_chart("Adaptive vs fixed exiting", "mean frames", "metric", &[adaptive, fixed]),
        )?;
    }
    Ok(csv.lines().map(String::from).collect())
}

/// Entry point shared by the binary: prints results or the error line.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(lines) => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            for l in lines {
                let _ = writeln!(lock, "{l}");
            }
            0
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}
