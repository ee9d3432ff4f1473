//! Accuracy-versus-cost reports and the analyses built on them.

mod metrics;

use serde::{Deserialize, Serialize};

pub use metrics::{average_precision, headline, mean_average_precision, top1, MapResult, MetricValue};

use crate::config::{fingerprint, Settings};
use crate::dataset::VideoFeatures;
use crate::engine::{all_classifier_predictions, infer_auto, infer_fixed_budget, is_correct, ExitTrace};
use crate::error::{Error, Result};
use crate::model::CascadeModel;
use crate::trainer::{train_gates, PreparedSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBucket {
    /// 1-based exit timestep.
    pub timestep: usize,
    pub count: usize,
    /// `count` over the number of traces.
    pub share: f64,
    /// Fraction of correct traces in the bucket; `None` when empty.
    pub accuracy: Option<f64>,
}

/// Buckets traces by exit timestep. Always has at least `timesteps` buckets.
pub fn exit_histogram(traces: &[ExitTrace], timesteps: usize) -> Vec<HistogramBucket> {
    let width = traces
        .iter()
        .map(|t| t.exit_timestep)
        .max()
        .unwrap_or(0)
        .max(timesteps);
    let mut counts = vec![0usize; width];
    let mut correct = vec![0usize; width];
    for tr in traces {
        counts[tr.exit_timestep - 1] += 1;
        correct[tr.exit_timestep - 1] += usize::from(tr.correct);
    }
    let total = traces.len().max(1) as f64;
    (0..width)
        .map(|i| HistogramBucket {
            timestep: i + 1,
            count: counts[i],
            share: counts[i] as f64 / total,
            accuracy: (counts[i] > 0).then(|| correct[i] as f64 / counts[i] as f64),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: MetricValue,
    pub n_videos: usize,
    pub mean_flops: f64,
    /// Equals the mean number of frames read per video.
    pub mean_exit_timestep: f64,
    pub exit_histogram: Vec<HistogramBucket>,
    /// Hash of settings, model parameters and data.
    pub fingerprint: String,
}

impl EvalReport {
    pub fn from_traces(
        traces: &[ExitTrace],
        settings: &Settings,
        timesteps: usize,
        fingerprint: String,
    ) -> Result<Self> {
        if traces.is_empty() {
            return Err(Error::InvalidArgument("cannot report on an empty dataset".into()));
        }
        let n = traces.len() as f64;
        Ok(EvalReport {
            metric: headline(traces, settings.metric)?,
            n_videos: traces.len(),
            mean_flops: traces.iter().map(|t| t.flops).sum::<f64>() / n,
            mean_exit_timestep: traces.iter().map(|t| t.exit_timestep as f64).sum::<f64>() / n,
            exit_histogram: exit_histogram(traces, timesteps),
            fingerprint,
        })
    }

    pub const CSV_HEADER: &'static str =
        "metric,value,n_videos,mean_flops,mean_exit_timestep,fingerprint";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.metric.name,
            self.metric.value,
            self.n_videos,
            self.mean_flops,
            self.mean_exit_timestep,
            self.fingerprint
        )
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub traces: Vec<ExitTrace>,
    pub report: EvalReport,
}

/// Gated inference over every video, in order.
pub fn evaluate(model: &CascadeModel, videos: &[VideoFeatures], settings: &Settings) -> Result<Evaluation> {
    let traces = videos
        .iter()
        .map(|v| infer_auto(model, v, &settings.engine))
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport::from_traces(
        &traces,
        settings,
        model.timesteps(),
        fingerprint(settings, model, videos),
    )?;
    Ok(Evaluation { traces, report })
}

/// Accuracy of every classifier on every exit cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitMatrix {
    /// Videos that exited at each timestep.
    pub cohort_sizes: Vec<usize>,
    /// `accuracy[i][j]`: accuracy of classifier `j + 1` on the videos that
    /// exited at timestep `i + 1`. `None` marks an empty cell.
    pub accuracy: Vec<Vec<Option<f64>>>,
}

impl ExitMatrix {
    pub fn get(&self, exit: usize, classifier: usize) -> Option<f64> {
        self.accuracy[exit - 1][classifier - 1]
    }

    /// Rows are exit timesteps, columns classifiers; empty cells are `NaN`.
    pub fn to_csv(&self) -> String {
        let t = self.cohort_sizes.len();
        let mut out = String::from("exit,cohort");
        for j in 1..=t {
            out.push_str(&format!(",clf{j}"));
        }
        out.push('\n');
        for (i, row) in self.accuracy.iter().enumerate() {
            out.push_str(&format!("{},{}", i + 1, self.cohort_sizes[i]));
            for cell in row {
                match cell {
                    Some(a) => out.push_str(&format!(",{a}")),
                    None => out.push_str(",NaN"),
                }
            }
            out.push('\n');
        }
        out
    }
}

pub fn exit_matrix(model: &CascadeModel, videos: &[VideoFeatures], settings: &Settings) -> Result<ExitMatrix> {
    let t = model.timesteps();
    let mut cohort_sizes = vec![0usize; t];
    let mut hits = vec![vec![0usize; t]; t];
    let mut seen = vec![vec![0usize; t]; t];
    for v in videos {
        let exit = infer_auto(model, v, &settings.engine)?.exit_timestep;
        cohort_sizes[exit - 1] += 1;
        let preds = all_classifier_predictions(model, v, &settings.engine)?;
        for (j, p) in preds.iter().enumerate() {
            seen[exit - 1][j] += 1;
            hits[exit - 1][j] += usize::from(is_correct(p, &v.label));
        }
    }
    let accuracy = (0..t)
        .map(|i| {
            (0..t)
                .map(|j| (seen[i][j] > 0).then(|| hits[i][j] as f64 / seen[i][j] as f64))
                .collect()
        })
        .collect();
    Ok(ExitMatrix {
        cohort_sizes,
        accuracy,
    })
}

/// One point of a trade-off sweep.
#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub beta: f64,
    pub model: CascadeModel,
    /// Fraction of positive pseudo-labels per timestep in the last gate
    /// training epoch.
    pub positive_rate: Vec<f64>,
    pub report: EvalReport,
}

impl SweepPoint {
    pub const CSV_HEADER: &'static str = "beta,metric,value,mean_flops,mean_exit_timestep";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.beta,
            self.report.metric.name,
            self.report.metric.value,
            self.report.mean_flops,
            self.report.mean_exit_timestep
        )
    }
}

/// Retrains the gates of one shared stage-1 model for every `beta` and
/// evaluates each result on `test`.
pub fn sweep_beta(
    stage1: &CascadeModel,
    train: &PreparedSet<'_>,
    test: &[VideoFeatures],
    settings: &Settings,
    betas: &[f64],
) -> Result<Vec<SweepPoint>> {
    if betas.is_empty() {
        return Err(Error::InvalidArgument("empty beta list".into()));
    }
    let mut points = Vec::with_capacity(betas.len());
    for &beta in betas {
        let (model, log) = train_gates(stage1, train, &settings.train, beta)?;
        let positive_rate = log.last().map(|l| l.positive_rate.clone()).unwrap_or_default();
        let mut local = settings.clone();
        local.train.beta = beta;
        let report = evaluate(&model, test, &local)?.report;
        points.push(SweepPoint {
            beta,
            model,
            positive_rate,
            report,
        });
    }
    Ok(points)
}

/// Metric and mean frames of gate-free runs at each budget. Videos shorter
/// than a budget use all of their frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetPoint {
    pub budget: usize,
    pub mean_frames: f64,
    pub mean_flops: f64,
    pub metric: MetricValue,
}

pub fn fixed_budget_curve(
    model: &CascadeModel,
    videos: &[VideoFeatures],
    settings: &Settings,
    budgets: &[usize],
) -> Result<Vec<BudgetPoint>> {
    budgets
        .iter()
        .map(|&k| {
            let traces = videos
                .iter()
                .map(|v| {
                    let steps = model.timesteps().min(v.n_frames());
                    infer_fixed_budget(model, v, k.min(steps), &settings.engine)
                })
                .collect::<Result<Vec<_>>>()?;
            if traces.is_empty() {
                return Err(Error::InvalidArgument("fixed budget on an empty dataset".into()));
            }
            let n = traces.len() as f64;
            Ok(BudgetPoint {
                budget: k,
                mean_frames: traces.iter().map(|t| t.exit_timestep as f64).sum::<f64>() / n,
                mean_flops: traces.iter().map(|t| t.flops).sum::<f64>() / n,
                metric: headline(&traces, settings.metric)?,
            })
        })
        .collect()
}

/// An adaptive run and the fixed budget matched to its mean frame count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub beta: f64,
    pub adaptive_frames: f64,
    pub adaptive_metric: f64,
    pub fixed_budget: usize,
    pub fixed_frames: f64,
    pub fixed_metric: f64,
}

impl ComparisonRow {
    pub const CSV_HEADER: &'static str =
        "beta,adaptive_frames,adaptive_metric,fixed_budget,fixed_frames,fixed_metric";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.beta,
            self.adaptive_frames,
            self.adaptive_metric,
            self.fixed_budget,
            self.fixed_frames,
            self.fixed_metric
        )
    }
}

/// For each gated model, pairs its adaptive result with the same model's
/// classifiers run at `k = round(mean frames)` without gates.
pub fn compare_fixed_vs_adaptive(
    points: &[(f64, &CascadeModel)],
    videos: &[VideoFeatures],
    settings: &Settings,
) -> Result<Vec<ComparisonRow>> {
    points
        .iter()
        .map(|&(beta, model)| {
            let adaptive = evaluate(model, videos, settings)?.report;
            let k = (adaptive.mean_exit_timestep.round() as usize).clamp(1, model.timesteps());
            let fixed = fixed_budget_curve(model, videos, settings, &[k])?.remove(0);
            Ok(ComparisonRow {
                beta,
                adaptive_frames: adaptive.mean_exit_timestep,
                adaptive_metric: adaptive.metric.value,
                fixed_budget: k,
                fixed_frames: fixed.mean_frames,
                fixed_metric: fixed.metric.value,
            })
        })
        .collect()
}
