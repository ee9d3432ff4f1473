use serde::{Deserialize, Serialize};

use crate::config::MetricChoice;
use crate::dataset::LabelSpec;
use crate::engine::ExitTrace;
use crate::error::{Error, Result};
use crate::model::argmax;

/// Fraction of traces whose highest-scoring category is the label. Ties go
/// to the lowest category index.
pub fn top1(traces: &[ExitTrace]) -> Result<f64> {
    if traces.is_empty() {
        return Err(Error::InvalidArgument("top-1 of an empty trace set".into()));
    }
    let mut hits = 0usize;
    for tr in traces {
        let LabelSpec::Single(y) = tr.label else {
            return Err(Error::InvalidArgument(format!(
                "top-1 is undefined for multi-label video `{}`; use mAP",
                tr.video_id
            )));
        };
        hits += usize::from(argmax(&tr.prediction) == y);
    }
    Ok(hits as f64 / traces.len() as f64)
}

/// All-point average precision of one label.
///
/// Items are ranked by descending score; equal scores keep their input
/// order. Returns `None` when there are no positives.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let n_pos = positives.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return None;
    }
    let mut rank: Vec<usize> = (0..scores.len()).collect();
    rank.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &i) in rank.iter().enumerate() {
        if positives[i] {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Some(sum / n_pos as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub map: f64,
    pub per_label: Vec<Option<f64>>,
    /// Labels with no positive video, left out of the mean.
    pub skipped_labels: Vec<usize>,
}

/// Mean over labels of [`average_precision`], using each trace's
/// per-category scores.
pub fn mean_average_precision(traces: &[ExitTrace]) -> Result<MapResult> {
    let Some(first) = traces.first() else {
        return Err(Error::InvalidArgument("mAP of an empty trace set".into()));
    };
    let n_labels = first.prediction.len();
    if let Some(tr) = traces.iter().find(|t| t.prediction.len() != n_labels) {
        return Err(Error::DimensionMismatch {
            context: format!("scores of video `{}`", tr.video_id),
            expected: n_labels,
            actual: tr.prediction.len(),
        });
    }
    let mut per_label = Vec::with_capacity(n_labels);
    let mut skipped_labels = Vec::new();
    for c in 0..n_labels {
        let scores: Vec<f64> = traces.iter().map(|t| t.prediction[c]).collect();
        let positives: Vec<bool> = traces.iter().map(|t| t.label.contains(c)).collect();
        let ap = average_precision(&scores, &positives);
        if ap.is_none() {
            skipped_labels.push(c);
        }
        per_label.push(ap);
    }
    let present: Vec<f64> = per_label.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::InvalidArgument("mAP: no label has a positive video".into()));
    }
    Ok(MapResult {
        map: present.iter().sum::<f64>() / present.len() as f64,
        per_label,
        skipped_labels,
    })
}

/// Headline metric value and its name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub name: String,
    pub value: f64,
    pub skipped_labels: Vec<usize>,
}

pub fn headline(traces: &[ExitTrace], choice: MetricChoice) -> Result<MetricValue> {
    let use_map = match choice {
        MetricChoice::Top1 => false,
        MetricChoice::MeanAveragePrecision => true,
        MetricChoice::Auto => traces.iter().any(|t| t.label.is_multi()),
    };
    if use_map {
        let m = mean_average_precision(traces)?;
        Ok(MetricValue {
            name: "map".into(),
            value: m.map,
            skipped_labels: m.skipped_labels,
        })
    } else {
        Ok(MetricValue {
            name: "top1".into(),
            value: top1(traces)?,
            skipped_labels: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(prediction: Vec<f64>, label: LabelSpec) -> ExitTrace {
        ExitTrace {
            video_id: "v".into(),
            exit_timestep: 1,
            gate_scores: vec![],
            correct: false,
            prediction,
            label,
            flops: 0.0,
            frame_indices_used: vec![1],
        }
    }

    #[test]
    fn top1_counts_and_ties() {
        let traces = vec![
            trace(vec![0.9, 0.1], LabelSpec::Single(0)),
            trace(vec![0.2, 0.8], LabelSpec::Single(1)),
            trace(vec![0.5, 0.5], LabelSpec::Single(0)),
            trace(vec![0.6, 0.4], LabelSpec::Single(1)),
        ];
        assert_eq!(top1(&traces).unwrap(), 0.75);
        assert_eq!(top1(&traces[..3]).unwrap(), 1.0);
        assert_eq!(top1(&traces[3..]).unwrap(), 0.0);
        let multi = vec![trace(vec![0.5], LabelSpec::multi([0]).unwrap())];
        assert!(top1(&multi).is_err());
    }

    #[test]
    fn hand_computed_ap() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[0.3, 0.9], &[true, true]), Some(1.0));
        assert_eq!(average_precision(&[0.3], &[false]), None);
    }

    #[test]
    fn map_skips_labels_without_positives() {
        let traces = vec![
            trace(vec![0.9, 0.1, 0.3], LabelSpec::multi([0]).unwrap()),
            trace(vec![0.2, 0.8, 0.3], LabelSpec::multi([1]).unwrap()),
        ];
        let m = mean_average_precision(&traces).unwrap();
        assert_eq!(m.map, 1.0);
        assert_eq!(m.skipped_labels, vec![2]);
        assert_eq!(headline(&traces, MetricChoice::Auto).unwrap().name, "map");
    }
}
