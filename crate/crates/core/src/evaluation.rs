//! Metrics, sweep drivers, attention export, and the latency benchmark.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::DataConfig;
use crate::data::{AnnotationRecord, SplitSpec};
use crate::model::{
    EncoderSwitches, Model, ModelConfig, ModelError, ModelInputs, PositionFeatureSwitches,
};
use crate::tensor::Tensor;
use crate::training::{
    batch_inputs, build_dataset, evaluate_split, train, FeaturizedWindow, TrainConfig, TrainError,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    Empty,
    #[error("{scores} scores for {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("labels must be 0 or 1, got {0}")]
    BadLabel(usize),
    #[error("latency benchmark needs n >= 1, got {0}")]
    BadSampleCount(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Degenerate-denominator markers: a metric whose denominator was zero is
/// reported as 0.0 with its flag set rather than NaN.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricFlags {
    pub auc_undefined: bool,
    pub precision_zero_denominator: bool,
    pub recall_zero_denominator: bool,
    pub f1_zero_denominator: bool,
}

impl MetricFlags {
    pub fn any(&self) -> bool {
        self.auc_undefined
            || self.precision_zero_denominator
            || self.recall_zero_denominator
            || self.f1_zero_denominator
    }

    fn tokens(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.auc_undefined {
            out.push("auc_undefined");
        }
        if self.precision_zero_denominator {
            out.push("precision_zero_den");
        }
        if self.recall_zero_denominator {
            out.push("recall_zero_den");
        }
        if self.f1_zero_denominator {
            out.push("f1_zero_den");
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Sweep coordinate this report belongs to (time-to-event bound,
    /// observation length, feature subset, ...).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_key: Option<String>,
    pub n: usize,
    pub accuracy: f64,
    pub auc: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub flags: MetricFlags,
}

impl MetricsReport {
    fn empty(key: Option<String>) -> Self {
        MetricsReport {
            sweep_key: key,
            n: 0,
            accuracy: 0.0,
            auc: 0.0,
            f1: 0.0,
            precision: 0.0,
            recall: 0.0,
            tp: 0,
            fp: 0,
            tn: 0,
            fn_: 0,
            flags: MetricFlags {
                auc_undefined: true,
                precision_zero_denominator: true,
                recall_zero_denominator: true,
                f1_zero_denominator: true,
            },
        }
    }
}

/// Classification threshold: scores strictly above 0.5 predict crossing.
pub const DECISION_THRESHOLD: f64 = 0.5;

/// Accuracy, AUC, F1, precision, and recall of crossing-probability scores
/// against 0/1 labels.
///
/// Thresholded metrics use [`DECISION_THRESHOLD`]; AUC is the Mann-Whitney
/// rank statistic with tied scores contributing one half. Single-class label
/// sets leave AUC undefined (flagged, reported as 0).
pub fn compute_metrics(scores: &[f64], labels: &[usize]) -> Result<MetricsReport> {
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(EvalError::BadLabel(bad));
    }

    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s > DECISION_THRESHOLD, l) {
            (true, 1) => tp += 1,
            (true, 0) => fp += 1,
            (false, 0) => tn += 1,
            _ => fn_ += 1,
        }
    }
    let n = scores.len();
    let mut flags = MetricFlags::default();
    let accuracy = (tp + tn) as f64 / n as f64;
    let precision = if tp + fp == 0 {
        flags.precision_zero_denominator = true;
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        flags.recall_zero_denominator = true;
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        flags.f1_zero_denominator = true;
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };

    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = n - positives;
    let auc = if positives == 0 || negatives == 0 {
        flags.auc_undefined = true;
        0.0
    } else {
        mann_whitney_auc(scores, labels, positives, negatives)
    };

    Ok(MetricsReport {
        sweep_key: None,
        n,
        accuracy,
        auc,
        f1,
        precision,
        recall,
        tp,
        fp,
        tn,
        fn_,
        flags,
    })
}

/// Rank-statistic AUC: average ranks over tie groups, then
/// `(sum of positive ranks - P(P+1)/2) / (P * N)`.
fn mann_whitney_auc(scores: &[f64], labels: &[usize], positives: usize, negatives: usize) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share the average
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(&r, _)| r)
        .sum();
    let p = positives as f64;
    (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64)
}

/// Crossing scores for a window list, batched through eval-mode forwards.
pub fn score_windows(
    model: &Model,
    windows: &[FeaturizedWindow],
    batch_size: usize,
) -> std::result::Result<(Vec<f64>, Vec<usize>), TrainError> {
    let mut scores = Vec::with_capacity(windows.len());
    let mut labels = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(batch_size.max(1)) {
        let batch: Vec<&FeaturizedWindow> = chunk.iter().collect();
        let (inputs, batch_labels) = batch_inputs(&batch, &model.config)?;
        let prediction = model.predict(&inputs)?;
        scores.extend(prediction.crossing_scores());
        labels.extend(batch_labels);
    }
    Ok((scores, labels))
}

/// Re-sample evaluation windows at each time-to-event point (an exact
/// `[point, point]` filter) and score them with a trained model. Points are
/// evaluated in ascending order; a point with no windows produces a flagged
/// empty report instead of failing.
pub fn sweep_tte(
    model: &Model,
    records: &[AnnotationRecord],
    split: &SplitSpec,
    data_cfg: &DataConfig,
    points: &[i64],
    part: &str,
) -> std::result::Result<Vec<MetricsReport>, TrainError> {
    let mut sorted: Vec<i64> = points.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut out = Vec::with_capacity(sorted.len());
    for point in sorted {
        let mut cfg = data_cfg.clone();
        cfg.tte = (point, point);
        cfg.balance = false;
        let dataset = build_dataset(records, split.clone(), &model.config, &cfg)?;
        let windows = dataset
            .part(part)
            .ok_or_else(|| TrainError::Mismatch(format!("unknown split part {part:?}")))?;
        let key = Some(format!("tte={point}"));
        if windows.is_empty() {
            out.push(MetricsReport {
                sweep_key: key,
                ..MetricsReport::empty(None)
            });
            continue;
        }
        let (scores, labels) = score_windows(model, windows, 256)?;
        let mut report = compute_metrics(&scores, &labels).map_err(TrainError::Eval)?;
        report.sweep_key = key;
        out.push(report);
    }
    Ok(out)
}

/// Retrain per observation length with a shared seed and report test-part
/// metrics for each.
pub fn sweep_observation_length(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    records: &[AnnotationRecord],
    split: &SplitSpec,
    data_cfg: &DataConfig,
    lengths: &[usize],
) -> std::result::Result<Vec<MetricsReport>, TrainError> {
    let mut sorted: Vec<usize> = lengths.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut out = Vec::with_capacity(sorted.len());
    for t in sorted {
        let mut mc = *model_cfg;
        mc.frames = t;
        let report = train_and_score(&mc, train_cfg, records, split, data_cfg)?;
        out.push(MetricsReport {
            sweep_key: Some(format!("obs_len={t}")),
            ..report
        });
    }
    Ok(out)
}

/// One named encoder/feature configuration for an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub name: String,
    pub encoders: EncoderSwitches,
    pub position_features: PositionFeatureSwitches,
}

/// The modality table: each encoder alone, position+ego, and all three.
pub fn modality_suite() -> Vec<AblationSpec> {
    let pf = PositionFeatureSwitches::default();
    let mk = |name: &str, position: bool, ego: bool, skeleton: bool| AblationSpec {
        name: name.into(),
        encoders: EncoderSwitches {
            position,
            ego,
            skeleton,
        },
        position_features: pf,
    };
    vec![
        mk("position", true, false, false),
        mk("ego", false, true, false),
        mk("skeleton", false, false, true),
        mk("position+ego", true, true, false),
        mk("all", true, true, true),
    ]
}

/// The position-feature table: displacement only, +velocity, +decoupled
/// coordinates, +area ratio (the full set).
pub fn position_feature_suite() -> Vec<AblationSpec> {
    let mk = |name: &str, velocity: bool, pdm_coords: bool, pdm_ratio: bool| AblationSpec {
        name: name.into(),
        encoders: EncoderSwitches::default(),
        position_features: PositionFeatureSwitches {
            displacement: true,
            velocity,
            pdm_coords,
            pdm_ratio,
        },
    };
    vec![
        mk("d", false, false, false),
        mk("d+v", true, false, false),
        mk("d+v+pc", true, true, false),
        mk("d+v+pc+pr", true, true, true),
    ]
}

/// Retrain once per ablation spec (shared seed) and report test metrics.
pub fn ablate_features(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    records: &[AnnotationRecord],
    split: &SplitSpec,
    data_cfg: &DataConfig,
    specs: &[AblationSpec],
) -> std::result::Result<Vec<MetricsReport>, TrainError> {
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut mc = *model_cfg;
        mc.encoders = spec.encoders;
        mc.position_features = spec.position_features;
        mc.validate()?;
        let report = train_and_score(&mc, train_cfg, records, split, data_cfg)?;
        out.push(MetricsReport {
            sweep_key: Some(spec.name.clone()),
            ..report
        });
    }
    Ok(out)
}

fn train_and_score(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    records: &[AnnotationRecord],
    split: &SplitSpec,
    data_cfg: &DataConfig,
) -> std::result::Result<MetricsReport, TrainError> {
    let dataset = build_dataset(records, split.clone(), model_cfg, data_cfg)?;
    let outcome = train(model_cfg, train_cfg, &dataset, None)?;
    let checkpoint = match train_cfg.selection {
        crate::training::CheckpointSelection::BestValLoss => &outcome.best,
        crate::training::CheckpointSelection::Final => &outcome.finished,
    };
    let model = checkpoint.to_model()?;
    let (_, metrics) = evaluate_split(&model, &dataset.test, train_cfg.batch_size)?;
    Ok(metrics)
}

/// Head- and batch-averaged attention map per layer, each `frames x frames`
/// and row-stochastic.
pub fn export_attention(model: &Model, inputs: &ModelInputs) -> Result<Vec<Tensor>> {
    let (_, maps) = model.predict_with_attention(inputs, true)?;
    let maps = maps.expect("attention capture requested");
    let t = model.config.frames;
    let mut out = Vec::with_capacity(maps.len());
    for layer in maps {
        let lead = layer.len() / (t * t);
        let mut avg = Tensor::zeros(vec![t, t]);
        for map in layer.data().chunks(t * t) {
            for (o, &v) in avg.data_mut().iter_mut().zip(map) {
                *o += v;
            }
        }
        for v in avg.data_mut() {
            *v /= lead as f64;
        }
        out.push(avg);
    }
    Ok(out)
}

/// Write a 2-D tensor as a plain numeric grid, one row per line.
pub fn write_grid(path: &Path, grid: &Tensor) -> Result<()> {
    let cols = grid.last_dim();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in grid.data().chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.12e}")).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub runs: usize,
    pub warmup: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub mean_ms: f64,
    pub param_count: usize,
    pub hardware: String,
    /// Published single-GPU reference measurement for this architecture;
    /// informational only, not a target for CPU runs.
    pub gpu_reference_ms: f64,
}

/// Median/p95 latency of single-sequence eval-mode forwards after warmup.
pub fn benchmark_latency(model: &Model, inputs: &ModelInputs, runs: usize) -> Result<LatencyReport> {
    if runs < 1 {
        return Err(EvalError::BadSampleCount(runs));
    }
    let warmup = 10.min(runs);
    for _ in 0..warmup {
        model.predict(inputs)?;
    }
    let mut times_ms = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        model.predict(inputs)?;
        times_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mut sorted = times_ms.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    let median_ms = sorted[sorted.len() / 2];
    let p95_ms = sorted[((sorted.len() as f64 * 0.95) as usize).min(sorted.len() - 1)];
    let mean_ms = times_ms.iter().sum::<f64>() / runs as f64;
    Ok(LatencyReport {
        runs,
        warmup,
        median_ms,
        p95_ms,
        mean_ms,
        param_count: model.param_count(),
        hardware: cpu_model_name(),
        gpu_reference_ms: 0.05,
    })
}

fn cpu_model_name() -> String {
    std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|text| {
            text.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|s| s.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into())
}

/// Write sweep reports as a delimited table, one row per sweep point.
pub fn write_reports_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "key,n,accuracy,auc,f1,precision,recall,tp,fp,tn,fn,flags"
    )?;
    for r in reports {
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{}",
            r.sweep_key.as_deref().unwrap_or(""),
            r.n,
            r.accuracy,
            r.auc,
            r.f1,
            r.precision,
            r.recall,
            r.tp,
            r.fp,
            r.tn,
            r.fn_,
            r.flags.tokens().join(";"),
        )?;
    }
    Ok(())
}

/// Distinct pedestrian count per part, used by run manifests.
pub fn split_summary(split: &SplitSpec) -> String {
    let sizes: Vec<usize> = [&split.train, &split.val, &split.test]
        .iter()
        .map(|part| part.iter().collect::<BTreeSet<_>>().len())
        .collect();
    format!("train={} val={} test={}", sizes[0], sizes[1], sizes[2])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_ranking() {
        let r = compute_metrics(&[0.2, 0.8], &[0, 1]).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.auc, 1.0);
        assert_eq!(r.f1, 1.0);
        assert!(!r.flags.any());
    }

    #[test]
    fn half_auc_hand_case() {
        // positives 0.4, 0.35 vs negatives 0.1, 0.8: 2 of 4 ordered pairs correct
        let r = compute_metrics(&[0.1, 0.4, 0.35, 0.8], &[0, 1, 1, 0]).unwrap();
        assert_eq!(r.auc, 0.5);
    }

    #[test]
    fn precision_recall_f1_hand_case() {
        // tp=2, fp=1, fn=1, tn=1
        let scores = [0.9, 0.8, 0.7, 0.2, 0.1];
        let labels = [1, 1, 0, 1, 0];
        let r = compute_metrics(&scores, &labels).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_, r.tn), (2, 1, 1, 1));
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_cases_flagged_as_zero() {
        // all-negative predictions on all-positive labels
        let r = compute_metrics(&[0.1, 0.2], &[1, 1]).unwrap();
        assert_eq!(r.precision, 0.0);
        assert!(r.flags.precision_zero_denominator);
        assert!(r.flags.auc_undefined);
        assert_eq!(r.f1, 0.0);

        assert!(matches!(compute_metrics(&[], &[]), Err(EvalError::Empty)));
        assert!(matches!(
            compute_metrics(&[0.5], &[2]),
            Err(EvalError::BadLabel(2))
        ));
        assert!(matches!(
            compute_metrics(&[0.5, 0.5], &[1]),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn ties_contribute_one_half() {
        // one tied positive/negative pair -> auc 0.5
        let r = compute_metrics(&[0.5, 0.5], &[0, 1]).unwrap();
        assert_eq!(r.auc, 0.5);

        // mixed ties
        let r = compute_metrics(&[0.3, 0.3, 0.7, 0.7], &[0, 1, 0, 1]).unwrap();
        assert_eq!(r.auc, 0.5);
    }

    #[test]
    fn monotone_transform_preserves_auc() {
        let scores = [0.05, 0.2, 0.35, 0.5, 0.65, 0.8, 0.95];
        let labels = [0, 1, 0, 1, 1, 0, 1];
        let base = compute_metrics(&scores, &labels).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|s| s.powi(3)).collect();
        let after = compute_metrics(&squashed, &labels).unwrap();
        assert_eq!(base.auc, after.auc);
    }
}
