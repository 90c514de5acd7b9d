//! Binary-classification metrics, timing capture and report rendering.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;

pub const REPORT_SCHEMA: &str = "t2d-report/1";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Recall of the positive class, if any positives exist.
    pub fn recall(&self) -> Option<f64> {
        let p = self.tp + self.fn_;
        (p > 0).then(|| self.tp as f64 / p as f64)
    }

    /// Recall of the negative class.
    pub fn specificity(&self) -> Option<f64> {
        let n = self.tn + self.fp;
        (n > 0).then(|| self.tn as f64 / n as f64)
    }
}

impl std::ops::Add for ConfusionMatrix {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch { expected: a, found: b });
    }
    Ok(())
}

/// 2x2 cross-tabulation with 1 as the positive class.
pub fn confusion(predictions: &[u8], labels: &[u8]) -> Result<ConfusionMatrix> {
    check_lengths(labels.len(), predictions.len())?;
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut c = ConfusionMatrix::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p == 1, l == 1) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// `(TP + TN) / (TP + TN + FP + FN)`.
pub fn accuracy(c: &ConfusionMatrix) -> Result<f64> {
    match c.total() {
        0 => Err(Error::EmptyDataset),
        n => Ok((c.tp + c.tn) as f64 / n as f64),
    }
}

/// The "AUC" ratio `TP / (TP + FP)`, which is precision. Undefined when
/// nothing was predicted positive.
pub fn paper_auc(c: &ConfusionMatrix) -> Option<f64> {
    let denom = c.tp + c.fp;
    (denom > 0).then(|| c.tp as f64 / denom as f64)
}

/// Area under the ROC curve in Mann-Whitney form: the probability that a
/// random positive outscores a random negative, ties counting one half.
/// Computed from average ranks; `None` when either class is absent.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    check_lengths(labels.len(), scores.len())?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start+1..=end share their mean
        let mean_rank = (start + 1 + end) as f64 / 2.0;
        let positives = order[start..end].iter().filter(|&&i| labels[i] == 1).count();
        rank_sum += mean_rank * positives as f64;
        start = end;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(Some(u / (n_pos as f64 * n_neg as f64)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub phase: String,
    pub millis: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub epochs_elapsed: usize,
    pub phases: Vec<PhaseTiming>,
}

impl TimingReport {
    pub fn total_millis(&self) -> f64 {
        self.phases.iter().map(|p| p.millis).sum()
    }

    pub fn millis(&self, phase: &str) -> Option<f64> {
        self.phases.iter().find(|p| p.phase == phase).map(|p| p.millis)
    }
}

/// Runs `block` and measures it on the monotonic clock.
pub fn capture_timing<T>(phase: &str, block: impl FnOnce() -> T) -> (T, PhaseTiming) {
    let start = Instant::now();
    let out = block();
    let millis = start.elapsed().as_secs_f64() * 1e3;
    (
        out,
        PhaseTiming {
            phase: phase.to_string(),
            millis,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n_samples: usize,
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub paper_auc: Option<f64>,
    pub roc_auc: Option<f64>,
}

impl Metrics {
    pub fn evaluate(scores: &[f64], predictions: &[u8], labels: &[u8]) -> Result<Self> {
        let confusion = confusion(predictions, labels)?;
        Ok(Self {
            n_samples: labels.len(),
            confusion,
            accuracy: accuracy(&confusion)?,
            paper_auc: paper_auc(&confusion),
            roc_auc: roc_auc(scores, labels)?,
        })
    }

    /// Unweighted mean of per-fold metrics. Confusion counts are pooled;
    /// optional metrics average over the folds where they are defined.
    pub fn aggregate(folds: &[Metrics]) -> Result<Self> {
        if folds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let k = folds.len() as f64;
        let mean_defined = |get: fn(&Metrics) -> Option<f64>| {
            let vals: Vec<f64> = folds.iter().filter_map(get).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        Ok(Self {
            n_samples: folds.iter().map(|m| m.n_samples).sum(),
            confusion: folds.iter().fold(ConfusionMatrix::default(), |a, m| a + m.confusion),
            accuracy: folds.iter().map(|m| m.accuracy).sum::<f64>() / k,
            paper_auc: mean_defined(|m| m.paper_auc),
            roc_auc: mean_defined(|m| m.roc_auc),
        })
    }
}

/// One line of a report: a split stage, a fold, or the aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub stage: String,
    pub metrics: Metrics,
    pub epochs: Option<usize>,
    pub elapsed_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema: String,
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub config: PipelineConfig,
    pub rows: Vec<ReportRow>,
    /// Literal sum of the kernel objective and the mean ensemble output.
    pub literal_fused_objective: Option<f64>,
    pub timing: TimingReport,
}

impl EvaluationReport {
    pub fn new(command: &str, config: PipelineConfig) -> Self {
        Self {
            schema: REPORT_SCHEMA.to_string(),
            tool_version: crate::VERSION.to_string(),
            command: command.to_string(),
            seed: config.seed,
            config,
            rows: Vec::new(),
            literal_fused_objective: None,
            timing: TimingReport::default(),
        }
    }

    pub fn row(&self, stage: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.stage == stage)
    }

    /// Drops wall-clock measurements, leaving only reproducible content.
    pub fn without_wall_clock(mut self) -> Self {
        self.timing.phases.clear();
        for row in &mut self.rows {
            row.elapsed_ms = None;
        }
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Table,
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.digits$}"))
}

/// JSON (pretty, struct field order) or an aligned plain-text table with
/// accuracy as a two-decimal percentage.
pub fn render_report(r: &EvaluationReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(r).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Table => render_table(r),
    }
}

fn render_table(r: &EvaluationReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} {} (seed {})", r.command, r.tool_version, r.seed);
    let _ = writeln!(
        out,
        "{:<10} {:>7} {:>9} {:>9} {:>9} {:>11} {:>6}",
        "stage", "samples", "accuracy", "paper_auc", "roc_auc", "time_ms", "epochs"
    );
    for row in &r.rows {
        let m = &row.metrics;
        let _ = writeln!(
            out,
            "{:<10} {:>7} {:>9} {:>9} {:>9} {:>11} {:>6}",
            row.stage,
            m.n_samples,
            format!("{:.2}%", m.accuracy * 100.0),
            opt(m.paper_auc, 4),
            opt(m.roc_auc, 4),
            row.elapsed_ms.map_or_else(|| "-".to_string(), |t| format!("{t:.1}")),
            row.epochs.map_or_else(|| "-".to_string(), |e| e.to_string()),
        );
    }
    if let Some(v) = r.literal_fused_objective {
        let _ = writeln!(out, "literal fused objective: {v:.6}");
    }
    let _ = writeln!(
        out,
        "paper_auc = TP/(TP+FP) (precision); roc_auc = Mann-Whitney area under the ROC curve"
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li == 1 && lj == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        (pairs > 0.0).then(|| wins / pairs)
    }

    #[test]
    fn confusion_examples() {
        let c = confusion(&[1, 0, 1], &[1, 0, 1]).unwrap();
        assert_eq!((c.tp, c.tn, c.fp, c.fn_), (2, 1, 0, 0));
        let c = confusion(&[0, 1, 0], &[1, 0, 1]).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        let c = confusion(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (1, 1, 1, 1));
        assert!(confusion(&[1], &[1, 0]).is_err());
        assert!(confusion(&[], &[]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let c = ConfusionMatrix {
            tp: 50,
            tn: 30,
            fp: 10,
            fn_: 10,
        };
        assert_eq!(accuracy(&c).unwrap(), 0.8);
        let c = ConfusionMatrix {
            tp: 3,
            tn: 4,
            fp: 0,
            fn_: 0,
        };
        assert_eq!(accuracy(&c).unwrap(), 1.0);
        let c = ConfusionMatrix {
            tp: 0,
            tn: 0,
            fp: 2,
            fn_: 5,
        };
        assert_eq!(accuracy(&c).unwrap(), 0.0);
        assert!(accuracy(&ConfusionMatrix::default()).is_err());
    }

    #[test]
    fn paper_auc_examples() {
        let c = ConfusionMatrix {
            tp: 80,
            tn: 0,
            fp: 20,
            fn_: 0,
        };
        assert_eq!(paper_auc(&c), Some(0.8));
        let c = ConfusionMatrix {
            tp: 5,
            tn: 9,
            fp: 0,
            fn_: 2,
        };
        assert_eq!(paper_auc(&c), Some(1.0));
        let c = ConfusionMatrix {
            tp: 0,
            tn: 9,
            fp: 0,
            fn_: 2,
        };
        assert_eq!(paper_auc(&c), None);
    }

    #[test]
    fn roc_auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.1], &[1, 0]).unwrap(), Some(1.0));
        assert_eq!(roc_auc(&[0.8, 0.4, 0.6, 0.2], &[1, 1, 0, 0]).unwrap(), Some(0.75));
        assert_eq!(roc_auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), Some(0.5));
        assert_eq!(roc_auc(&[0.3, 0.4], &[1, 1]).unwrap(), None);
        assert!(roc_auc(&[0.3], &[1, 0]).is_err());
    }

    #[test]
    fn empty_block_timing() {
        let ((), t) = capture_timing("noop", || {});
        assert!(t.millis >= 0.0 && t.millis < 10.0);
        let (_, outer) = capture_timing("outer", || {
            let (_, a) = capture_timing("a", || (0..1000).sum::<u64>());
            let (_, b) = capture_timing("b", || (0..1000).product::<u64>());
            a.millis + b.millis
        });
        assert!(outer.millis >= 0.0);
    }

    fn sample_report() -> EvaluationReport {
        let mut r = EvaluationReport::new("train", PipelineConfig::default());
        let m = Metrics {
            n_samples: 100,
            confusion: ConfusionMatrix {
                tp: 40,
                tn: 46,
                fp: 6,
                fn_: 8,
            },
            accuracy: 0.8631,
            paper_auc: Some(40.0 / 46.0),
            roc_auc: None,
        };
        r.rows.push(ReportRow {
            stage: "test".into(),
            metrics: m,
            epochs: Some(50),
            elapsed_ms: Some(12.5),
        });
        r.literal_fused_objective = Some(123.25);
        r
    }

    #[test]
    fn table_renders_percent_and_undefined() {
        let text = render_report(&sample_report(), ReportFormat::Table);
        assert!(text.contains("86.31%"), "{text}");
        assert!(text.contains("undefined"));
    }

    #[test]
    fn json_round_trip_is_byte_stable() {
        let json = render_report(&sample_report(), ReportFormat::Json);
        let back = EvaluationReport::from_json(&json).unwrap();
        assert_eq!(render_report(&back, ReportFormat::Json), json);
        assert!(json.contains("\"roc_auc\": null"));
    }

    #[test]
    fn aggregate_is_fold_mean() {
        let folds: Vec<Metrics> = [0.7, 0.8, 0.75]
            .iter()
            .map(|&a| Metrics {
                n_samples: 10,
                confusion: ConfusionMatrix {
                    tp: 1,
                    tn: 1,
                    fp: 1,
                    fn_: 1,
                },
                accuracy: a,
                paper_auc: None,
                roc_auc: Some(a),
            })
            .collect();
        let agg = Metrics::aggregate(&folds).unwrap();
        assert!((agg.accuracy - 0.75).abs() < 1e-12);
        assert_eq!(agg.confusion.total(), 12);
        assert_eq!(agg.paper_auc, None);
    }

    proptest! {
        #[test]
        fn accuracy_is_agreement_fraction(pairs in prop::collection::vec((0u8..2, 0u8..2), 1..1000)) {
            let (p, l): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
            let c = confusion(&p, &l).unwrap();
            let agree = p.iter().zip(&l).filter(|(a, b)| a == b).count();
            prop_assert_eq!(accuracy(&c).unwrap(), agree as f64 / p.len() as f64);
            prop_assert_eq!(c.total(), p.len());
        }

        #[test]
        fn roc_auc_matches_pairwise(data in prop::collection::vec((0u8..8, 0u8..2), 2..100)) {
            // coarse scores force ties
            let scores: Vec<f64> = data.iter().map(|(s, _)| f64::from(*s) / 8.0).collect();
            let labels: Vec<u8> = data.iter().map(|(_, l)| *l).collect();
            let fast = roc_auc(&scores, &labels).unwrap();
            let slow = brute_force_auc(&scores, &labels);
            prop_assert_eq!(fast.is_some(), slow.is_some());
            if let (Some(a), Some(b)) = (fast, slow) {
                prop_assert!((a - b).abs() <= 1e-12);
                let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
                let c = roc_auc(&scores, &flipped).unwrap().unwrap();
                prop_assert!((a + c - 1.0).abs() <= 1e-12);
                let cubed: Vec<f64> = scores.iter().map(|s| (3.0 * s - 1.0).powi(3)).collect();
                prop_assert_eq!(roc_auc(&cubed, &labels).unwrap(), fast);
            }
        }
    }
}
