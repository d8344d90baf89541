//! Confusion-matrix segmentation metrics and multi-run aggregation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

/// Column order of every report table.
pub const METRIC_NAMES: [&str; 6] = ["Dice", "mIoU", "Accuracy", "Precision", "Recall", "Specificity"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }
}

/// Pixel counts of a binary prediction against a binary ground truth.
pub fn confusion<'a, T: Real>(
    pred: impl IntoIterator<Item = &'a T>,
    gt: impl IntoIterator<Item = &'a T>,
) -> Result<ConfusionCounts> {
    let mut c = ConfusionCounts::default();
    let mut pred = pred.into_iter();
    let mut gt = gt.into_iter();
    let binary = |v: T| -> Result<bool> {
        if v == T::one() {
            Ok(true)
        } else if v == T::zero() {
            Ok(false)
        } else {
            Err(Error::contract(format!("non-binary mask value {v}")))
        }
    };
    loop {
        match (pred.next(), gt.next()) {
            (None, None) => return Ok(c),
            (Some(&p), Some(&g)) => match (binary(p)?, binary(g)?) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            },
            _ => return Err(Error::contract("prediction and ground truth differ in size")),
        }
    }
}

/// Binarize probabilities: strictly above the threshold is foreground.
pub fn binarize<T: Real>(p: T, threshold: T) -> T {
    if p > threshold {
        T::one()
    } else {
        T::zero()
    }
}

/// The six reported metrics, as percentages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice: f64,
    pub miou: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
}

impl MetricsReport {
    pub fn values(&self) -> [f64; 6] {
        [self.dice, self.miou, self.accuracy, self.precision, self.recall, self.specificity]
    }

    pub fn from_values(v: [f64; 6]) -> Self {
        MetricsReport { dice: v[0], miou: v[1], accuracy: v[2], precision: v[3], recall: v[4], specificity: v[5] }
    }
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = METRIC_NAMES.iter().zip(self.values()).map(|(n, v)| format!("{n} {v:.3}")).collect();
        f.write_str(&parts.join(", "))
    }
}

/// `num / den`, with 0/0 read as perfect (1) when no errors were made and as 0 otherwise.
fn ratio(num: u64, den: u64, errors: u64) -> f64 {
    if den == 0 {
        if errors == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(c: &ConfusionCounts) -> Result<MetricsReport> {
    let total = c.total();
    if total == 0 {
        return Err(Error::contract("no pixels to evaluate"));
    }
    let ConfusionCounts { tp, fp, tn, fn_ } = *c;
    let iou_fg = ratio(tp, tp + fp + fn_, fp + fn_);
    let iou_bg = ratio(tn, tn + fp + fn_, fp + fn_);
    Ok(MetricsReport {
        dice: 100.0 * ratio(2 * tp, 2 * tp + fp + fn_, fp + fn_),
        miou: 100.0 * (iou_fg + iou_bg) / 2.0,
        accuracy: 100.0 * (tp + tn) as f64 / total as f64,
        precision: 100.0 * ratio(tp, tp + fp, fp),
        recall: 100.0 * ratio(tp, tp + fn_, fn_),
        specificity: 100.0 * ratio(tn, tn + fp, fp),
    })
}

/// Per-metric mean and sample standard deviation over runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: MetricsReport,
    pub std: MetricsReport,
    pub n: usize,
}

pub fn aggregate(reports: &[MetricsReport]) -> Result<Aggregate> {
    if reports.is_empty() {
        return Err(Error::contract("cannot aggregate zero reports"));
    }
    let n = reports.len() as f64;
    let mut mean = [0.0; 6];
    let mut std = [0.0; 6];
    for k in 0..6 {
        mean[k] = reports.iter().map(|r| r.values()[k]).sum::<f64>() / n;
        if reports.len() > 1 {
            let ss: f64 = reports.iter().map(|r| (r.values()[k] - mean[k]).powi(2)).sum();
            std[k] = (ss / (n - 1.0)).sqrt();
        }
    }
    Ok(Aggregate { mean: MetricsReport::from_values(mean), std: MetricsReport::from_values(std), n: reports.len() })
}

/// Published spinal-cord gray-matter results (10-run mean and std).
pub const PUBLISHED_SUPERVISED: ([f64; 6], [f64; 6]) =
    ([67.915, 53.679, 99.745, 57.948, 92.495, 99.775], [0.313, 0.327, 0.005, 0.788, 0.907, 0.010]);
pub const PUBLISHED_SEMI_SUPERVISED: ([f64; 6], [f64; 6]) =
    ([70.209, 55.509, 99.792, 64.732, 86.112, 99.846], [0.229, 0.253, 0.003, 0.773, 0.936, 0.006]);

/// One labelled row of a results table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub aggregate: Aggregate,
}

impl TableRow {
    pub fn published(label: &str, (mean, std): ([f64; 6], [f64; 6])) -> Self {
        TableRow {
            label: label.to_string(),
            aggregate: Aggregate { mean: MetricsReport::from_values(mean), std: MetricsReport::from_values(std), n: 10 },
        }
    }
}

/// CSV with a `mean` and a `std` column per metric.
pub fn table_csv(rows: &[TableRow]) -> String {
    let mut out = String::from("model,runs");
    for m in METRIC_NAMES {
        write!(out, ",{m},{m}_std").unwrap();
    }
    out.push('\n');
    for r in rows {
        write!(out, "{},{}", r.label, r.aggregate.n).unwrap();
        for (m, s) in r.aggregate.mean.values().iter().zip(r.aggregate.std.values()) {
            write!(out, ",{m:.3},{s:.3}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Fixed-width text table with `mean (std)` cells.
pub fn table_text(rows: &[TableRow]) -> String {
    let label_w = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<label_w$}", "");
    for m in METRIC_NAMES {
        write!(out, "  {m:>17}").unwrap();
    }
    out.push('\n');
    for r in rows {
        write!(out, "{:<label_w$}", r.label).unwrap();
        for (m, s) in r.aggregate.mean.values().iter().zip(r.aggregate.std.values()) {
            write!(out, "  {:>17}", format!("{m:.3} ({s:.3})")).unwrap();
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn confusion_enumeration() {
        let c = confusion(&[1.0f32, 1.0, 0.0, 0.0], &[1.0f32, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 1, tn: 1, fn_: 1 });
        let same = confusion(&[1.0f32, 0.0, 1.0], &[1.0f32, 0.0, 1.0]).unwrap();
        assert_eq!((same.fp, same.fn_), (0, 0));
        let zeros = confusion(&[0.0f64; 9], &[0.0f64; 9]).unwrap();
        assert_eq!(zeros.tn, 9);
    }

    #[test]
    fn confusion_rejects_bad_input() {
        assert!(confusion(&[0.5f32], &[1.0f32]).is_err());
        assert!(confusion(&[1.0f32, 0.0], &[1.0f32]).is_err());
    }

    #[test]
    fn metric_formulas() {
        let r = compute_metrics(&ConfusionCounts { tp: 1, fp: 1, tn: 1, fn_: 1 }).unwrap();
        assert_abs_diff_eq!(r.dice, 50.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.miou, 100.0 / 3.0, epsilon = 1e-12);
        for v in [r.accuracy, r.precision, r.recall, r.specificity] {
            assert_abs_diff_eq!(v, 50.0, epsilon = 1e-12);
        }
        let perfect = compute_metrics(&ConfusionCounts { tp: 5, fp: 0, tn: 11, fn_: 0 }).unwrap();
        assert!(perfect.values().iter().all(|&v| v == 100.0));
        assert!(compute_metrics(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn degenerate_denominators() {
        // all-background predictor on a mask with foreground
        let r = compute_metrics(&ConfusionCounts { tp: 0, fp: 0, tn: 90, fn_: 10 }).unwrap();
        assert_eq!(r.recall, 0.0);
        assert_eq!(r.specificity, 100.0);
        assert_eq!(r.precision, 100.0);
        assert_eq!(r.dice, 0.0);
        // empty prediction on an empty mask
        let e = compute_metrics(&ConfusionCounts { tp: 0, fp: 0, tn: 10, fn_: 0 }).unwrap();
        assert!(e.values().iter().all(|&v| v == 100.0));
    }

    #[test]
    fn imbalance_decouples_accuracy_from_dice() {
        // 1% foreground, half of it found, as many false positives
        let r = compute_metrics(&ConfusionCounts { tp: 50, fp: 50, fn_: 50, tn: 9850 }).unwrap();
        assert!(r.accuracy >= 98.9);
        assert!(r.dice < 60.0);
    }

    #[test]
    fn aggregate_examples() {
        let a = MetricsReport::from_values([60.0; 6]);
        let b = MetricsReport::from_values([80.0; 6]);
        let agg = aggregate(&[a, b]).unwrap();
        assert_abs_diff_eq!(agg.mean.dice, 70.0, epsilon = 1e-12);
        assert_abs_diff_eq!(agg.std.dice, 200f64.sqrt(), epsilon = 1e-12);
        assert_eq!(aggregate(&[a, a, a]).unwrap().std.values(), [0.0; 6]);
        assert_eq!(aggregate(&[a]).unwrap().std.values(), [0.0; 6]);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn table_layout() {
        let rows = [TableRow::published("Supervised", PUBLISHED_SUPERVISED)];
        let csv = table_csv(&rows);
        assert!(csv.starts_with("model,runs,Dice,Dice_std,mIoU,mIoU_std,Accuracy,Accuracy_std,Precision,Precision_std,Recall,Recall_std,Specificity,Specificity_std\n"));
        assert!(csv.contains("Supervised,10,67.915,0.313"));
        let text = table_text(&rows);
        assert!(text.contains("67.915 (0.313)"));
    }
}
