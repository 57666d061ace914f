//! Pixel confusion counts and the eight segmentation metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::predict_probabilities;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Column order of the reports.
pub const METRIC_NAMES: [&str; 8] =
    ["recall", "specificity", "precision", "dice", "iou_polyp", "iou_background", "mean_iou", "accuracy"];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Counts with foreground and background exchanged.
    pub fn swapped(&self) -> Self {
        Self { tp: self.tn, tn: self.tp, fp: self.fn_, fn_: self.fp }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub recall: f64,
    pub specificity: f64,
    pub precision: f64,
    pub dice: f64,
    pub iou_polyp: f64,
    pub iou_background: f64,
    pub mean_iou: f64,
    pub accuracy: f64,
}

impl MetricRow {
    pub fn values(&self) -> [f64; 8] {
        [
            self.recall,
            self.specificity,
            self.precision,
            self.dice,
            self.iou_polyp,
            self.iou_background,
            self.mean_iou,
            self.accuracy,
        ]
    }

    fn from_values(v: [f64; 8]) -> Self {
        Self {
            recall: v[0],
            specificity: v[1],
            precision: v[2],
            dice: v[3],
            iou_polyp: v[4],
            iou_background: v[5],
            mean_iou: v[6],
            accuracy: v[7],
        }
    }

    /// Unweighted per-metric mean.
    pub fn mean(rows: &[MetricRow]) -> Self {
        let mut acc = [0.0; 8];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        Self::from_values(acc.map(|a| a / rows.len() as f64))
    }
}

/// `prob ≥ threshold` → 1, else 0.
pub fn binarize(prob: &Tensor, threshold: f64) -> Tensor {
    prob.map(|p| if p >= threshold { 1.0 } else { 0.0 })
}

pub fn confusion_counts(pred: &Tensor, gt: &Tensor) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape())));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &y) in pred.data().iter().zip(gt.data()) {
        match (p == 1.0, y == 1.0) {
            _ if !(p == 0.0 || p == 1.0) || !(y == 0.0 || y == 1.0) => {
                return Err(Error::Data(format!("non-binary mask value ({p}, {y})")))
            }
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// The eight metrics; an empty denominator counts as perfect agreement.
pub fn compute_metrics(c: &ConfusionCounts) -> MetricRow {
    let iou_polyp = ratio(c.tp, c.tp + c.fp + c.fn_);
    let iou_background = ratio(c.tn, c.tn + c.fp + c.fn_);
    MetricRow {
        recall: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
        precision: ratio(c.tp, c.tp + c.fp),
        dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        iou_polyp,
        iou_background,
        mean_iou: (iou_polyp + iou_background) / 2.0,
        accuracy: ratio(c.tp + c.tn, c.total()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub counts: ConfusionCounts,
    pub metrics: MetricRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub per_image: Vec<ImageMetrics>,
    pub aggregate: MetricRow,
}

impl MetricsReport {
    pub fn from_images(per_image: Vec<ImageMetrics>, threshold: f64) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::Data("cannot aggregate metrics over an empty dataset".into()));
        }
        let rows: Vec<MetricRow> = per_image.iter().map(|m| m.metrics).collect();
        Ok(Self { threshold, aggregate: MetricRow::mean(&rows), per_image })
    }

    /// One row per image plus a trailing `mean` row, preceded by a `#`
    /// comment line carrying `echo`.
    pub fn to_csv(&self, echo: &str) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["id"];
        header.extend(METRIC_NAMES);
        header.extend(["tp", "fp", "tn", "fn"]);
        let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
        w.write_record(&header).map_err(csv_err)?;
        for m in &self.per_image {
            let mut rec = vec![m.id.clone()];
            rec.extend(m.metrics.values().iter().map(|v| format!("{v:.6}")));
            let c = m.counts;
            rec.extend([c.tp, c.fp, c.tn, c.fn_].iter().map(u64::to_string));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let mut rec = vec!["mean".to_string()];
        rec.extend(self.aggregate.values().iter().map(|v| format!("{v:.6}")));
        rec.extend(std::iter::repeat_n(String::new(), 4));
        w.write_record(&rec).map_err(csv_err)?;
        let body = String::from_utf8(w.into_inner().map_err(|e| Error::Data(e.to_string()))?)
            .expect("csv output is utf-8");
        Ok(format!("# {echo}\n{body}"))
    }

    /// Aligned text table in the `Rec Spec Prec Dice IoUp IoUb mIoU Acc` order.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}", "Rec", "Spec", "Prec", "Dice", "IoUp", "IoUb", "mIoU", "Acc");
        let v = self.aggregate.values().map(|x| x * 100.0);
        let _ = writeln!(
            s,
            "{:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
            v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]
        );
        let _ = write!(s, "({} images, threshold {})", self.per_image.len(), self.threshold);
        s
    }
}

/// Per-image metrics of `P_1` (resized to the mask) and their mean.
pub fn evaluate_dataset(
    params: &ParamStore,
    cfg: &ModelConfig,
    samples: &[Sample],
    threshold: f64,
    batch_size: usize,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation dataset is empty".into()));
    }
    let mut per_image = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        for s in chunk {
            if s.image.shape()[1..] != s.mask.shape()[1..] {
                return Err(Error::Data(format!(
                    "sample `{}`: image {:?} and mask {:?} differ in size",
                    s.id,
                    s.image.shape(),
                    s.mask.shape()
                )));
            }
        }
        let images = Tensor::stack(&chunk.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
        let probs = predict_probabilities(params, cfg, &images)?;
        for (i, s) in chunk.iter().enumerate() {
            let mut p = probs.index0(i);
            if p.shape() != s.mask.shape() {
                p = crate::tensor::resize_bilinear_registered(&p, s.mask.dim(1), s.mask.dim(2));
            }
            let counts = confusion_counts(&binarize(&p, threshold), &s.mask)?;
            per_image.push(ImageMetrics { id: s.id.clone(), counts, metrics: compute_metrics(&counts) });
        }
    }
    MetricsReport::from_images(per_image, threshold)
}
