//! Pixel-level evaluation against expert ground truth, restricted to the
//! field of view.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::raster::{ensure_dims, BinaryMask, GrayImage};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    /// Truth-vessel pixel count `P`.
    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    /// Truth-background pixel count `N`.
    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }

    pub fn total(&self) -> u64 {
        self.positives() + self.negatives()
    }

    pub fn add(&self, other: &ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + other.tp,
            tn: self.tn + other.tn,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
        }
    }
}

pub fn confusion(
    pred: &BinaryMask,
    truth: &BinaryMask,
    fov: &BinaryMask,
) -> Result<ConfusionCounts> {
    ensure_dims(truth.dims(), pred.dims())?;
    ensure_dims(truth.dims(), fov.dims())?;
    let mut c = ConfusionCounts::default();
    for ((&p, &t), &inside) in pred
        .as_slice()
        .iter()
        .zip(truth.as_slice())
        .zip(fov.as_slice())
    {
        if !inside {
            continue;
        }
        match (p, t) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64, name: &'static str) -> Result<f64> {
    if den == 0 {
        Err(Error::EmptyDenominator(name))
    } else {
        Ok(num as f64 / den as f64)
    }
}

/// `TP / (TP + FN)`.
pub fn sensitivity(c: &ConfusionCounts) -> Result<f64> {
    ratio(c.tp, c.positives(), "sensitivity")
}

/// `TN / (TN + FP)`.
pub fn specificity(c: &ConfusionCounts) -> Result<f64> {
    ratio(c.tn, c.negatives(), "specificity")
}

/// `(TP + TN) / (P + N)`.
pub fn accuracy(c: &ConfusionCounts) -> Result<f64> {
    ratio(c.tp + c.tn, c.total(), "accuracy")
}

/// `2 |A and B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    ensure_dims(a.dims(), b.dims())?;
    let both = a.and(b)?.count();
    let sizes = a.count() + b.count();
    Ok(if sizes == 0 {
        1.0
    } else {
        2.0 * both as f64 / sizes as f64
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RocCurve {
    /// Descending threshold; first point (0, 0), last point (1, 1).
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{}", p.threshold, p.fpr, p.tpr);
        }
        s
    }
}

/// Threshold-grid ROC that can be fed several images before finishing.
///
/// Thresholds are `i / n` for `i = n..=0` plus a sentinel above 1; a pixel
/// is predicted vessel at threshold `t` when its probability is `>= t`.
#[derive(Debug, Clone)]
pub struct RocAccumulator {
    n: usize,
    /// `pos[i]`: truth-vessel pixels whose highest passed threshold is `i / n`.
    pos: Vec<u64>,
    neg: Vec<u64>,
}

impl RocAccumulator {
    pub fn new(n_thresholds: usize) -> Result<Self> {
        if n_thresholds < 2 {
            return Err(Error::Config("ROC needs at least 2 thresholds".into()));
        }
        Ok(Self {
            n: n_thresholds,
            pos: vec![0; n_thresholds + 1],
            neg: vec![0; n_thresholds + 1],
        })
    }

    fn threshold(&self, i: usize) -> f64 {
        i as f64 / self.n as f64
    }

    /// Largest `i` with `i / n <= p`.
    fn bin(&self, p: f64) -> usize {
        let mut i = ((p * self.n as f64).floor().max(0.0) as usize).min(self.n);
        while i < self.n && self.threshold(i + 1) <= p {
            i += 1;
        }
        while i > 0 && self.threshold(i) > p {
            i -= 1;
        }
        i
    }

    pub fn add(&mut self, prob: &GrayImage, truth: &BinaryMask, fov: &BinaryMask) -> Result<()> {
        ensure_dims(truth.dims(), prob.dims())?;
        ensure_dims(truth.dims(), fov.dims())?;
        for ((&p, &t), &inside) in prob
            .as_slice()
            .iter()
            .zip(truth.as_slice())
            .zip(fov.as_slice())
        {
            if !inside {
                continue;
            }
            let b = self.bin(p);
            if t {
                self.pos[b] += 1;
            } else {
                self.neg[b] += 1;
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> RocCurve {
        let total_pos: u64 = self.pos.iter().sum();
        let total_neg: u64 = self.neg.iter().sum();
        let rate = |k: u64, total: u64| {
            if total == 0 {
                0.0
            } else {
                k as f64 / total as f64
            }
        };
        let mut points = Vec::with_capacity(self.n + 2);
        points.push(RocPoint {
            threshold: 1.0 + 1.0 / self.n as f64,
            fpr: 0.0,
            tpr: 0.0,
        });
        let (mut tp, mut fp) = (0u64, 0u64);
        for i in (0..=self.n).rev() {
            tp += self.pos[i];
            fp += self.neg[i];
            points.push(RocPoint {
                threshold: self.threshold(i),
                fpr: rate(fp, total_neg),
                tpr: rate(tp, total_pos),
            });
        }
        let auc = points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum();
        RocCurve { points, auc }
    }
}

pub fn roc_curve(
    prob: &GrayImage,
    truth: &BinaryMask,
    fov: &BinaryMask,
    n_thresholds: usize,
) -> Result<RocCurve> {
    let mut acc = RocAccumulator::new(n_thresholds)?;
    acc.add(prob, truth, fov)?;
    Ok(acc.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub id: String,
    pub counts: ConfusionCounts,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: Option<f64>,
}

impl ImageMetrics {
    pub fn new(id: impl Into<String>, counts: ConfusionCounts) -> Self {
        Self {
            id: id.into(),
            sensitivity: sensitivity(&counts).ok(),
            specificity: specificity(&counts).ok(),
            accuracy: accuracy(&counts).ok(),
            counts,
        }
    }
}

/// Per-image metrics with two summaries: metrics of the pooled counts, and
/// the unweighted mean of the per-image values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub images: Vec<ImageMetrics>,
    pub pooled: ImageMetrics,
    pub mean_sensitivity: Option<f64>,
    pub mean_specificity: Option<f64>,
    pub mean_accuracy: Option<f64>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn aggregate_report(per_image: &[(String, ConfusionCounts)]) -> Result<Report> {
    if per_image.is_empty() {
        return Err(Error::Config("report needs at least one image".into()));
    }
    let images: Vec<ImageMetrics> = per_image
        .iter()
        .map(|(id, c)| ImageMetrics::new(id.clone(), *c))
        .collect();
    let pooled_counts = per_image
        .iter()
        .fold(ConfusionCounts::default(), |acc, (_, c)| acc.add(c));
    Ok(Report {
        mean_sensitivity: mean_of(images.iter().map(|m| m.sensitivity)),
        mean_specificity: mean_of(images.iter().map(|m| m.specificity)),
        mean_accuracy: mean_of(images.iter().map(|m| m.accuracy)),
        pooled: ImageMetrics::new("pooled", pooled_counts),
        images,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Report {
    /// One row per image, then `pooled` and `mean` summary rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("record,tp,tn,fp,fn,sensitivity,specificity,accuracy\n");
        for m in self.images.iter().chain(std::iter::once(&self.pooled)) {
            let c = &m.counts;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                m.id,
                c.tp,
                c.tn,
                c.fp,
                c.fn_,
                opt(m.sensitivity),
                opt(m.specificity),
                opt(m.accuracy)
            );
        }
        let _ = writeln!(
            s,
            "mean,,,,,{},{},{}",
            opt(self.mean_sensitivity),
            opt(self.mean_specificity),
            opt(self.mean_accuracy)
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic_example() {
        let c = ConfusionCounts {
            tp: 3,
            fn_: 1,
            tn: 5,
            fp: 1,
        };
        assert_eq!(sensitivity(&c).unwrap(), 0.75);
        assert_eq!(specificity(&c).unwrap(), 5.0 / 6.0);
        assert_eq!(accuracy(&c).unwrap(), 0.8);
    }

    #[test]
    fn empty_denominators() {
        let c = ConfusionCounts {
            tp: 0,
            fn_: 0,
            tn: 4,
            fp: 0,
        };
        assert!(matches!(sensitivity(&c), Err(Error::EmptyDenominator(_))));
        assert_eq!(specificity(&c).unwrap(), 1.0);
        assert!(accuracy(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn perfect_and_inverted_predictions() {
        let truth = BinaryMask::from_fn(6, 5, |x, y| (x + 2 * y) % 3 == 0);
        let fov = BinaryMask::from_fn(6, 5, |x, _| x > 0);
        let c = confusion(&truth, &truth, &fov).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        assert_eq!(accuracy(&c).unwrap(), 1.0);
        assert_eq!(sensitivity(&c).unwrap(), 1.0);
        assert_eq!(specificity(&c).unwrap(), 1.0);
        let inv = confusion(&truth.not(), &truth, &fov).unwrap();
        assert_eq!((inv.tp, inv.tn), (0, 0));
        assert_eq!(inv.total(), fov.count() as u64);
    }

    #[test]
    fn perfect_roc() {
        let truth = BinaryMask::from_fn(10, 10, |x, y| x * y % 4 == 1);
        let prob = GrayImage::from_fn(10, 10, |x, y| if truth.get(x, y) { 1.0 } else { 0.0 });
        let roc = roc_curve(&prob, &truth, &BinaryMask::filled(10, 10, true), 1000).unwrap();
        assert_eq!(roc.auc, 1.0);
        assert_eq!(roc.points.len(), 1002);
        let first = roc.points[0];
        let last = *roc.points.last().unwrap();
        assert!(first.threshold > 1.0 && first.fpr == 0.0 && first.tpr == 0.0);
        assert!(last.threshold == 0.0 && last.fpr == 1.0 && last.tpr == 1.0);
    }

    #[test]
    fn constant_scores_are_uninformative() {
        let truth = BinaryMask::from_fn(8, 8, |x, _| x < 3);
        let prob = GrayImage::filled(8, 8, 0.5);
        let roc = roc_curve(&prob, &truth, &BinaryMask::filled(8, 8, true), 1000).unwrap();
        assert_eq!(roc.auc, 0.5);
        let mut distinct: Vec<(f64, f64)> = roc.points.iter().map(|p| (p.fpr, p.tpr)).collect();
        distinct.dedup();
        assert_eq!(distinct, vec![(0.0, 0.0), (1.0, 1.0)]);
    }

    #[test]
    fn bins_respect_threshold_semantics() {
        let acc = RocAccumulator::new(10).unwrap();
        assert_eq!(acc.bin(0.0), 0);
        assert_eq!(acc.bin(0.3), 3);
        assert_eq!(acc.bin(0.29999), 2);
        assert_eq!(acc.bin(1.0), 10);
        assert_eq!(acc.bin(0.7), 7);
    }

    #[test]
    fn report_rows() {
        let c = ConfusionCounts {
            tp: 3,
            fn_: 1,
            tn: 5,
            fp: 1,
        };
        let single = aggregate_report(&[("01".into(), c)]).unwrap();
        assert_eq!(single.pooled.accuracy, single.images[0].accuracy);
        assert_eq!(single.mean_accuracy, Some(0.8));
        let twice = aggregate_report(&[("01".into(), c), ("02".into(), c)]).unwrap();
        assert_eq!(twice.mean_accuracy, Some(0.8));
        assert_eq!(twice.to_csv().lines().count(), 1 + 2 + 2);
        assert!(aggregate_report(&[]).is_err());
    }

    #[test]
    fn dice_values() {
        let a = BinaryMask::from_fn(4, 1, |x, _| x < 2);
        let b = BinaryMask::from_fn(4, 1, |x, _| x >= 1 && x < 3);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(
            dice(&BinaryMask::new(2, 2), &BinaryMask::new(2, 2)).unwrap(),
            1.0
        );
    }
}
