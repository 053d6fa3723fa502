//! Novel-class mIoU and expected calibration error.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const DEFAULT_ECE_BINS: usize = 15;

/// Intersection, false-positive and false-negative counts for one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IouCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl IouCounts {
    /// `None` when the class is absent from both prediction and truth.
    pub fn iou(&self) -> Option<f64> {
        let union = self.tp + self.fp + self.fn_;
        (union > 0).then(|| self.tp as f64 / union as f64)
    }

    fn add(&mut self, o: &IouCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Counts for episode classes `1..=n_way`.
pub fn class_counts(pred: &[usize], truth: &[usize], n_way: usize) -> Result<Vec<IouCounts>> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if let Some(&bad) = pred.iter().chain(truth).find(|&&l| l > n_way) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside [0, {n_way}]"
        )));
    }
    let mut counts = vec![IouCounts::default(); n_way];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            if p > 0 {
                counts[p - 1].tp += 1;
            }
        } else {
            if p > 0 {
                counts[p - 1].fp += 1;
            }
            if t > 0 {
                counts[t - 1].fn_ += 1;
            }
        }
    }
    Ok(counts)
}

/// Mean IoU over classes `1..=n_way` present in prediction or truth;
/// 1.0 when none are.
pub fn miou(pred: &[usize], truth: &[usize], n_way: usize) -> Result<f64> {
    Ok(mean_iou(&class_counts(pred, truth, n_way)?))
}

fn mean_iou<'a>(counts: impl IntoIterator<Item = &'a IouCounts>) -> f64 {
    let ious: Vec<f64> = counts.into_iter().filter_map(IouCounts::iou).collect();
    if ious.is_empty() {
        1.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub conf_sum: f64,
    pub correct: usize,
    pub count: usize,
}

impl ReliabilityBin {
    pub fn mean_conf(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.conf_sum / self.count as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }
}

/// Equal-width bins on [0, 1], right-closed: `(lo, hi]`, with 0.0 in the
/// first bin.
pub fn bin_index(conf: f64, n_bins: usize) -> usize {
    let scaled = conf.clamp(0.0, 1.0) * n_bins as f64;
    let mut b = scaled.ceil() as usize;
    // Correct for rounding in the product near an edge.
    if b > 0 && (b - 1) as f64 / n_bins as f64 >= conf {
        b -= 1;
    } else if b < n_bins && (b as f64 / n_bins as f64) < conf {
        b += 1;
    }
    b.saturating_sub(1).min(n_bins - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub bins: Vec<ReliabilityBin>,
}

impl Calibration {
    pub fn new(n_bins: usize) -> Result<Self> {
        if n_bins == 0 {
            return Err(Error::InvalidArgument("n_bins must be >= 1".into()));
        }
        let bins = (0..n_bins)
            .map(|b| ReliabilityBin {
                lo: b as f64 / n_bins as f64,
                hi: (b + 1) as f64 / n_bins as f64,
                conf_sum: 0.0,
                correct: 0,
                count: 0,
            })
            .collect();
        Ok(Calibration { bins })
    }

    pub fn add(&mut self, conf: f64, correct: bool) {
        let idx = bin_index(conf, self.bins.len());
        let b = &mut self.bins[idx];
        b.conf_sum += conf;
        b.correct += usize::from(correct);
        b.count += 1;
    }

    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// `Σ_b (|B_b|/n)·|acc(B_b) − conf(B_b)|`.
    pub fn ece(&self) -> Result<f64> {
        let n = self.total();
        if n == 0 {
            return Err(Error::InvalidArgument("ECE of an empty prediction set".into()));
        }
        Ok(self
            .bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| b.count as f64 / n as f64 * (b.accuracy() - b.mean_conf()).abs())
            .sum())
    }

    /// `bin_lo,bin_hi,mean_conf,accuracy,count`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,mean_conf,accuracy,count\n");
        for b in &self.bins {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                b.lo,
                b.hi,
                b.mean_conf(),
                b.accuracy(),
                b.count
            );
        }
        s
    }
}

/// ECE from per-point confidences (maximum class probability).
pub fn ece(
    confidences: &[f64],
    pred: &[usize],
    truth: &[usize],
    n_bins: usize,
) -> Result<f64> {
    if confidences.len() != pred.len() || pred.len() != truth.len() {
        return Err(Error::InvalidArgument("ece inputs differ in length".into()));
    }
    let mut cal = Calibration::new(n_bins)?;
    for ((&c, &p), &t) in confidences.iter().zip(pred).zip(truth) {
        cal.add(c, p == t);
    }
    cal.ece()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub miou: f64,
    /// IoU per original class id, over all episodes.
    pub per_class_iou: BTreeMap<i64, f64>,
    pub ece: f64,
    pub calibration: Calibration,
    pub episodes: usize,
    /// Mean of the per-episode mIoU values.
    pub mean_episode_miou: f64,
}

/// Accumulates counts across episodes keyed by original class id.
#[derive(Debug, Clone)]
pub struct MetricsAccumulator {
    counts: BTreeMap<i64, IouCounts>,
    calibration: Calibration,
    episodes: usize,
    episode_miou_sum: f64,
}

impl MetricsAccumulator {
    pub fn new(n_bins: usize) -> Result<Self> {
        Ok(MetricsAccumulator {
            counts: BTreeMap::new(),
            calibration: Calibration::new(n_bins)?,
            episodes: 0,
            episode_miou_sum: 0.0,
        })
    }

    /// `novel_classes[i]` is the original id of episode label `i + 1`.
    pub fn add_episode(
        &mut self,
        novel_classes: &[i64],
        confidences: &[f64],
        pred: &[usize],
        truth: &[usize],
    ) -> Result<()> {
        let counts = class_counts(pred, truth, novel_classes.len())?;
        if confidences.len() != pred.len() {
            return Err(Error::InvalidArgument("confidences differ in length".into()));
        }
        for (cls, c) in novel_classes.iter().zip(&counts) {
            self.counts.entry(*cls).or_default().add(c);
        }
        for ((&c, &p), &t) in confidences.iter().zip(pred).zip(truth) {
            self.calibration.add(c, p == t);
        }
        self.episode_miou_sum += mean_iou(&counts);
        self.episodes += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<MetricsReport> {
        let per_class_iou: BTreeMap<i64, f64> = self
            .counts
            .iter()
            .filter_map(|(&k, c)| c.iou().map(|v| (k, v)))
            .collect();
        let miou = mean_iou(self.counts.values());
        Ok(MetricsReport {
            miou,
            per_class_iou,
            ece: self.calibration.ece()?,
            mean_episode_miou: if self.episodes == 0 {
                0.0
            } else {
                self.episode_miou_sum / self.episodes as f64
            },
            calibration: self.calibration,
            episodes: self.episodes,
        })
    }
}
