//! Segmentation metrics and prototype statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bank::ActivationRecord;

/// Per-sample predictions paired with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    /// Category used for category-averaged mIoU.
    pub category: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// Mean over samples of the per-sample mIoU.
    pub miou_samp: f64,
    /// Mean over categories of the category's mean per-sample mIoU.
    pub miou_cat: f64,
    /// Per class, the mean IoU over samples in which the class is evaluated
    /// (0 when it never is).
    pub per_class_iou: Vec<f64>,
}

/// IoU of every class in one sample; `None` for classes absent from both
/// prediction and ground truth.
pub fn sample_ious(predictions: &[usize], labels: &[usize], num_classes: usize) -> Vec<Option<f64>> {
    assert_eq!(predictions.len(), labels.len());
    let mut inter = vec![0usize; num_classes];
    let mut pred = vec![0usize; num_classes];
    let mut truth = vec![0usize; num_classes];
    for (&p, &t) in predictions.iter().zip(labels) {
        pred[p] += 1;
        truth[t] += 1;
        if p == t {
            inter[p] += 1;
        }
    }
    (0..num_classes)
        .map(|c| {
            let union = pred[c] + truth[c] - inter[c];
            (union > 0).then(|| inter[c] as f64 / union as f64)
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn miou(samples: &[SampleResult], num_classes: usize) -> MiouReport {
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut by_cat: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut class_ious: Vec<Vec<f64>> = vec![Vec::new(); num_classes];
    for s in samples {
        let ious = sample_ious(&s.predictions, &s.labels, num_classes);
        let present: Vec<f64> = ious.iter().flatten().copied().collect();
        let m = mean(&present);
        per_sample.push(m);
        by_cat.entry(s.category).or_default().push(m);
        for (c, iou) in ious.iter().enumerate() {
            if let Some(v) = iou {
                class_ious[c].push(*v);
            }
        }
    }
    let cat_means: Vec<f64> = by_cat.values().map(|v| mean(v)).collect();
    MiouReport {
        miou_samp: mean(&per_sample),
        miou_cat: mean(&cat_means),
        per_class_iou: class_ious.iter().map(|v| mean(v)).collect(),
    }
}

/// Thresholds deciding when a prototype counts as active.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivityThresholds {
    pub min_points: usize,
    pub min_frac: f64,
}

impl Default for ActivityThresholds {
    fn default() -> Self {
        Self {
            min_points: 10,
            min_frac: 0.005,
        }
    }
}

/// How many points activate each prototype: `counts[k][m]`.
pub fn activation_counts(record: &ActivationRecord, num_prototypes: usize) -> Vec<Vec<usize>> {
    let mut counts = vec![vec![0usize; num_prototypes]; record.num_classes];
    for (&k, &m) in record.k_hat.iter().zip(&record.m_hat) {
        counts[k][m] += 1;
    }
    counts
}

/// Number of active prototypes per class. Prototype `(m, k)` is active when
/// it is the activated prototype of at least
/// `max(min_points, min_frac * |points activated in class k|)` points.
pub fn count_active_prototypes(
    record: &ActivationRecord,
    num_prototypes: usize,
    thresholds: ActivityThresholds,
) -> Vec<usize> {
    active_from_counts(&activation_counts(record, num_prototypes), thresholds)
}

pub fn active_from_counts(counts: &[Vec<usize>], thresholds: ActivityThresholds) -> Vec<usize> {
    counts
        .iter()
        .map(|class| {
            let total: usize = class.iter().sum();
            let need = (thresholds.min_points as f64).max(thresholds.min_frac * total as f64);
            class.iter().filter(|&&c| c > 0 && c as f64 >= need).count()
        })
        .collect()
}

fn entropy(counts: impl Iterator<Item = usize>, total: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with arithmetic-mean normalization.
/// Returns 0 when either side carries no information.
pub fn nmi(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n == 0 {
        return 0.0;
    }
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut ma: BTreeMap<usize, usize> = BTreeMap::new();
    let mut mb: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ma.entry(x).or_default() += 1;
        *mb.entry(y).or_default() += 1;
    }
    let total = n as f64;
    let ha = entropy(ma.values().copied(), total);
    let hb = entropy(mb.values().copied(), total);
    if ha == 0.0 && hb == 0.0 {
        // both constant: identical partitions
        return 1.0;
    }
    if ha == 0.0 || hb == 0.0 {
        return 0.0;
    }
    let mut mi = 0.0;
    for (&(x, y), &c) in &joint {
        let pxy = c as f64 / total;
        let px = ma[&x] as f64 / total;
        let py = mb[&y] as f64 / total;
        mi += pxy * (pxy / (px * py)).ln();
    }
    (mi / ((ha + hb) / 2.0)).clamp(0.0, 1.0)
}

/// Per-class NMI between activated prototype and hidden subclass, over the
/// points of each true class that has at least two subclasses among its
/// points. The activated prototype id is the pair `(k_hat, m_hat)`.
pub fn subclass_nmi_per_class(
    record: &ActivationRecord,
    subclass: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Vec<Option<f64>> {
    assert_eq!(record.len(), subclass.len());
    assert_eq!(record.len(), labels.len());
    (0..num_classes)
        .map(|c| {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            let subs: Vec<usize> = idx.iter().map(|&i| subclass[i]).collect();
            let mut distinct = subs.clone();
            distinct.sort_unstable();
            distinct.dedup();
            if distinct.len() < 2 {
                return None;
            }
            let protos: Vec<usize> = idx
                .iter()
                .map(|&i| record.k_hat[i] * 1_000_000 + record.m_hat[i])
                .collect();
            Some(nmi(&protos, &subs))
        })
        .collect()
}

/// Mean of [`subclass_nmi_per_class`] over qualifying classes (0 if none).
pub fn subclass_nmi(
    record: &ActivationRecord,
    subclass: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> f64 {
    let per: Vec<f64> = subclass_nmi_per_class(record, subclass, labels, num_classes)
        .into_iter()
        .flatten()
        .collect();
    mean(&per)
}

/// Prototype-by-subclass contingency counts for every class:
/// `table[k][m][s]` counts points of true class `k` and subclass `s`
/// (indexed within the subclasses seen for class `k`, ascending) whose
/// activated prototype is `(k, m)`.
pub fn assignment_table(
    record: &ActivationRecord,
    subclass: &[usize],
    labels: &[usize],
    num_classes: usize,
    num_prototypes: usize,
) -> Vec<Vec<Vec<usize>>> {
    (0..num_classes)
        .map(|c| {
            let mut subs: Vec<usize> = labels
                .iter()
                .zip(subclass)
                .filter(|(&l, _)| l == c)
                .map(|(_, &s)| s)
                .collect();
            subs.sort_unstable();
            subs.dedup();
            let mut t = vec![vec![0usize; subs.len()]; num_prototypes];
            for i in 0..labels.len() {
                if labels[i] == c && record.k_hat[i] == c {
                    let s = subs.binary_search(&subclass[i]).expect("seen subclass");
                    t[record.m_hat[i]][s] += 1;
                }
            }
            t
        })
        .collect()
}

/// Metrics of one evaluation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou_samp: f64,
    pub miou_cat: f64,
    pub per_class_iou: Vec<f64>,
    pub active_prototypes: Vec<usize>,
    pub subclass_nmi: f64,
    pub per_class_nmi: Vec<Option<f64>>,
    pub prototype_assignment_table: Vec<Vec<Vec<usize>>>,
}

impl EvalReport {
    pub fn active_prototypes_mean(&self) -> f64 {
        mean(&self.active_prototypes.iter().map(|&v| v as f64).collect::<Vec<_>>())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
