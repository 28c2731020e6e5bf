//! Class-balanced loss weights, confusion counting and segmentation metrics.
//!
//! Counts are aggregated over the whole evaluation set (micro averaging).
//! Degenerate cases: F1 and IoU are 1 for a class absent from both prediction
//! and ground truth, and 0 when there are no true positives otherwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softmax_cross_entropy, Scalar, Tensor};

/// Per-class loss weights derived from training-set pixel counts:
/// `w_i = (Σ n − n_i) / ((N − 1) · Σ n)`, so rarer classes weigh more and the
/// weights sum to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub counts: Vec<u64>,
    pub weights: Vec<f64>,
}

impl ClassWeights {
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let n = counts.len();
        if n < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {n}")));
        }
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::Data("class weights need at least one labelled pixel".into()));
        }
        for (i, &c) in counts.iter().enumerate() {
            if c == 0 {
                log::warn!("class {i} has no training pixels; its weight is 1/(N-1)");
            }
        }
        let denom = (n as f64 - 1.0) * total as f64;
        let weights = counts.iter().map(|&c| (total - c) as f64 / denom).collect();
        Ok(ClassWeights {
            counts: counts.to_vec(),
            weights,
        })
    }

    /// `1/N` for every class.
    pub fn uniform(num_classes: usize) -> Self {
        ClassWeights {
            counts: vec![0; num_classes],
            weights: vec![1.0 / num_classes as f64; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }
}

/// Weighted pixel-averaged cross-entropy; uniform `1/N` weights when
/// `use_weights` is false.
pub fn weighted_ce_loss<E: Scalar>(
    logits: &Tensor<E>,
    labels: &[u32],
    weights: &ClassWeights,
    use_weights: bool,
) -> Result<Tensor<E>> {
    if use_weights {
        softmax_cross_entropy(logits, labels, &weights.weights)
    } else {
        softmax_cross_entropy(logits, labels, &ClassWeights::uniform(weights.num_classes()).weights)
    }
}

/// One-vs-rest counts for one class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ClassCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp, self.fn_ == 0)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_, self.fp == 0)
    }

    pub fn f1(&self) -> f64 {
        if self.tp == 0 {
            return if self.fp == 0 && self.fn_ == 0 { 1.0 } else { 0.0 };
        }
        let (p, r) = (self.precision(), self.recall());
        2.0 * p * r / (p + r)
    }

    pub fn iou(&self) -> f64 {
        let denom = self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            self.tp as f64 / denom as f64
        }
    }

    pub fn merge(&mut self, other: &ClassCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

/// `num / den`, with `0/0` mapped to 1 when the class is otherwise clean.
fn ratio(num: u64, den: u64, clean: bool) -> f64 {
    if den == 0 {
        if clean {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

/// Per-class confusion counts, aggregated over any number of masks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub classes: Vec<ClassCounts>,
}

impl ConfusionCounts {
    pub fn new(num_classes: usize) -> Self {
        ConfusionCounts {
            classes: vec![ClassCounts::default(); num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Adds one prediction/ground-truth pair.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::invalid(format!(
                "accumulate_confusion: prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let n = self.classes.len();
        // Dense n×n matrix first, then one-vs-rest counts.
        let mut matrix = vec![0u64; n * n];
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p as usize, g as usize);
            if p >= n || g >= n {
                return Err(Error::invalid(format!("label {} out of range for {n} classes", p.max(g))));
            }
            matrix[g * n + p] += 1;
        }
        let total = pred.len() as u64;
        for c in 0..n {
            let tp = matrix[c * n + c];
            let gt_c: u64 = (0..n).map(|p| matrix[c * n + p]).sum();
            let pred_c: u64 = (0..n).map(|g| matrix[g * n + c]).sum();
            let counts = ClassCounts {
                tp,
                fp: pred_c - tp,
                fn_: gt_c - tp,
                tn: total + tp - gt_c - pred_c,
            };
            self.classes[c].merge(&counts);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        for (a, b) in self.classes.iter_mut().zip(&other.classes) {
            a.merge(b);
        }
    }

    pub fn f1(&self, class: usize) -> f64 {
        self.classes[class].f1()
    }

    /// Mean IoU over all classes.
    pub fn miou(&self) -> f64 {
        self.classes.iter().map(ClassCounts::iou).sum::<f64>() / self.classes.len() as f64
    }
}

/// Object-size bins by the ground-truth change-pixel ratio.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SizeBin {
    /// Below 2 %.
    Small,
    /// 2 % up to (excluding) 6 %.
    Medium,
    /// 6 % and above.
    Large,
}

impl SizeBin {
    pub const ALL: [SizeBin; 3] = [SizeBin::Small, SizeBin::Medium, SizeBin::Large];

    pub fn of_ratio(ratio: f64) -> SizeBin {
        if ratio < 0.02 {
            SizeBin::Small
        } else if ratio < 0.06 {
            SizeBin::Medium
        } else {
            SizeBin::Large
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    /// Omitted when the bin holds no samples.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SizeBins {
    pub small: BinReport,
    pub medium: BinReport,
    pub large: BinReport,
}

/// Summary of one evaluation. For binary tasks precision/recall/F1 refer to
/// the change class (index 1); for multi-class tasks they are macro averages
/// over the non-background classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub miou: f64,
    pub bins: SizeBins,
    pub epoch: Option<usize>,
    pub samples: usize,
    pub per_class_f1: Vec<f64>,
    pub confusion: ConfusionCounts,
}

impl MetricsReport {
    /// Builds the report from aggregate counts and per-bin counts.
    pub fn from_counts(confusion: ConfusionCounts, bins: Option<[(ConfusionCounts, usize); 3]>, samples: usize) -> Self {
        let n = confusion.num_classes();
        let fg = 1..n;
        let mean = |f: fn(&ClassCounts) -> f64| fg.clone().map(|c| f(&confusion.classes[c])).sum::<f64>() / (n - 1) as f64;
        let bin = |b: &(ConfusionCounts, usize)| BinReport {
            f1: (b.1 > 0).then(|| b.0.f1(1)),
            count: b.1,
        };
        let bins = bins.map_or_else(SizeBins::default, |[s, m, l]| SizeBins {
            small: bin(&s),
            medium: bin(&m),
            large: bin(&l),
        });
        MetricsReport {
            precision: mean(ClassCounts::precision),
            recall: mean(ClassCounts::recall),
            f1: mean(ClassCounts::f1),
            miou: confusion.miou(),
            bins,
            epoch: None,
            samples,
            per_class_f1: confusion.classes.iter().map(ClassCounts::f1).collect(),
            confusion,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.confusion.num_classes()
    }

    /// The model-selection metric: change F1 for binary tasks, mIoU otherwise.
    pub fn selection_metric(&self) -> f64 {
        if self.num_classes() == 2 {
            self.f1
        } else {
            self.miou
        }
    }
}

/// Evaluates predicted masks against ground truth, with size bins for binary
/// tasks.
pub fn evaluate_masks<'a>(
    pairs: impl IntoIterator<Item = (&'a [u8], &'a [u8])>,
    num_classes: usize,
) -> Result<MetricsReport> {
    let mut total = ConfusionCounts::new(num_classes);
    let mut bins: [(ConfusionCounts, usize); 3] = std::array::from_fn(|_| (ConfusionCounts::new(num_classes), 0));
    let mut samples = 0;
    for (pred, gt) in pairs {
        let mut c = ConfusionCounts::new(num_classes);
        c.accumulate(pred, gt)?;
        total.merge(&c);
        if num_classes == 2 {
            let ratio = gt.iter().filter(|&&g| g != 0).count() as f64 / gt.len().max(1) as f64;
            let idx = SizeBin::ALL.iter().position(|&b| b == SizeBin::of_ratio(ratio)).expect("bin");
            bins[idx].0.merge(&c);
            bins[idx].1 += 1;
        }
        samples += 1;
    }
    Ok(MetricsReport::from_counts(total, (num_classes == 2).then_some(bins), samples))
}

/// Best (by [`MetricsReport::selection_metric`], earliest on ties) and last
/// reports of a per-epoch stream.
#[derive(Clone, Debug, Default)]
pub struct BestLast {
    pub best: Option<MetricsReport>,
    pub last: Option<MetricsReport>,
}

impl BestLast {
    /// Records a report; returns true when it became the new best.
    pub fn update(&mut self, report: MetricsReport) -> bool {
        let improved = self
            .best
            .as_ref()
            .is_none_or(|b| report.selection_metric() > b.selection_metric());
        if improved {
            self.best = Some(report.clone());
        }
        self.last = Some(report);
        improved
    }
}

/// Folds a report stream into its best and last entries.
pub fn track_best_last(reports: impl IntoIterator<Item = MetricsReport>) -> BestLast {
    let mut t = BestLast::default();
    for r in reports {
        t.update(r);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn weight_examples() {
        let w = ClassWeights::from_counts(&[94, 6]).unwrap().weights;
        assert!(close(w[0], 0.06) && close(w[1], 0.94), "{w:?}");
        assert_eq!(ClassWeights::from_counts(&[50, 50]).unwrap().weights, vec![0.5, 0.5]);
        let w = ClassWeights::from_counts(&[70, 20, 10]).unwrap().weights;
        for (a, b) in w.iter().zip([0.15, 0.40, 0.45]) {
            assert!(close(*a, b), "{w:?}");
        }
        let w = ClassWeights::from_counts(&[10, 0, 30]).unwrap().weights;
        assert!(close(w[1], 0.5));
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(counts in prop::collection::vec(0u64..1_000_000, 2..=5)) {
            prop_assume!(counts.iter().sum::<u64>() > 0);
            let w = ClassWeights::from_counts(&counts).unwrap().weights;
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn counts_match_loop_oracle_and_commute(
            masks in prop::collection::vec((prop::collection::vec(0u8..3, 16), prop::collection::vec(0u8..3, 16)), 1..5)
        ) {
            let mut fwd = ConfusionCounts::new(3);
            for (p, g) in &masks {
                fwd.accumulate(p, g).unwrap();
            }
            let mut rev = ConfusionCounts::new(3);
            for (p, g) in masks.iter().rev() {
                rev.accumulate(p, g).unwrap();
            }
            prop_assert_eq!(&fwd, &rev);
            for c in 0..3u8 {
                let mut o = ClassCounts::default();
                for (p, g) in &masks {
                    for (&pi, &gi) in p.iter().zip(g) {
                        match (pi == c, gi == c) {
                            (true, true) => o.tp += 1,
                            (true, false) => o.fp += 1,
                            (false, true) => o.fn_ += 1,
                            (false, false) => o.tn += 1,
                        }
                    }
                }
                prop_assert_eq!(fwd.classes[c as usize], o);
                prop_assert_eq!(o.total(), 16 * masks.len() as u64);
            }
        }
    }

    #[test]
    fn f1_examples() {
        let c = |tp, fp, fn_| ClassCounts { tp, fp, fn_, tn: 0 };
        assert_eq!(c(1, 0, 0).f1(), 1.0);
        assert!(close(c(50, 50, 0).f1(), 2.0 / 3.0));
        assert_eq!(c(0, 5, 5).f1(), 0.0);
        assert_eq!(c(0, 0, 0).f1(), 1.0);
    }

    #[test]
    fn miou_examples() {
        let mut perfect = ConfusionCounts::new(2);
        perfect.accumulate(&[0, 1, 1], &[0, 1, 1]).unwrap();
        assert_eq!(perfect.miou(), 1.0);
        let m = ConfusionCounts {
            classes: vec![
                ClassCounts { tp: 9, fp: 1, fn_: 0, tn: 0 },
                ClassCounts { tp: 1, fp: 0, fn_: 1, tn: 9 },
            ],
        };
        assert!(close(m.miou(), 0.7));
        let mut disjoint = ConfusionCounts::new(2);
        disjoint.accumulate(&[1, 0], &[0, 1]).unwrap();
        assert_eq!(disjoint.classes[1].iou(), 0.0);
    }

    #[test]
    fn accumulate_examples() {
        let mut c = ConfusionCounts::new(2);
        c.accumulate(&[1; 10], &[0; 10]).unwrap();
        assert_eq!(c.classes[1].fp, 10);
        assert!(c.accumulate(&[0; 3], &[0; 4]).is_err());
    }

    #[test]
    fn size_bins() {
        assert_eq!(SizeBin::of_ratio(0.01), SizeBin::Small);
        assert_eq!(SizeBin::of_ratio(0.02), SizeBin::Medium);
        assert_eq!(SizeBin::of_ratio(0.06), SizeBin::Large);
        let gt = vec![0u8; 100];
        let r = evaluate_masks([(&gt[..], &gt[..])], 2).unwrap();
        assert_eq!(r.bins.small.count, 1);
        assert_eq!(r.bins.medium, BinReport { f1: None, count: 0 });
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["bins"]["medium"].get("f1").is_none());
        for key in ["precision", "recall", "f1", "miou", "epoch"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn best_last_tracking() {
        let rep = |f1: f64, epoch| {
            let mut r = MetricsReport::from_counts(ConfusionCounts::new(2), None, 0);
            r.f1 = f1;
            r.epoch = Some(epoch);
            r
        };
        let t = track_best_last([rep(0.5, 1), rep(0.8, 2), rep(0.6, 3)]);
        assert_eq!(t.best.as_ref().unwrap().epoch, Some(2));
        assert_eq!(t.last.as_ref().unwrap().f1, 0.6);
        let t = track_best_last([rep(0.7, 1), rep(0.7, 2)]);
        assert_eq!(t.best.unwrap().epoch, Some(1));
        let t = track_best_last([rep(0.1, 1), rep(0.2, 2)]);
        assert_eq!(t.best.unwrap().epoch, t.last.unwrap().epoch);
    }

    #[test]
    fn unweighted_equals_weighted_on_balanced_binary() {
        let logits = crate::gradcheck::random_tensor::<f64>(Shape::new(1, 2, 2, 2), 1);
        let labels = [0, 1, 1, 0];
        let w = ClassWeights::from_counts(&[2, 2]).unwrap();
        let a = weighted_ce_loss(&logits, &labels, &w, true).unwrap().item().unwrap();
        let b = weighted_ce_loss(&logits, &labels, &w, false).unwrap().item().unwrap();
        assert_eq!(a, b);
    }
}
