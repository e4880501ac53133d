//! Segmentation evaluation metrics from exact voxel confusion counts.
//!
//! Predictions are binarized at a threshold (0.5 by default, the sigmoid
//! midpoint) and compared voxel-by-voxel against binary ground truth.
//! Any metric whose denominator is empty evaluates to 1.0: an empty
//! foreground predicted as empty is a perfect result, and the convention
//! keeps aggregate tables free of NaN.

use thiserror::Error;

use crate::volume::{BinaryMask, Volume, VolumeError};

/// Default binarization threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("threshold must lie strictly inside (0,1), got {0}")]
    BadThreshold(f64),
    #[error("confusion counts are empty")]
    EmptyCounts,
}

/// Voxel-level confusion counts; the four fields always sum to the total
/// voxel count of the evaluated volumes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
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

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

/// The five tabulated metrics plus the counts they came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub specificity: f64,
    pub sensitivity: f64,
    pub counts: ConfusionCounts,
}

impl MetricReport {
    pub fn values(&self) -> [f64; 5] {
        [
            self.dice,
            self.iou,
            self.precision,
            self.specificity,
            self.sensitivity,
        ]
    }
}

/// Metric column names in table order.
pub const METRIC_NAMES: [&str; 5] = ["dice", "iou", "precision", "specificity", "sensitivity"];

/// Binarizes `pred_prob` at `threshold` (predicted foreground when
/// `p >= threshold`) and counts voxels against `truth`.
pub fn confusion(
    pred_prob: &Volume,
    truth: &BinaryMask,
    threshold: f64,
) -> Result<ConfusionCounts, MetricsError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(MetricsError::BadThreshold(threshold));
    }
    if pred_prob.shape() != truth.shape() {
        return Err(VolumeError::ShapeMismatch {
            op: "confusion",
            left: pred_prob.shape().to_vec(),
            right: truth.shape().to_vec(),
        }
        .into());
    }
    let mut counts = ConfusionCounts::default();
    for (&p, &t) in pred_prob.data().iter().zip(truth.as_volume().data()) {
        let predicted = p >= threshold;
        let actual = t == 1.0;
        match (predicted, actual) {
            (true, true) => counts.tp += 1,
            (true, false) => counts.fp += 1,
            (false, true) => counts.fn_ += 1,
            (false, false) => counts.tn += 1,
        }
    }
    Ok(counts)
}

/// Derives the five metrics from counts. 0/0 denominators yield 1.0.
pub fn report(counts: ConfusionCounts) -> Result<MetricReport, MetricsError> {
    if counts.total() == 0 {
        return Err(MetricsError::EmptyCounts);
    }
    let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Ok(MetricReport {
        dice: ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn_),
        iou: ratio(counts.tp, counts.tp + counts.fp + counts.fn_),
        precision: ratio(counts.tp, counts.tp + counts.fp),
        specificity: ratio(counts.tn, counts.tn + counts.fp),
        sensitivity: ratio(counts.tp, counts.tp + counts.fn_),
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::Tape;
    use crate::losses::loss_dice;
    use crate::rng;

    fn mask(shape: &[usize], data: &[f64]) -> BinaryMask {
        BinaryMask::from_volume(Volume::new(shape.to_vec(), data.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn perfect_prediction_counts_and_metrics() {
        let pred = Volume::ones(&[1, 2, 2, 2]);
        let truth = mask(&[1, 2, 2, 2], &[1.0; 8]);
        let counts = confusion(&pred, &truth, 0.5).unwrap();
        assert_eq!(
            counts,
            ConfusionCounts {
                tp: 8,
                fp: 0,
                tn: 0,
                fn_: 0
            }
        );
        let r = report(counts).unwrap();
        assert_eq!(r.values(), [1.0; 5]);
    }

    #[test]
    fn total_miss_counts() {
        let pred = Volume::zeros(&[1, 2, 2, 2]);
        let truth = mask(&[1, 2, 2, 2], &[1.0; 8]);
        let counts = confusion(&pred, &truth, 0.5).unwrap();
        assert_eq!(counts.fn_, 8);
        assert_eq!(counts.tp + counts.fp + counts.tn, 0);
    }

    #[test]
    fn mixed_four_voxel_hand_count() {
        let pred = Volume::new(vec![1, 1, 1, 4], vec![0.6, 0.4, 0.6, 0.4]).unwrap();
        let truth = mask(&[1, 1, 1, 4], &[1.0, 1.0, 0.0, 0.0]);
        let counts = confusion(&pred, &truth, 0.5).unwrap();
        assert_eq!(
            counts,
            ConfusionCounts {
                tp: 1,
                fn_: 1,
                fp: 1,
                tn: 1
            }
        );
        let r = report(counts).unwrap();
        assert_eq!(r.dice, 0.5);
        assert!((r.iou - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.precision, 0.5);
        assert_eq!(r.specificity, 0.5);
        assert_eq!(r.sensitivity, 0.5);
    }

    #[test]
    fn empty_foreground_convention_is_one() {
        let r = report(ConfusionCounts {
            tp: 0,
            fp: 0,
            fn_: 0,
            tn: 8,
        })
        .unwrap();
        assert_eq!(r.dice, 1.0);
        assert_eq!(r.specificity, 1.0);
        assert_eq!(r.sensitivity, 1.0);
    }

    #[test]
    fn empty_counts_are_rejected() {
        assert!(matches!(
            report(ConfusionCounts::default()),
            Err(MetricsError::EmptyCounts)
        ));
    }

    #[test]
    fn threshold_bounds_are_enforced() {
        let pred = Volume::zeros(&[2]);
        let truth = mask(&[2], &[0.0, 1.0]);
        assert!(matches!(
            confusion(&pred, &truth, 0.0),
            Err(MetricsError::BadThreshold(_))
        ));
        assert!(matches!(
            confusion(&pred, &truth, 1.0),
            Err(MetricsError::BadThreshold(_))
        ));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let pred = Volume::zeros(&[2, 2]);
        let truth = mask(&[4], &[0.0; 4]);
        assert!(confusion(&pred, &truth, 0.5).is_err());
    }

    /// Independent brute-force voxel loop used as the metric oracle.
    fn brute_force(pred: &[f64], truth: &[f64], threshold: f64) -> (u64, u64, u64, u64, [f64; 5]) {
        let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
        for i in 0..pred.len() {
            let p = pred[i] >= threshold;
            let t = truth[i] == 1.0;
            if p && t {
                tp += 1;
            } else if p && !t {
                fp += 1;
            } else if !p && t {
                fn_ += 1;
            } else {
                tn += 1;
            }
        }
        let div = |n: u64, d: u64| if d == 0 { 1.0 } else { n as f64 / d as f64 };
        let metrics = [
            div(2 * tp, 2 * tp + fp + fn_),
            div(tp, tp + fp + fn_),
            div(tp, tp + fp),
            div(tn, tn + fp),
            div(tp, tp + fn_),
        ];
        (tp, fp, tn, fn_, metrics)
    }

    #[test]
    fn matches_brute_force_on_seeded_volumes() {
        let mut rng = rng::seeded(1234);
        for _ in 0..100 {
            let pred_data: Vec<f64> = (0..64).map(|_| rng::uniform(&mut rng)).collect();
            let truth_data: Vec<f64> = (0..64)
                .map(|_| if rng::uniform(&mut rng) < 0.35 { 1.0 } else { 0.0 })
                .collect();
            let pred = Volume::new(vec![4, 4, 4], pred_data.clone()).unwrap();
            let truth = mask(&[4, 4, 4], &truth_data);
            let counts = confusion(&pred, &truth, DEFAULT_THRESHOLD).unwrap();
            let r = report(counts).unwrap();
            let (tp, fp, tn, fn_, metrics) =
                brute_force(&pred_data, &truth_data, DEFAULT_THRESHOLD);
            assert_eq!((counts.tp, counts.fp, counts.tn, counts.fn_), (tp, fp, tn, fn_));
            assert_eq!(r.values(), metrics);
            assert!(r.dice >= r.iou);
            if counts.tp + counts.fp > 0 && counts.tp + counts.fn_ > 0 {
                let harmonic = 2.0 * r.precision * r.sensitivity / (r.precision + r.sensitivity);
                if (r.precision + r.sensitivity) > 0.0 {
                    assert!((r.dice - harmonic).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dice_equals_iou_only_without_errors() {
        let with_errors = report(ConfusionCounts {
            tp: 5,
            fp: 2,
            fn_: 1,
            tn: 8,
        })
        .unwrap();
        assert!(with_errors.dice > with_errors.iou);
        let exact = report(ConfusionCounts {
            tp: 5,
            fp: 0,
            fn_: 0,
            tn: 8,
        })
        .unwrap();
        assert_eq!(exact.dice, exact.iou);
    }

    #[test]
    fn one_minus_dice_matches_dice_loss_at_vanishing_epsilon() {
        let mut rng = rng::seeded(77);
        for _ in 0..10 {
            let pred_data: Vec<f64> = (0..32)
                .map(|_| if rng::uniform(&mut rng) < 0.5 { 1.0 } else { 0.0 })
                .collect();
            let truth_data: Vec<f64> = (0..32)
                .map(|_| if rng::uniform(&mut rng) < 0.4 { 1.0 } else { 0.0 })
                .collect();
            let pred = Volume::new(vec![1, 2, 4, 4], pred_data.clone()).unwrap();
            let truth = mask(&[1, 2, 4, 4], &truth_data);
            let counts = confusion(&pred, &truth, 0.5).unwrap();
            let r = report(counts).unwrap();

            let tape = Tape::new();
            let pred_node = tape.input(pred);
            let loss = loss_dice(&tape, pred_node, &truth, 1e-12).unwrap();
            let loss_v = tape.value_scalar(loss).unwrap();
            assert!(
                ((1.0 - r.dice) - loss_v).abs() < 1e-6,
                "1-dice {} vs loss {}",
                1.0 - r.dice,
                loss_v
            );
        }
    }
}
