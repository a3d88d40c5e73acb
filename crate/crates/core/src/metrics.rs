//! Object keypoint similarity and a single-instance AP/AR summary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{to_input_coords, GridSpec, Sample, Vec2, Visibility};
use crate::scalar::Scalar;

/// Per-keypoint constants of the 17 COCO person keypoints, in annotation order
/// (nose, eyes, ears, shoulders, elbows, wrists, hips, knees, ankles).
pub const COCO_KAPPAS: [f64; 17] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107,
    0.087, 0.087, 0.089, 0.089,
];

/// COCO constants for 17 joints, otherwise their mean for every joint.
pub fn default_kappas<T: Scalar>(num_joints: usize) -> Vec<T> {
    if num_joints == COCO_KAPPAS.len() {
        COCO_KAPPAS.iter().map(|&k| T::lit(k)).collect()
    } else {
        let mean = COCO_KAPPAS.iter().sum::<f64>() / COCO_KAPPAS.len() as f64;
        vec![T::lit(mean); num_joints]
    }
}

/// Default OKS thresholds `0.50, 0.55, ..., 0.95`.
pub fn default_thresholds<T: Scalar>() -> Vec<T> {
    (0..10)
        .map(|i| T::lit((50 + 5 * i) as f64 / 100.0))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct InstanceEval<T> {
    pub id: String,
    pub oks: T,
    /// Euclidean distance per joint in input pixels; `None` for unlabeled joints.
    pub per_joint_distance: Vec<Option<T>>,
    pub labeled_count: usize,
}

/// OKS over labeled joints:
/// `sum exp(-d^2 / (2 S^2 k^2)) / count`, `S = sqrt(bbox_area)`.
///
/// All coordinates are in the same pixel frame as `bbox_area`.
pub fn oks_points<T: Scalar>(
    pred: &[Vec2<T>],
    gt: &[Vec2<T>],
    visibility: &[Visibility],
    bbox_area: T,
    kappas: &[T],
) -> Result<InstanceEval<T>> {
    let k = gt.len();
    if pred.len() != k || visibility.len() != k || kappas.len() != k {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: {} predictions, {k} ground truth, {} visibilities, {} kappas",
            pred.len(),
            visibility.len(),
            kappas.len()
        )));
    }
    if !(bbox_area > T::zero()) {
        return Err(Error::InvalidArgument("bbox area must be positive".into()));
    }
    if kappas.iter().any(|&x| !(x > T::zero())) {
        return Err(Error::InvalidArgument("kappas must be positive".into()));
    }
    let two = T::lit(2.0);
    let mut sum = T::zero();
    let mut count = 0usize;
    let mut dists = Vec::with_capacity(k);
    for i in 0..k {
        if !visibility[i].is_labeled() {
            dists.push(None);
            continue;
        }
        let d2 = (pred[i] - gt[i]).norm_sq();
        sum += (-d2 / (two * bbox_area * kappas[i] * kappas[i])).exp();
        count += 1;
        dists.push(Some(d2.sqrt()));
    }
    if count == 0 {
        return Err(Error::NoLabeledJoints);
    }
    Ok(InstanceEval {
        id: String::new(),
        oks: sum / T::from_usize_lossy(count),
        per_joint_distance: dists,
        labeled_count: count,
    })
}

/// OKS of input-pixel predictions against a sample whose joints are in
/// heatmap-cell units of `grid`.
pub fn oks<T: Scalar>(
    pred: &[Vec2<T>],
    gt: &Sample<T>,
    grid: &GridSpec<T>,
    bbox_area: T,
    kappas: &[T],
) -> Result<T> {
    evaluate_instance(pred, gt, grid, bbox_area, kappas).map(|e| e.oks)
}

pub fn evaluate_instance<T: Scalar>(
    pred: &[Vec2<T>],
    gt: &Sample<T>,
    grid: &GridSpec<T>,
    bbox_area: T,
    kappas: &[T],
) -> Result<InstanceEval<T>> {
    let gt_px: Vec<Vec2<T>> = gt
        .joints
        .iter()
        .map(|j| to_input_coords(j.position, grid))
        .collect();
    let vis: Vec<Visibility> = gt.joints.iter().map(|j| j.visibility).collect();
    let mut eval = oks_points(pred, &gt_px, &vis, bbox_area, kappas)?;
    eval.id = gt.source_id.clone();
    Ok(eval)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ThresholdRow<T> {
    pub threshold: T,
    pub precision: T,
    pub recall: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ApSummary<T> {
    pub ap: T,
    pub ar: T,
    pub per_threshold: Vec<ThresholdRow<T>>,
}

/// One prediction per ground-truth instance: at each threshold both precision
/// and recall are the fraction of instances with OKS strictly above it.
pub fn ap_ar<T: Scalar>(evals: &[InstanceEval<T>], thresholds: &[T]) -> Result<ApSummary<T>> {
    if evals.is_empty() {
        return Err(Error::Empty("no instances to evaluate".into()));
    }
    if thresholds.is_empty() {
        return Err(Error::Empty("no OKS thresholds".into()));
    }
    let n = T::from_usize_lossy(evals.len());
    let per_threshold: Vec<ThresholdRow<T>> = thresholds
        .iter()
        .map(|&t| {
            let hits = evals.iter().filter(|e| e.oks > t).count();
            let frac = T::from_usize_lossy(hits) / n;
            ThresholdRow {
                threshold: t,
                precision: frac,
                recall: frac,
            }
        })
        .collect();
    let m = T::from_usize_lossy(per_threshold.len());
    let ap = per_threshold.iter().map(|r| r.precision).sum::<T>() / m;
    let ar = per_threshold.iter().map(|r| r.recall).sum::<T>() / m;
    Ok(ApSummary {
        ap,
        ar,
        per_threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(oks: f64) -> InstanceEval<f64> {
        InstanceEval {
            id: String::new(),
            oks,
            per_joint_distance: vec![],
            labeled_count: 1,
        }
    }

    #[test]
    fn zero_distance_is_perfect() {
        let p = vec![Vec2::new(1.0, 2.0); 17];
        let vis = vec![Visibility::LabeledVisible; 17];
        let e = oks_points(&p, &p, &vis, 100.0, &default_kappas(17)).unwrap();
        assert_eq!(e.oks, 1.0);
        assert_eq!(e.labeled_count, 17);
    }

    #[test]
    fn single_joint_half_exponent() {
        // d^2 / (2 S^2 k^2) = 0.5 with S^2 = 100, k = 0.1 -> d^2 = 1
        let e = oks_points(
            &[Vec2::new(1.0, 0.0), Vec2::new(50.0, 50.0)],
            &[Vec2::new(0.0, 0.0), Vec2::new(0.0, 0.0)],
            &[Visibility::LabeledInvisible, Visibility::Unlabeled],
            100.0,
            &[0.1, 0.1],
        )
        .unwrap();
        assert!((e.oks - (-0.5f64).exp()).abs() < 1e-12);
        assert_eq!(e.per_joint_distance[1], None);
    }

    #[test]
    fn oks_errors() {
        let p = [Vec2::new(0.0, 0.0)];
        assert!(oks_points(&p, &p, &[Visibility::Unlabeled], 1.0, &[0.1]).is_err());
        assert!(oks_points(&p, &p, &[Visibility::LabeledVisible], 0.0, &[0.1]).is_err());
        assert!(oks_points(&p, &p, &[Visibility::LabeledVisible], 1.0, &[]).is_err());
    }

    #[test]
    fn ap_counts_thresholds() {
        let t = default_thresholds::<f64>();
        let s = ap_ar(&[inst(1.0), inst(1.0)], &t).unwrap();
        assert_eq!((s.ap, s.ar), (1.0, 1.0));
        let s = ap_ar(&vec![inst(0.7); 5], &t).unwrap();
        assert!((s.ap - 0.4).abs() < 1e-15);
        assert!(ap_ar::<f64>(&[], &t).is_err());
    }
}
