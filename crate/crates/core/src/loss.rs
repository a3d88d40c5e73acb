//! Losses and their closed-form gradients with respect to predicted heatmaps
//! and offset fields.
//!
//! Reductions: heatmap terms average over cells; masked offset terms divide by
//! the mask mass `sum(mask) + 1e-12`; batch losses average over the trainable
//! joint instances only.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Heatmap, OffsetField};
use crate::gmm::MaskSet;
use crate::scalar::Scalar;

/// Added to the mask mass before dividing.
pub const MASK_EPSILON: f64 = 1e-12;
/// SmoothL1 switches from quadratic to linear at this residual, heatmap cells.
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Mean squared error over cells and its gradient `2 (pred - target) / n`.
pub fn heatmap_l2<T: Scalar>(target: &Heatmap<T>, pred: &Heatmap<T>) -> Result<(T, Heatmap<T>)> {
    target.ensure_matches(pred)?;
    let mut grad = Heatmap::zeros(pred.grid);
    let v = heatmap_l2_into(&target.values, &pred.values, &mut grad.values, T::one());
    Ok((v, grad))
}

/// Writes `scale * gradient` into `grad` and returns the unscaled loss.
fn heatmap_l2_into<T: Scalar>(target: &[T], pred: &[T], grad: &mut [T], scale: T) -> T {
    let n = T::from_usize_lossy(pred.len());
    let g_scale = T::lit(2.0) / n * scale;
    let mut sum = T::zero();
    for ((g, &t), &p) in grad.iter_mut().zip(target).zip(pred) {
        let d = p - t;
        sum += d * d;
        *g = g_scale * d;
    }
    sum / n
}

/// Mean per-cell Bernoulli cross-entropy on sigmoid(logits).
///
/// Each cell contributes `softplus(z) - t z`, evaluated as
/// `max(z, 0) - t z + ln(1 + exp(-|z|))`; the gradient is `(sigmoid(z) - t) / n`.
pub fn binary_ce<T: Scalar>(target: &Heatmap<T>, logits: &Heatmap<T>) -> Result<(T, Heatmap<T>)> {
    target.ensure_matches(logits)?;
    let mut grad = Heatmap::zeros(logits.grid);
    let v = binary_ce_into(&target.values, &logits.values, &mut grad.values, T::one());
    Ok((v, grad))
}

fn binary_ce_into<T: Scalar>(target: &[T], logits: &[T], grad: &mut [T], scale: T) -> T {
    let n = T::from_usize_lossy(logits.len());
    let g_scale = scale / n;
    let mut sum = T::zero();
    for ((g, &t), &z) in grad.iter_mut().zip(target).zip(logits) {
        sum += z.max(T::zero()) - t * z + (-z.abs()).exp().ln_1p();
        *g = g_scale * (sigmoid(z) - t);
    }
    sum / n
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Per-channel residual penalty for offset regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OffsetLoss {
    #[serde(rename = "l1")]
    L1,
    #[serde(rename = "smooth-l1")]
    SmoothL1,
    #[serde(rename = "l2")]
    L2,
}

impl OffsetLoss {
    /// Penalty and derivative at residual `d`.
    pub fn penalty<T: Scalar>(self, d: T) -> (T, T) {
        match self {
            OffsetLoss::L1 => (d.abs(), sign(d)),
            OffsetLoss::SmoothL1 => {
                let beta = T::lit(SMOOTH_L1_BETA);
                if d.abs() < beta {
                    (T::lit(0.5) * d * d / beta, d / beta)
                } else {
                    (d.abs() - T::lit(0.5) * beta, sign(d))
                }
            }
            OffsetLoss::L2 => (d * d, T::lit(2.0) * d),
        }
    }
}

fn sign<T: Scalar>(d: T) -> T {
    if d > T::zero() {
        T::one()
    } else if d < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// `sum_p mask(p) (rho(dx) + rho(dy)) / (sum mask + 1e-12)` with its gradient
/// with respect to `pred`.
pub fn offset_masked<T: Scalar>(
    kind: OffsetLoss,
    target: &OffsetField<T>,
    pred: &OffsetField<T>,
    mask: &Heatmap<T>,
) -> Result<(T, OffsetField<T>)> {
    let mut grad = OffsetField::zeros(pred.grid);
    let v = offset_masked_into(kind, target, pred, mask, &mut grad, T::one())?;
    Ok((v, grad))
}

fn offset_masked_into<T: Scalar>(
    kind: OffsetLoss,
    target: &OffsetField<T>,
    pred: &OffsetField<T>,
    mask: &Heatmap<T>,
    grad: &mut OffsetField<T>,
    scale: T,
) -> Result<T> {
    target.ensure_matches(pred)?;
    pred.grid.ensure_same(&mask.grid)?;
    let mut mass = T::zero();
    for &m in &mask.values {
        if m < T::zero() || m.is_nan() {
            return Err(Error::InvalidArgument("mask values must be >= 0".into()));
        }
        mass += m;
    }
    let norm = mass + T::lit(MASK_EPSILON);
    let g_scale = scale / norm;
    let mut sum = T::zero();
    let cells = mask
        .values
        .iter()
        .zip(pred.dx.iter().zip(&pred.dy))
        .zip(target.dx.iter().zip(&target.dy))
        .zip(grad.dx.iter_mut().zip(grad.dy.iter_mut()));
    for (((&m, (&px, &py)), (&tx, &ty)), (gx, gy)) in cells {
        if m == T::zero() {
            *gx = T::zero();
            *gy = T::zero();
            continue;
        }
        let (lx, dx) = kind.penalty(px - tx);
        let (ly, dy) = kind.penalty(py - ty);
        sum += m * (lx + ly);
        let w = g_scale * m;
        *gx = w * dx;
        *gy = w * dy;
    }
    Ok(sum / norm)
}

pub fn offset_l1_masked<T: Scalar>(
    target: &OffsetField<T>,
    pred: &OffsetField<T>,
    mask: &Heatmap<T>,
) -> Result<(T, OffsetField<T>)> {
    offset_masked(OffsetLoss::L1, target, pred, mask)
}

pub fn offset_smooth_l1_masked<T: Scalar>(
    target: &OffsetField<T>,
    pred: &OffsetField<T>,
    mask: &Heatmap<T>,
) -> Result<(T, OffsetField<T>)> {
    offset_masked(OffsetLoss::SmoothL1, target, pred, mask)
}

pub fn offset_l2_masked<T: Scalar>(
    target: &OffsetField<T>,
    pred: &OffsetField<T>,
    mask: &Heatmap<T>,
) -> Result<(T, OffsetField<T>)> {
    offset_masked(OffsetLoss::L2, target, pred, mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeatmapLoss {
    L2,
    /// Per-cell sigmoid cross-entropy; predictions are logits.
    BinaryCe,
}

/// Free prediction tensors for one joint instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Prediction<T> {
    pub heatmap: Heatmap<T>,
    pub offsets: OffsetField<T>,
}

/// Supervision for one joint instance. Inactive joints contribute nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTargets<T> {
    pub heatmap: Heatmap<T>,
    pub offsets: OffsetField<T>,
    pub active: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LossConfig<T> {
    pub alpha: T,
    pub heatmap_loss: HeatmapLoss,
    /// `None` disables the offset term.
    pub offset_loss: Option<OffsetLoss>,
}

impl<T: Scalar> LossConfig<T> {
    /// L2 heatmap regression plus masked L1 offsets.
    pub fn cal(alpha: T) -> Self {
        Self {
            alpha,
            heatmap_loss: HeatmapLoss::L2,
            offset_loss: Some(OffsetLoss::L1),
        }
    }
}

/// Batch loss, its decomposition and per-joint gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport<T> {
    pub total: T,
    pub heatmap_term: T,
    pub offset_term: T,
    pub alpha: T,
    pub active_joints: usize,
    pub grad_heatmap: Vec<Heatmap<T>>,
    pub grad_offsets: Vec<OffsetField<T>>,
}

/// `1/N sum_j [H(target_j, pred_j) + alpha * O(offsets_j, pred_j; mask_j)]`
/// over the `N` active joints.
pub fn weighted_loss<T: Scalar>(
    targets: &[JointTargets<T>],
    preds: &[Prediction<T>],
    masks: &[&Heatmap<T>],
    cfg: &LossConfig<T>,
) -> Result<LossReport<T>> {
    let mut report = LossReport {
        total: T::zero(),
        heatmap_term: T::zero(),
        offset_term: T::zero(),
        alpha: cfg.alpha,
        active_joints: 0,
        grad_heatmap: preds
            .iter()
            .map(|p| Heatmap::zeros(p.heatmap.grid))
            .collect(),
        grad_offsets: preds
            .iter()
            .map(|p| OffsetField::zeros(p.offsets.grid))
            .collect(),
    };
    weighted_loss_into(targets, preds, masks, cfg, &mut report)?;
    Ok(report)
}

/// As [`weighted_loss`], reusing the gradient buffers of `report`, which must
/// hold one correctly sized heatmap and offset field per prediction.
pub fn weighted_loss_into<T: Scalar>(
    targets: &[JointTargets<T>],
    preds: &[Prediction<T>],
    masks: &[&Heatmap<T>],
    cfg: &LossConfig<T>,
    report: &mut LossReport<T>,
) -> Result<()> {
    if targets.len() != preds.len() || targets.len() != masks.len() {
        return Err(Error::InvalidArgument(format!(
            "{} targets, {} predictions, {} masks",
            targets.len(),
            preds.len(),
            masks.len()
        )));
    }
    if report.grad_heatmap.len() != preds.len() || report.grad_offsets.len() != preds.len() {
        return Err(Error::InvalidArgument(
            "gradient buffers do not match predictions".into(),
        ));
    }
    if !(cfg.alpha >= T::zero()) {
        return Err(Error::InvalidArgument("alpha must be >= 0".into()));
    }
    let active = targets.iter().filter(|t| t.active).count();
    if active == 0 {
        return Err(Error::NoLabeledJoints);
    }
    let scale = T::one() / T::from_usize_lossy(active);
    let alpha = cfg.alpha;

    let per_joint: Vec<Result<(T, T)>> = targets
        .par_iter()
        .zip(preds.par_iter())
        .zip(masks.par_iter())
        .zip(
            report
                .grad_heatmap
                .par_iter_mut()
                .zip(report.grad_offsets.par_iter_mut()),
        )
        .map(|(((t, p), m), (gh, go))| joint_loss_into(t, p, m, cfg, scale, gh, go))
        .collect();

    let mut heatmap_sum = T::zero();
    let mut offset_sum = T::zero();
    for r in per_joint {
        let (h, o) = r?;
        heatmap_sum += h;
        offset_sum += o;
    }
    report.heatmap_term = heatmap_sum * scale;
    report.offset_term = offset_sum * scale;
    report.total = report.heatmap_term + alpha * report.offset_term;
    report.alpha = alpha;
    report.active_joints = active;
    Ok(())
}

/// One joint's unscaled `(heatmap, offset)` terms. Gradients are written into
/// `gh`/`go`, multiplied by `scale` (heatmap) and `alpha * scale` (offsets);
/// inactive joints get zero terms and zero gradients.
pub fn joint_loss_into<T: Scalar>(
    t: &JointTargets<T>,
    p: &Prediction<T>,
    mask: &Heatmap<T>,
    cfg: &LossConfig<T>,
    scale: T,
    gh: &mut Heatmap<T>,
    go: &mut OffsetField<T>,
) -> Result<(T, T)> {
    t.heatmap.ensure_matches(&p.heatmap)?;
    gh.ensure_matches(&p.heatmap)?;
    go.ensure_matches(&p.offsets)?;
    if !t.active {
        gh.values.iter_mut().for_each(|g| *g = T::zero());
        go.dx
            .iter_mut()
            .chain(go.dy.iter_mut())
            .for_each(|g| *g = T::zero());
        return Ok((T::zero(), T::zero()));
    }
    let h = match cfg.heatmap_loss {
        HeatmapLoss::L2 => {
            heatmap_l2_into(&t.heatmap.values, &p.heatmap.values, &mut gh.values, scale)
        }
        HeatmapLoss::BinaryCe => {
            binary_ce_into(&t.heatmap.values, &p.heatmap.values, &mut gh.values, scale)
        }
    };
    let o = match cfg.offset_loss {
        Some(kind) => {
            offset_masked_into(kind, &t.offsets, &p.offsets, mask, go, cfg.alpha * scale)?
        }
        None => {
            go.dx
                .iter_mut()
                .chain(go.dy.iter_mut())
                .for_each(|g| *g = T::zero());
            T::zero()
        }
    };
    Ok((h, o))
}

/// Stage-1 objective: L2 heatmap regression plus L1 offsets weighted by the
/// target heatmap itself.
pub fn stage1_loss<T: Scalar>(
    targets: &[JointTargets<T>],
    preds: &[Prediction<T>],
    alpha: T,
) -> Result<LossReport<T>> {
    let masks: Vec<&Heatmap<T>> = targets.iter().map(|t| &t.heatmap).collect();
    weighted_loss(targets, preds, &masks, &LossConfig::cal(alpha))
}

/// Stage-2 objective: as stage 1 with the offsets weighted by the batch's
/// mixed Gaussian masks.
pub fn stage2_loss<T: Scalar>(
    targets: &[JointTargets<T>],
    preds: &[Prediction<T>],
    masks: &MaskSet<T>,
    alpha: T,
) -> Result<LossReport<T>> {
    let masks: Vec<&Heatmap<T>> = masks.masks.iter().collect();
    weighted_loss(targets, preds, &masks, &LossConfig::cal(alpha))
}
