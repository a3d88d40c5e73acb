//! Desk-scale experiment driver.
//!
//! There is no network here: the predicted heatmaps and offset fields of a
//! batch are free tensors, initialized as noisy renderings of the ground
//! truth and optimized directly on the two-stage objective. Stage 1 weighs
//! the offset loss by the target heatmap; stage 2 refits the displacement
//! mixture from the current predictions at every step and weighs the offset
//! loss by the resulting masks.
//!
//! The optimizer is block-preconditioned gradient descent. Every joint's
//! heatmap is stepped with `lr * N * n_cells * grad`, which turns the L2 term
//! into `h -= 2 lr (h - t)` per cell. Offsets are stepped with
//! `lr * N * (sum(mask) + eps) / alpha * grad`, i.e. `lr * mask * rho'(delta)`
//! per cell; for L1 the step is the proximal (soft-threshold) operator, so a
//! residual is never pushed past zero.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{
    decode_argmax, encode_binary, encode_gaussian, encode_offsets, encode_weighted,
};
use crate::error::{file_err, Error, Result};
use crate::geometry::{
    clip_disc, to_input_coords, Batch, GridSpec, Heatmap, OffsetField, Vec2, Visibility,
};
use crate::gmm::{
    collect_displacements_from, em_fit, fill_mask_set, sample_stencil, EmConfig, GaussianMixture,
    MaskSet, SAMPLES_PER_COMPONENT,
};
use crate::ingest::{
    render_predictions, synth_batch, CocoAnnotation, CocoDocument, PredictionNoise, DEFAULT_MARGIN,
};
use crate::loss::{
    joint_loss_into, HeatmapLoss, JointTargets, LossConfig, OffsetLoss, Prediction, MASK_EPSILON,
};
use crate::metrics::{
    ap_ar, default_kappas, default_thresholds, evaluate_instance, oks_points, ApSummary,
};
use crate::rng::derive;
use crate::scalar::Scalar;

pub const SCHEMA_VERSION: u32 = 1;
/// Stage-2 steps between stored mixture snapshots.
pub const SNAPSHOT_EVERY: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeatmapType {
    Binary,
    GaussianWeighted,
    PlainGaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OffsetLossKind {
    L1,
    SmoothL1,
    L2,
    None,
}

impl OffsetLossKind {
    pub fn as_loss(self) -> Option<OffsetLoss> {
        match self {
            OffsetLossKind::L1 => Some(OffsetLoss::L1),
            OffsetLossKind::SmoothL1 => Some(OffsetLoss::SmoothL1),
            OffsetLossKind::L2 => Some(OffsetLoss::L2),
            OffsetLossKind::None => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OffsetMask {
    Binary,
    TargetG,
    Mgm,
}

/// Where the offset weights of one step came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSource {
    Binary,
    TargetG,
    Mgm,
    /// Too few displacement samples for the mixture; target heatmap used.
    FallbackTargetG,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", default)]
pub struct PipelineConfig<T> {
    pub grid: GridSpec<T>,
    pub sigma: T,
    pub radius: T,
    pub alpha: T,
    pub heatmap_type: HeatmapType,
    pub offset_loss: OffsetLossKind,
    pub offset_mask: OffsetMask,
    pub gmm_components: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub learning_rate: T,
    pub seed: u64,
    /// Noise of the initial prediction rendering.
    pub init: PredictionNoise<T>,
}

impl<T: Scalar> Default for PipelineConfig<T> {
    fn default() -> Self {
        let grid = GridSpec {
            width: 32,
            height: 24,
            stride: T::lit(4.0),
        };
        Self {
            gmm_components: default_components(&grid),
            grid,
            sigma: T::lit(crate::codec::DEFAULT_SIGMA),
            radius: T::lit(crate::codec::DEFAULT_RADIUS),
            alpha: T::one(),
            heatmap_type: HeatmapType::GaussianWeighted,
            offset_loss: OffsetLossKind::L1,
            offset_mask: OffsetMask::Mgm,
            stage1_steps: 1000,
            stage2_steps: 1000,
            learning_rate: T::lit(1e-2),
            seed: 0,
            init: PredictionNoise::default(),
        }
    }
}

/// One mixture component for inputs whose shorter side is at most 128 px,
/// two otherwise.
pub fn default_components<T: Scalar>(grid: &GridSpec<T>) -> usize {
    let extent = grid.input_extent();
    if extent.x.min(extent.y) <= T::lit(128.0) {
        1
    } else {
        2
    }
}

impl<T: Scalar> PipelineConfig<T> {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let positive = |name: &str, v: T| {
            if v > T::zero() && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("sigma", self.sigma)?;
        positive("radius", self.radius)?;
        positive("learning_rate", self.learning_rate)?;
        if !(self.alpha >= T::zero() && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if self.gmm_components == 0 {
            return Err(Error::Config("gmm_components must be >= 1".into()));
        }
        if self.offset_mask == OffsetMask::Mgm && self.offset_loss == OffsetLossKind::None {
            return Err(Error::Config(
                "offset_mask = mgm requires an offset loss".into(),
            ));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.stage1_steps + self.stage2_steps
    }

    fn loss_config(&self) -> LossConfig<T> {
        LossConfig {
            alpha: self.alpha,
            heatmap_loss: match self.heatmap_type {
                HeatmapType::Binary => HeatmapLoss::BinaryCe,
                _ => HeatmapLoss::L2,
            },
            offset_loss: self.offset_loss.as_loss(),
        }
    }

    fn stencil_radius(&self) -> usize {
        self.radius.ceil().to_usize().unwrap_or(1).max(1)
    }
}

/// Named pipeline variants used by the sweep and ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Plain Gaussian heatmap, L2, arg-max decoding only.
    HeatmapOnly,
    /// Gaussian-weighted heatmap, masked L1 offsets, two-stage schedule.
    Offset,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::HeatmapOnly => "heatmap-only",
            Mode::Offset => "offset",
        }
    }

    pub fn apply<T: Scalar>(self, cfg: &PipelineConfig<T>) -> PipelineConfig<T> {
        let mut c = cfg.clone();
        match self {
            Mode::HeatmapOnly => {
                c.heatmap_type = HeatmapType::PlainGaussian;
                c.offset_loss = OffsetLossKind::None;
                c.offset_mask = OffsetMask::TargetG;
            }
            Mode::Offset => {
                c.heatmap_type = HeatmapType::GaussianWeighted;
                c.offset_loss = OffsetLossKind::L1;
                c.offset_mask = OffsetMask::Mgm;
            }
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct StepRecord<T> {
    pub stage: u8,
    pub step: usize,
    pub total: T,
    pub heatmap_term: T,
    pub offset_term: T,
    pub mask: MaskSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MixtureSnapshot<T> {
    pub step: usize,
    pub samples: usize,
    pub mixture: GaussianMixture<T>,
}

/// Final decode quality over the trained joints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeSummary {
    pub joints: usize,
    pub mean_error_px: f64,
    pub max_error_px: f64,
    pub mean_abs_x_px: f64,
    pub mean_abs_y_px: f64,
    /// Mean `|O_pred(c) - (y - c)|` at the arg-max cell `c`, heatmap cells.
    pub mean_argmax_offset_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct OksSummary<T> {
    pub instances: usize,
    pub mean_oks: T,
    pub ap: ApSummary<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RunReport<T> {
    pub schema_version: u32,
    pub config: PipelineConfig<T>,
    pub stage1: Vec<StepRecord<T>>,
    pub stage2: Vec<StepRecord<T>>,
    pub fallback_steps: usize,
    pub decode: DecodeSummary,
    pub oks: OksSummary<T>,
    pub mixtures: Vec<MixtureSnapshot<T>>,
    /// Not serialized, so reports stay byte-identical across runs.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl<T: Scalar> RunReport<T> {
    pub fn steps(&self) -> impl Iterator<Item = &StepRecord<T>> {
        self.stage1.iter().chain(&self.stage2)
    }
}

struct Supervision<T> {
    targets: Vec<JointTargets<T>>,
    weighted: Vec<Heatmap<T>>,
    binary: Vec<Heatmap<T>>,
}

fn build_supervision<T: Scalar>(batch: &Batch<T>, cfg: &PipelineConfig<T>) -> Supervision<T> {
    let grid = batch.grid;
    let per_joint: Vec<_> = batch
        .joints()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|j| {
            let active = j.is_trainable() && !clip_disc(j.position, cfg.radius, &grid).is_empty();
            let weighted = encode_weighted(j, &grid, cfg.sigma, cfg.radius);
            let binary = encode_binary(j, &grid, cfg.radius);
            let heatmap = match cfg.heatmap_type {
                HeatmapType::Binary => binary.clone(),
                HeatmapType::GaussianWeighted => weighted.clone(),
                HeatmapType::PlainGaussian => encode_gaussian(j, &grid, cfg.sigma),
            };
            let target = JointTargets {
                heatmap,
                offsets: encode_offsets(j, &grid, cfg.radius),
                active,
            };
            (target, weighted, binary)
        })
        .collect();
    let mut sup = Supervision {
        targets: Vec::with_capacity(per_joint.len()),
        weighted: Vec::with_capacity(per_joint.len()),
        binary: Vec::with_capacity(per_joint.len()),
    };
    for (t, w, b) in per_joint {
        sup.targets.push(t);
        sup.weighted.push(w);
        sup.binary.push(b);
    }
    sup
}

/// Evaluates the loss at `preds`, then takes one preconditioned step.
/// Returns the pre-step `(total, heatmap_term, offset_term)`.
///
/// Joints do not interact, so each joint is evaluated and updated in turn
/// through one reused gradient scratch; the result equals
/// [`weighted_loss`](crate::loss::weighted_loss) followed by the update.
fn descend<T: Scalar>(
    preds: &mut [Prediction<T>],
    targets: &[JointTargets<T>],
    masks: &[&Heatmap<T>],
    loss_cfg: &LossConfig<T>,
    lr: T,
) -> Result<(T, T, T)> {
    if preds.len() != targets.len() || preds.len() != masks.len() {
        return Err(Error::InvalidArgument(
            "predictions, targets and masks differ in length".into(),
        ));
    }
    let active = targets.iter().filter(|t| t.active).count();
    if active == 0 {
        return Err(Error::NoLabeledJoints);
    }
    let n_active = T::from_usize_lossy(active);
    let scale = T::one() / n_active;
    let alpha = loss_cfg.alpha;
    let grid = preds[0].heatmap.grid;
    let (mut gh, mut go) = (Heatmap::zeros(grid), OffsetField::zeros(grid));
    let mut terms = Vec::with_capacity(preds.len());
    for ((p, t), m) in preds.iter_mut().zip(targets).zip(masks) {
        terms.push(joint_loss_into(t, p, m, loss_cfg, scale, &mut gh, &mut go)?);
        if t.active {
            step_joint(p, t, m, &gh, &go, loss_cfg, lr, n_active);
        }
    }
    let (mut h_sum, mut o_sum) = (T::zero(), T::zero());
    for (h, o) in terms {
        h_sum += h;
        o_sum += o;
    }
    let (h, o) = (h_sum * scale, o_sum * scale);
    Ok((h + alpha * o, h, o))
}

#[allow(clippy::too_many_arguments)]
fn step_joint<T: Scalar>(
    p: &mut Prediction<T>,
    t: &JointTargets<T>,
    m: &Heatmap<T>,
    gh: &Heatmap<T>,
    go: &OffsetField<T>,
    loss_cfg: &LossConfig<T>,
    lr: T,
    n_active: T,
) {
    let h_scale = lr * n_active * T::from_usize_lossy(p.heatmap.values.len());
    for (v, &g) in p.heatmap.values.iter_mut().zip(&gh.values) {
        *v -= h_scale * g;
    }
    let alpha = loss_cfg.alpha;
    if alpha <= T::zero() {
        return;
    }
    match loss_cfg.offset_loss {
        None => {}
        Some(OffsetLoss::L1) => {
            let soft = |x: &mut T, target: T, tau: T| {
                let d = *x - target;
                let shrunk = (d.abs() - tau).max(T::zero());
                *x = target + d.signum() * shrunk;
            };
            let cells = m
                .values
                .iter()
                .zip(p.offsets.dx.iter_mut().zip(p.offsets.dy.iter_mut()))
                .zip(t.offsets.dx.iter().zip(&t.offsets.dy));
            for ((&w, (x, y)), (&tx, &ty)) in cells {
                if w > T::zero() {
                    soft(x, tx, lr * w);
                    soft(y, ty, lr * w);
                }
            }
        }
        Some(_) => {
            let o_scale = lr * n_active * (m.sum() + T::lit(MASK_EPSILON)) / alpha;
            for (v, &g) in p.offsets.dx.iter_mut().zip(&go.dx) {
                *v -= o_scale * g;
            }
            for (v, &g) in p.offsets.dy.iter_mut().zip(&go.dy) {
                *v -= o_scale * g;
            }
        }
    }
}

/// Runs the two-stage schedule on free prediction tensors initialized from
/// `batch` with `cfg.init` noise.
pub fn train_toy<T: Scalar>(batch: &Batch<T>, cfg: &PipelineConfig<T>) -> Result<RunReport<T>> {
    cfg.validate()?;
    batch.grid.ensure_same(&cfg.grid)?;
    let mut rng = derive(cfg.seed, 1);
    let (preds, _) = render_predictions(batch, cfg.sigma, cfg.radius, &cfg.init, &mut rng)?;
    train_from(batch, preds, cfg)
}

/// As [`train_toy`] from explicit initial predictions (aligned with
/// [`Batch::joints`]).
pub fn train_from<T: Scalar>(
    batch: &Batch<T>,
    mut preds: Vec<Prediction<T>>,
    cfg: &PipelineConfig<T>,
) -> Result<RunReport<T>> {
    cfg.validate()?;
    batch.grid.ensure_same(&cfg.grid)?;
    if preds.len() != batch.len() * batch.num_joints() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} joints",
            preds.len(),
            batch.len() * batch.num_joints()
        )));
    }
    let start = Instant::now();
    let sup = build_supervision(batch, cfg);
    if !sup.targets.iter().any(|t| t.active) {
        return Err(Error::NoLabeledJoints);
    }
    let loss_cfg = cfg.loss_config();
    let lr = cfg.learning_rate;

    let fixed_masks: Vec<&Heatmap<T>> = match cfg.offset_mask {
        OffsetMask::Binary => sup.binary.iter().collect(),
        OffsetMask::TargetG | OffsetMask::Mgm => sup.weighted.iter().collect(),
    };
    let fixed_source = match cfg.offset_mask {
        OffsetMask::Binary => MaskSource::Binary,
        _ => MaskSource::TargetG,
    };

    let check = |stage: &'static str, step: usize, v: T| {
        if v.is_finite() {
            Ok(())
        } else {
            Err(Error::Divergence { stage, step })
        }
    };

    let mut stage1 = Vec::with_capacity(cfg.stage1_steps);
    for step in 0..cfg.stage1_steps {
        let (total, h, o) = descend(&mut preds, &sup.targets, &fixed_masks, &loss_cfg, lr)?;
        check("stage1", step, total)?;
        stage1.push(StepRecord {
            stage: 1,
            step,
            total,
            heatmap_term: h,
            offset_term: o,
            mask: fixed_source,
        });
    }

    let mut stage2 = Vec::with_capacity(cfg.stage2_steps);
    let mut mixtures = Vec::new();
    let mut fallback_steps = 0;
    let mut mask_set = MaskSet {
        batch_id: String::new(),
        masks: Vec::new(),
    };
    let k = cfg.gmm_components;
    for step in 0..cfg.stage2_steps {
        let record = if cfg.offset_mask == OffsetMask::Mgm {
            let disp = collect_displacements_from(preds.iter().map(|p| &p.heatmap), batch)?;
            if disp.len() < SAMPLES_PER_COMPONENT * k {
                fallback_steps += 1;
                let (total, h, o) = descend(&mut preds, &sup.targets, &fixed_masks, &loss_cfg, lr)?;
                (total, h, o, MaskSource::FallbackTargetG)
            } else {
                let em = EmConfig {
                    seed: cfg.seed.wrapping_add(step as u64),
                    ..EmConfig::default()
                };
                let fit = em_fit(&disp, k, &em)?;
                let stencil = sample_stencil(&fit.mixture, cfg.stencil_radius())?;
                mask_set.batch_id = format!("step-{step}");
                fill_mask_set(&stencil, batch, &mut mask_set);
                if step % SNAPSHOT_EVERY == 0 || step + 1 == cfg.stage2_steps {
                    mixtures.push(MixtureSnapshot {
                        step,
                        samples: disp.len(),
                        mixture: fit.mixture.clone(),
                    });
                }
                let masks: Vec<&Heatmap<T>> = mask_set.masks.iter().collect();
                let (total, h, o) = descend(&mut preds, &sup.targets, &masks, &loss_cfg, lr)?;
                (total, h, o, MaskSource::Mgm)
            }
        } else {
            let (total, h, o) = descend(&mut preds, &sup.targets, &fixed_masks, &loss_cfg, lr)?;
            (total, h, o, fixed_source)
        };
        check("stage2", step, record.0)?;
        stage2.push(StepRecord {
            stage: 2,
            step,
            total: record.0,
            heatmap_term: record.1,
            offset_term: record.2,
            mask: record.3,
        });
    }

    let use_offsets = cfg.offset_loss != OffsetLossKind::None;
    let (decode, oks) = evaluate_predictions(batch, &preds, &sup.targets, use_offsets)?;
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        stage1,
        stage2,
        fallback_steps,
        decode,
        oks,
        mixtures,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Decodes every joint and scores the batch. Errors are averaged over active
/// joints; OKS uses the crop extent as the instance area.
fn evaluate_predictions<T: Scalar>(
    batch: &Batch<T>,
    preds: &[Prediction<T>],
    targets: &[JointTargets<T>],
    use_offsets: bool,
) -> Result<(DecodeSummary, OksSummary<T>)> {
    let grid = batch.grid;
    let stride = grid.stride.to_f64_lossy();
    let k = batch.num_joints();
    let mut decoded = Vec::with_capacity(preds.len());
    let (mut n, mut sum_e, mut max_e, mut sum_x, mut sum_y, mut sum_o) =
        (0usize, 0.0, 0.0f64, 0.0, 0.0, 0.0);
    for ((p, t), joint) in preds.iter().zip(targets).zip(batch.joints()) {
        if !joint.visibility.is_labeled() {
            decoded.push(Vec2::zero());
            continue;
        }
        let (cell, _) = decode_argmax(&p.heatmap)?;
        let c = cell.to_point::<T>();
        let off = p.offsets.get(cell);
        let y_hat = if use_offsets { c + off } else { c };
        decoded.push(to_input_coords(y_hat, &grid));
        if !t.active {
            continue;
        }
        let err = y_hat - joint.position;
        let ex = err.x.to_f64_lossy().abs() * stride;
        let ey = err.y.to_f64_lossy().abs() * stride;
        let e = ex.hypot(ey);
        n += 1;
        sum_e += e;
        max_e = max_e.max(e);
        sum_x += ex;
        sum_y += ey;
        sum_o += (off - (joint.position - c)).norm().to_f64_lossy();
    }
    let nf = n.max(1) as f64;
    let decode = DecodeSummary {
        joints: n,
        mean_error_px: sum_e / nf,
        max_error_px: max_e,
        mean_abs_x_px: sum_x / nf,
        mean_abs_y_px: sum_y / nf,
        mean_argmax_offset_error: sum_o / nf,
    };

    let extent = grid.input_extent();
    let area = extent.x * extent.y;
    let kappas = default_kappas::<T>(k);
    let mut evals = Vec::with_capacity(batch.len());
    for (sample, pred) in batch.samples.iter().zip(decoded.chunks(k)) {
        if sample.labeled_count() == 0 {
            continue;
        }
        evals.push(evaluate_instance(pred, sample, &grid, area, &kappas)?);
    }
    let mean_oks = evals.iter().map(|e| e.oks).sum::<T>() / T::from_usize_lossy(evals.len().max(1));
    let ap = ap_ar(&evals, &default_thresholds())?;
    Ok((
        decode,
        OksSummary {
            instances: evals.len(),
            mean_oks,
            ap,
        },
    ))
}

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SynthData<T> {
    pub samples: usize,
    pub num_joints: usize,
    pub margin: T,
}

impl<T: Scalar> Default for SynthData<T> {
    fn default() -> Self {
        Self {
            samples: 64,
            num_joints: 17,
            margin: T::lit(DEFAULT_MARGIN),
        }
    }
}

/// Seeded synthetic ground truth on `grid`; the batch depends only on `seed`,
/// the data settings and the grid.
pub fn synthetic_batch<T: Scalar>(
    data: &SynthData<T>,
    grid: &GridSpec<T>,
    seed: u64,
) -> Result<Batch<T>> {
    let mut rng = derive(seed, 0);
    synth_batch(data.samples, data.num_joints, grid, data.margin, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub schema_version: u32,
    pub input_width: usize,
    pub input_height: usize,
    pub grid_width: usize,
    pub grid_height: usize,
    pub stride: f64,
    pub mode: String,
    pub mean_error_px: f64,
    pub max_error_px: f64,
    pub mean_oks: f64,
    pub ap: f64,
}

/// Heatmap stride of the backbone relative to its own input.
pub const HEATMAP_DOWNSAMPLE: usize = 4;

/// Grid for an input of `input` pixels, expressed in the pixel frame of the
/// largest input `reference_width` so errors are comparable across sizes.
pub fn resolution_grid<T: Scalar>(
    input: (usize, usize),
    reference_width: usize,
) -> Result<GridSpec<T>> {
    let (w, h) = input;
    if w % HEATMAP_DOWNSAMPLE != 0 || h % HEATMAP_DOWNSAMPLE != 0 {
        return Err(Error::Config(format!(
            "input size {w}x{h} must be divisible by {HEATMAP_DOWNSAMPLE}"
        )));
    }
    let stride = HEATMAP_DOWNSAMPLE as f64 * reference_width as f64 / w as f64;
    GridSpec::new(
        w / HEATMAP_DOWNSAMPLE,
        h / HEATMAP_DOWNSAMPLE,
        T::lit(stride),
    )
}

/// Trains every mode at every input size on identically seeded synthetic
/// data and records the final decode error in reference pixels.
pub fn sweep_resolution<T: Scalar>(
    base: &PipelineConfig<T>,
    inputs: &[(usize, usize)],
    modes: &[Mode],
    data: &SynthData<T>,
) -> Result<Vec<SweepRow>> {
    if inputs.len() < 2 {
        return Err(Error::Config(
            "a sweep needs at least two resolutions".into(),
        ));
    }
    if modes.is_empty() {
        return Err(Error::Config("a sweep needs at least one mode".into()));
    }
    let reference = inputs.iter().map(|r| r.0).max().unwrap();
    let jobs: Vec<((usize, usize), Mode)> = inputs
        .iter()
        .flat_map(|&r| modes.iter().map(move |&m| (r, m)))
        .collect();
    jobs.par_iter()
        .map(|&(input, mode)| {
            let grid = resolution_grid::<T>(input, reference)?;
            let mut cfg = mode.apply(base);
            cfg.grid = grid;
            let batch = synthetic_batch(data, &grid, cfg.seed)?;
            let report = train_toy(&batch, &cfg)?;
            Ok(SweepRow {
                schema_version: SCHEMA_VERSION,
                input_width: input.0,
                input_height: input.1,
                grid_width: grid.width,
                grid_height: grid.height,
                stride: grid.stride.to_f64_lossy(),
                mode: mode.name().into(),
                mean_error_px: report.decode.mean_error_px,
                max_error_px: report.decode.max_error_px,
                mean_oks: report.oks.mean_oks.to_f64_lossy(),
                ap: report.oks.ap.ap.to_f64_lossy(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    MaskType,
    HeatmapType,
    LossType,
    Strategy,
    Components,
}

impl AblationAxis {
    /// Variant names and configurations, derived from `base`.
    pub fn variants<T: Scalar>(self, base: &PipelineConfig<T>) -> Vec<(String, PipelineConfig<T>)> {
        let with = |name: &str, f: &dyn Fn(&mut PipelineConfig<T>)| {
            let mut c = base.clone();
            f(&mut c);
            (name.to_string(), c)
        };
        match self {
            AblationAxis::MaskType => vec![
                with("binary", &|c| c.offset_mask = OffsetMask::Binary),
                with("mgm", &|c| c.offset_mask = OffsetMask::Mgm),
            ],
            AblationAxis::HeatmapType => vec![
                with("binary", &|c| c.heatmap_type = HeatmapType::Binary),
                with("gaussian-weighted", &|c| {
                    c.heatmap_type = HeatmapType::GaussianWeighted
                }),
            ],
            AblationAxis::LossType => vec![
                with("l2", &|c| c.offset_loss = OffsetLossKind::L2),
                with("smooth-l1", &|c| c.offset_loss = OffsetLossKind::SmoothL1),
                with("l1", &|c| c.offset_loss = OffsetLossKind::L1),
            ],
            AblationAxis::Strategy => {
                let total = base.total_steps();
                vec![
                    with("one-stage", &|c| {
                        c.offset_mask = OffsetMask::Mgm;
                        c.stage1_steps = 0;
                        c.stage2_steps = total;
                    }),
                    with("two-stage", &|c| c.offset_mask = OffsetMask::Mgm),
                ]
            }
            AblationAxis::Components => (1..=3)
                .map(|k| with(&k.to_string(), &|c| c.gmm_components = k))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub schema_version: u32,
    pub axis: String,
    pub variant: String,
    pub mean_oks: f64,
    pub ap: f64,
    pub ar: f64,
    pub mean_error_px: f64,
    pub mean_argmax_offset_error: f64,
    pub fallback_steps: usize,
}

/// Runs every variant of `axis` on the same seeded batch. No ordering between
/// variants is implied.
pub fn run_ablation<T: Scalar>(
    axis: AblationAxis,
    base: &PipelineConfig<T>,
    batch: &Batch<T>,
) -> Result<Vec<AblationRow>> {
    let axis_name = serde_json::to_value(axis)?
        .as_str()
        .unwrap_or_default()
        .to_string();
    axis.variants(base)
        .par_iter()
        .map(|(name, cfg)| {
            let r = train_toy(batch, cfg)?;
            Ok(AblationRow {
                schema_version: SCHEMA_VERSION,
                axis: axis_name.clone(),
                variant: name.clone(),
                mean_oks: r.oks.mean_oks.to_f64_lossy(),
                ap: r.oks.ap.ap.to_f64_lossy(),
                ar: r.oks.ap.ar.to_f64_lossy(),
                mean_error_px: r.decode.mean_error_px,
                mean_argmax_offset_error: r.decode.mean_argmax_offset_error,
                fallback_steps: r.fallback_steps,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub schema_version: u32,
    pub id: String,
    pub oks: f64,
    pub labeled_joints: usize,
    pub mean_distance_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub schema_version: u32,
    pub instances: usize,
    pub mean_oks: f64,
    pub summary: ApSummary<f64>,
}

/// Scores predicted annotations against ground truth in image pixels.
///
/// Predictions are matched to ground truth by annotation `id` when both carry
/// one, otherwise by position. The instance area is the ground-truth bbox
/// area; ground-truth annotations without labeled joints are skipped.
pub fn evaluate_documents(
    gt: &CocoDocument,
    pred: &CocoDocument,
) -> Result<(Vec<EvalRow>, EvalSummary)> {
    let by_id: HashMap<u64, &CocoAnnotation> = pred
        .annotations
        .iter()
        .filter_map(|a| a.id.map(|id| (id, a)))
        .collect();
    let mut rows = Vec::new();
    let mut evals = Vec::new();
    for (i, g) in gt.annotations.iter().enumerate() {
        let p = match g.id.and_then(|id| by_id.get(&id)) {
            Some(p) => *p,
            None => pred.annotations.get(i).ok_or_else(|| {
                Error::InvalidArgument(format!("no prediction for ground-truth annotations[{i}]"))
            })?,
        };
        if p.keypoints.len() != g.keypoints.len() {
            return Err(Error::InvalidArgument(format!(
                "annotations[{i}]: {} predicted keypoint values, {} in ground truth",
                p.keypoints.len(),
                g.keypoints.len()
            )));
        }
        let point = |t: &[f64]| Vec2::new(t[0], t[1]);
        let gt_pts: Vec<Vec2<f64>> = g.keypoints.chunks(3).map(point).collect();
        let pred_pts: Vec<Vec2<f64>> = p.keypoints.chunks(3).map(point).collect();
        let vis: Vec<Visibility> = g
            .keypoints
            .chunks(3)
            .map(|t| Visibility::from_coco(t[2] as i64).unwrap_or(Visibility::Unlabeled))
            .collect();
        if !vis.iter().any(|v| v.is_labeled()) {
            continue;
        }
        let area = g.bbox[2] * g.bbox[3];
        let mut e = oks_points(
            &pred_pts,
            &gt_pts,
            &vis,
            area,
            &default_kappas(gt_pts.len()),
        )?;
        e.id = g.source_id(i);
        let dists: Vec<f64> = e.per_joint_distance.iter().flatten().copied().collect();
        rows.push(EvalRow {
            schema_version: SCHEMA_VERSION,
            id: e.id.clone(),
            oks: e.oks,
            labeled_joints: e.labeled_count,
            mean_distance_px: dists.iter().sum::<f64>() / dists.len() as f64,
        });
        evals.push(e);
    }
    let summary = ap_ar(&evals, &default_thresholds())?;
    let mean_oks = evals.iter().map(|e| e.oks).sum::<f64>() / evals.len() as f64;
    Ok((
        rows,
        EvalSummary {
            schema_version: SCHEMA_VERSION,
            instances: evals.len(),
            mean_oks,
            summary,
        },
    ))
}

/// Writes serializable rows as a headed CSV file.
pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes pretty JSON with a trailing newline.
pub fn write_json<V: Serialize + ?Sized>(path: &Path, value: &V) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(file_err(path))?;
    Ok(())
}

/// Flat per-step loss rows of a run.
pub fn step_rows<T: Scalar>(report: &RunReport<T>) -> Vec<StepRow> {
    report
        .steps()
        .map(|s| StepRow {
            schema_version: SCHEMA_VERSION,
            stage: s.stage,
            step: s.step,
            total: s.total.to_f64_lossy(),
            heatmap_term: s.heatmap_term.to_f64_lossy(),
            offset_term: s.offset_term.to_f64_lossy(),
            mask: s.mask,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub schema_version: u32,
    pub stage: u8,
    pub step: usize,
    pub total: f64,
    pub heatmap_term: f64,
    pub offset_term: f64,
    pub mask: MaskSource,
}
