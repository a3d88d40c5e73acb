//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use cal_core::codec::{encode_offsets, encode_weighted};
use cal_core::loss::{JointTargets, Prediction};
use cal_core::*;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;

/// Central differences of `f` at `x`.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let x0 = x[i];
            x[i] = x0 + h;
            let up = f(&x);
            x[i] = x0 - h;
            let down = f(&x);
            x[i] = x0;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|)` in the Euclidean norm; 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Prediction tensors flattened as `[heatmap..., dx..., dy...]` per joint.
pub fn flatten(preds: &[Prediction<f64>]) -> Vec<f64> {
    preds
        .iter()
        .flat_map(|p| {
            p.heatmap
                .values
                .iter()
                .chain(&p.offsets.dx)
                .chain(&p.offsets.dy)
                .copied()
        })
        .collect()
}

pub fn unflatten(x: &[f64], template: &[Prediction<f64>]) -> Vec<Prediction<f64>> {
    let mut out = template.to_vec();
    let mut it = x.iter().copied();
    for p in &mut out {
        for v in p
            .heatmap
            .values
            .iter_mut()
            .chain(p.offsets.dx.iter_mut())
            .chain(p.offsets.dy.iter_mut())
        {
            *v = it.next().unwrap();
        }
    }
    out
}

/// Residual in `[-1.5, 1.5]` at least `gap` away from 0 and from +-1.
pub fn off_kink<R: Rng>(rng: &mut R, gap: f64) -> f64 {
    loop {
        let d: f64 = rng.random_range(-1.5..1.5);
        if d.abs() > gap && (d.abs() - 1.0).abs() > gap {
            return d;
        }
    }
}

/// A small random batch with its supervision and predictions whose offset
/// residuals stay away from the penalty kinks.
pub fn random_instance<R: Rng>(
    rng: &mut R,
    grid: GridSpec64,
    samples: usize,
    joints: usize,
) -> (Batch64, Vec<JointTargets<f64>>, Vec<Prediction<f64>>) {
    let batch_samples = (0..samples)
        .map(|s| Sample {
            joints: (0..joints)
                .map(|k| {
                    if rng.random_bool(0.15) {
                        JointTarget::unlabeled(k)
                    } else {
                        let x = rng.random_range(0.0..(grid.width - 1) as f64);
                        let y = rng.random_range(0.0..(grid.height - 1) as f64);
                        JointTarget::labeled(k, Vec2::new(x, y))
                    }
                })
                .collect(),
            source_id: s.to_string(),
            crop: None,
        })
        .collect();
    let batch = Batch::new(batch_samples, grid).unwrap();
    let targets: Vec<JointTargets<f64>> = batch
        .joints()
        .map(|j| JointTargets {
            heatmap: encode_weighted(j, &grid, 1.5, 3.0),
            offsets: encode_offsets(j, &grid, 3.0),
            active: j.is_trainable() && !clip_disc(j.position, 3.0, &grid).is_empty(),
        })
        .collect();
    let preds = targets
        .iter()
        .map(|t| {
            let heatmap = Heatmap::from_values(
                grid,
                t.heatmap
                    .values
                    .iter()
                    .map(|v| v + rng.random_range(-0.5..0.5))
                    .collect(),
            )
            .unwrap();
            let dx = t
                .offsets
                .dx
                .iter()
                .map(|v| v + off_kink(rng, 1e-2))
                .collect();
            let dy = t
                .offsets
                .dy
                .iter()
                .map(|v| v + off_kink(rng, 1e-2))
                .collect();
            Prediction {
                heatmap,
                offsets: OffsetField::from_channels(grid, dx, dy).unwrap(),
            }
        })
        .collect();
    (batch, targets, preds)
}
