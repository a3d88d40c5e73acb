//! Target encoders and coordinate decoders.
//!
//! Encoders turn one [`JointTarget`] into the dense supervision grids: a plain
//! Gaussian `C`, a binary disc `B`, the Gaussian-weighted disc `G = B * C` and
//! the offset field `O`. Decoders take the arg-max cell of a heatmap and,
//! optionally, add the offset vector stored at that cell.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip_disc, Cell, GridSpec, Heatmap, JointTarget, OffsetField, Vec2};
use crate::rng::seeded;
use crate::scalar::Scalar;

pub const DEFAULT_SIGMA: f64 = 2.0;
pub const DEFAULT_RADIUS: f64 = 4.0;

/// `exp(-(t - c)^2 / (2 sigma^2))` along one axis.
fn axis_kernel<T: Scalar>(n: usize, center: T, sigma: T) -> Vec<T> {
    let denom = T::lit(2.0) * sigma * sigma;
    (0..n)
        .map(|i| {
            let d = T::from_usize_lossy(i) - center;
            (-(d * d) / denom).exp()
        })
        .collect()
}

/// Plain Gaussian heatmap `C(p) = exp(-|p - y|^2 / (2 sigma^2))` over the whole grid.
/// Unlabeled joints yield an all-zero map.
pub fn encode_gaussian<T: Scalar>(
    joint: &JointTarget<T>,
    grid: &GridSpec<T>,
    sigma: T,
) -> Heatmap<T> {
    let mut hm = Heatmap::zeros(*grid);
    if !joint.visibility.is_labeled() || !joint.position.is_finite() {
        return hm;
    }
    let gx = axis_kernel(grid.width, joint.position.x, sigma);
    let gy = axis_kernel(grid.height, joint.position.y, sigma);
    for (row, &wy) in hm.values.chunks_mut(grid.width).zip(&gy) {
        for (v, &wx) in row.iter_mut().zip(&gx) {
            *v = wx * wy;
        }
    }
    hm
}

/// Binary disc: one on every cell within `radius` of the joint.
pub fn encode_binary<T: Scalar>(
    joint: &JointTarget<T>,
    grid: &GridSpec<T>,
    radius: T,
) -> Heatmap<T> {
    let mut hm = Heatmap::zeros(*grid);
    if !joint.visibility.is_labeled() {
        return hm;
    }
    for cell in clip_disc(joint.position, radius, grid) {
        hm.set(cell, T::one());
    }
    hm
}

/// Offset field `y - p` on the disc support, zero elsewhere.
pub fn encode_offsets<T: Scalar>(
    joint: &JointTarget<T>,
    grid: &GridSpec<T>,
    radius: T,
) -> OffsetField<T> {
    let mut of = OffsetField::zeros(*grid);
    if !joint.visibility.is_labeled() {
        return of;
    }
    for cell in clip_disc(joint.position, radius, grid) {
        let i = grid.index(cell);
        let p = cell.to_point::<T>();
        of.dx[i] = joint.position.x - p.x;
        of.dy[i] = joint.position.y - p.y;
    }
    of
}

/// Gaussian-weighted disc `G = B * C`.
pub fn encode_weighted<T: Scalar>(
    joint: &JointTarget<T>,
    grid: &GridSpec<T>,
    sigma: T,
    radius: T,
) -> Heatmap<T> {
    let mut hm = Heatmap::zeros(*grid);
    if !joint.visibility.is_labeled() {
        return hm;
    }
    let denom = T::lit(2.0) * sigma * sigma;
    for cell in clip_disc(joint.position, radius, grid) {
        let d2 = (cell.to_point::<T>() - joint.position).norm_sq();
        hm.set(cell, (-d2 / denom).exp());
    }
    hm
}

/// All supervision grids for one joint.
#[derive(Debug, Clone, PartialEq)]
pub struct JointEncoding<T> {
    pub gaussian: Heatmap<T>,
    pub binary: Heatmap<T>,
    pub weighted: Heatmap<T>,
    pub offsets: OffsetField<T>,
}

pub fn encode_joint<T: Scalar>(
    joint: &JointTarget<T>,
    grid: &GridSpec<T>,
    sigma: T,
    radius: T,
) -> JointEncoding<T> {
    JointEncoding {
        gaussian: encode_gaussian(joint, grid, sigma),
        binary: encode_binary(joint, grid, radius),
        weighted: encode_weighted(joint, grid, sigma, radius),
        offsets: encode_offsets(joint, grid, radius),
    }
}

/// Arg-max cell and its value. Ties resolve to the smallest row-major index;
/// NaN cells are skipped.
pub fn decode_argmax<T: Scalar>(hm: &Heatmap<T>) -> Result<(Cell, T)> {
    let mut best: Option<(usize, T)> = None;
    for (i, &v) in hm.values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    let (i, v) = best.ok_or(Error::AllNan)?;
    Ok((hm.grid.cell_at(i), v))
}

/// Arg-max cell refined by the offset stored there.
pub fn decode_with_offset<T: Scalar>(hm: &Heatmap<T>, of: &OffsetField<T>) -> Result<(Vec2<T>, T)> {
    hm.grid.ensure_same(&of.grid)?;
    let (cell, score) = decode_argmax(hm)?;
    Ok((cell.to_point::<T>() + of.get(cell), score))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    ArgmaxOnly,
    WithOffset,
}

/// Decode error summary in input pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizationStats {
    pub trials: usize,
    pub mean_abs_x: f64,
    pub mean_abs_y: f64,
    pub mean_error: f64,
    pub max_error: f64,
}

/// Monte-Carlo decode error for joints drawn uniformly over the grid interior
/// (`[0.5, side - 1.5]` on each axis), reported in input pixels.
pub fn quantization_error_stats<T: Scalar>(
    grid: &GridSpec<T>,
    n_trials: usize,
    mode: DecodeMode,
    sigma: T,
    radius: T,
    seed: u64,
) -> Result<QuantizationStats> {
    grid.validate()?;
    if n_trials == 0 {
        return Err(Error::InvalidArgument("n_trials must be >= 1".into()));
    }
    let mut rng = seeded(seed);
    let hi_x = grid.width as f64 - 1.5;
    let hi_y = grid.height as f64 - 1.5;
    let stride = grid.stride.to_f64_lossy();
    let (mut sx, mut sy, mut se, mut max) = (0.0, 0.0, 0.0, 0.0f64);
    for _ in 0..n_trials {
        let y = Vec2::new(
            T::lit(rng.random_range(0.5..=hi_x)),
            T::lit(rng.random_range(0.5..=hi_y)),
        );
        let joint = JointTarget::labeled(0, y);
        let decoded = match mode {
            DecodeMode::ArgmaxOnly => decode_argmax(&encode_gaussian(&joint, grid, sigma))?
                .0
                .to_point::<T>(),
            DecodeMode::WithOffset => {
                decode_with_offset(
                    &encode_weighted(&joint, grid, sigma, radius),
                    &encode_offsets(&joint, grid, radius),
                )?
                .0
            }
        };
        let err = decoded - y;
        let ex = err.x.to_f64_lossy().abs() * stride;
        let ey = err.y.to_f64_lossy().abs() * stride;
        let e = ex.hypot(ey);
        sx += ex;
        sy += ey;
        se += e;
        max = max.max(e);
    }
    let n = n_trials as f64;
    Ok(QuantizationStats {
        trials: n_trials,
        mean_abs_x: sx / n,
        mean_abs_y: sy / n,
        mean_error: se / n,
        max_error: max,
    })
}
