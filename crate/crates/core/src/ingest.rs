//! COCO keypoint annotations in, synthetic oracle scenes out.
//!
//! Each annotation is treated as its own crop: the bbox maps linearly onto the
//! heatmap grid, `x_cell = (x - bbox_x) * width / bbox_w` (likewise for y).

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::codec::{encode_gaussian, encode_offsets};
use crate::error::{file_err, Error, Result};
use crate::geometry::{
    BBox, Batch, GridSpec, Heatmap, JointTarget, OffsetField, Sample, Vec2, Visibility,
};
use crate::loss::Prediction;
use crate::rng::seeded;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    pub image_id: u64,
    /// Flat `(x, y, v)` triplets in image pixels.
    pub keypoints: Vec<f64>,
    /// `[x, y, w, h]` in image pixels.
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_keypoints: Option<u64>,
}

impl CocoAnnotation {
    pub fn num_joints(&self) -> usize {
        self.keypoints.len() / 3
    }

    pub fn source_id(&self, index: usize) -> String {
        match self.id {
            Some(id) => id.to_string(),
            None => format!("image{}-ann{index}", self.image_id),
        }
    }
}

/// The subset of a COCO keypoint document this crate reads and writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoDocument {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
}

fn parse_err(record: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        record: record.into(),
        message: message.into(),
    }
}

/// Parses and validates a document, naming the first offending record.
pub fn parse_coco_document(text: &str) -> Result<CocoDocument> {
    let root: Value =
        serde_json::from_str(text).map_err(|e| parse_err("document", e.to_string()))?;
    let obj = root
        .as_object()
        .ok_or_else(|| parse_err("document", "top level must be an object"))?;
    let images = obj
        .get("images")
        .and_then(Value::as_array)
        .ok_or_else(|| parse_err("document", "missing `images` array"))?;
    let annotations = obj
        .get("annotations")
        .and_then(Value::as_array)
        .ok_or_else(|| parse_err("document", "missing `annotations` array"))?;

    let mut doc = CocoDocument {
        images: Vec::with_capacity(images.len()),
        annotations: Vec::with_capacity(annotations.len()),
    };
    for (i, v) in images.iter().enumerate() {
        let img: CocoImage = serde_json::from_value(v.clone())
            .map_err(|e| parse_err(format!("images[{i}]"), e.to_string()))?;
        doc.images.push(img);
    }
    let image_ids: HashSet<u64> = doc.images.iter().map(|im| im.id).collect();
    let mut width = None;
    for (i, v) in annotations.iter().enumerate() {
        let record = format!("annotations[{i}]");
        let ann: CocoAnnotation = serde_json::from_value(v.clone())
            .map_err(|e| parse_err(record.clone(), e.to_string()))?;
        if ann.keypoints.is_empty() || !ann.keypoints.len().is_multiple_of(3) {
            return Err(parse_err(
                record,
                format!(
                    "keypoints length {} is not a multiple of 3",
                    ann.keypoints.len()
                ),
            ));
        }
        if *width.get_or_insert(ann.keypoints.len()) != ann.keypoints.len() {
            return Err(parse_err(
                record,
                "keypoint count differs from earlier annotations",
            ));
        }
        if !(ann.bbox[2] > 0.0 && ann.bbox[3] > 0.0) || ann.bbox.iter().any(|b| !b.is_finite()) {
            return Err(parse_err(record, format!("degenerate bbox {:?}", ann.bbox)));
        }
        if ann.keypoints.iter().any(|k| !k.is_finite()) {
            return Err(parse_err(record, "non-finite keypoint value"));
        }
        if let Some(bad) = ann
            .keypoints
            .chunks(3)
            .find(|t| Visibility::from_coco(t[2] as i64).is_none() || t[2].fract() != 0.0)
        {
            return Err(parse_err(
                record,
                format!("visibility flag {} not in {{0,1,2}}", bad[2]),
            ));
        }
        if !image_ids.contains(&ann.image_id) {
            return Err(parse_err(
                record,
                format!("unknown image_id {}", ann.image_id),
            ));
        }
        doc.annotations.push(ann);
    }
    Ok(doc)
}

pub fn read_coco_document(path: &Path) -> Result<CocoDocument> {
    parse_coco_document(&std::fs::read_to_string(path).map_err(file_err(path))?)
}

/// Maps one annotation into a sample on `grid`.
pub fn annotation_to_sample<T: Scalar>(
    ann: &CocoAnnotation,
    index: usize,
    grid: &GridSpec<T>,
) -> Sample<T> {
    let [bx, by, bw, bh] = ann.bbox;
    let sx = grid.width as f64 / bw;
    let sy = grid.height as f64 / bh;
    let joints = ann
        .keypoints
        .chunks(3)
        .enumerate()
        .map(|(k, t)| {
            let visibility = Visibility::from_coco(t[2] as i64).expect("validated on parse");
            if !visibility.is_labeled() {
                return JointTarget::unlabeled(k);
            }
            let position = Vec2::new(T::lit((t[0] - bx) * sx), T::lit((t[1] - by) * sy));
            JointTarget {
                joint_index: k,
                position,
                visibility,
                out_of_bounds: !grid.contains_point(position),
            }
        })
        .collect();
    Sample {
        joints,
        source_id: ann.source_id(index),
        crop: Some(BBox {
            x: T::lit(bx),
            y: T::lit(by),
            w: T::lit(bw),
            h: T::lit(bh),
        }),
    }
}

/// Inverse of [`annotation_to_sample`]. Unlabeled joints are written as `(0, 0, 0)`.
pub fn sample_to_annotation<T: Scalar>(
    sample: &Sample<T>,
    grid: &GridSpec<T>,
    image_id: u64,
) -> Result<CocoAnnotation> {
    let crop = sample.crop.ok_or_else(|| {
        Error::InvalidArgument(format!("sample {} has no crop", sample.source_id))
    })?;
    let (bx, by, bw, bh) = (
        crop.x.to_f64_lossy(),
        crop.y.to_f64_lossy(),
        crop.w.to_f64_lossy(),
        crop.h.to_f64_lossy(),
    );
    let mut keypoints = Vec::with_capacity(sample.joints.len() * 3);
    for j in &sample.joints {
        if j.visibility.is_labeled() {
            keypoints.push(bx + j.position.x.to_f64_lossy() * bw / grid.width as f64);
            keypoints.push(by + j.position.y.to_f64_lossy() * bh / grid.height as f64);
        } else {
            keypoints.extend([0.0, 0.0]);
        }
        keypoints.push(j.visibility.to_coco() as f64);
    }
    Ok(CocoAnnotation {
        id: sample.source_id.parse().ok(),
        image_id,
        keypoints,
        bbox: [bx, by, bw, bh],
        num_keypoints: Some(sample.labeled_count() as u64),
    })
}

/// Loads up to `limit` samples, skipping annotations without labeled keypoints.
pub fn load_coco_keypoints<T: Scalar>(
    path: &Path,
    grid: &GridSpec<T>,
    limit: Option<usize>,
) -> Result<Vec<Sample<T>>> {
    let doc = read_coco_document(path)?;
    samples_from_document(&doc, grid, limit)
}

pub fn samples_from_document<T: Scalar>(
    doc: &CocoDocument,
    grid: &GridSpec<T>,
    limit: Option<usize>,
) -> Result<Vec<Sample<T>>> {
    grid.validate()?;
    let limit = limit.unwrap_or(usize::MAX);
    Ok(doc
        .annotations
        .iter()
        .enumerate()
        .map(|(i, ann)| annotation_to_sample(ann, i, grid))
        .filter(|s| s.labeled_count() > 0)
        .take(limit)
        .collect())
}

/// Noise applied when rendering initial "predictions" from ground truth.
/// All quantities are in heatmap-cell units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", default)]
pub struct PredictionNoise<T> {
    /// Covariance of the displacement injected into predicted heatmap peaks.
    pub noise_cov: [[T; 2]; 2],
    /// Half-width of the uniform per-cell noise added to predicted heatmaps.
    pub pixel_noise: T,
    /// Standard deviation of Gaussian noise added to predicted offsets.
    pub offset_noise: T,
}

impl<T: Scalar> Default for PredictionNoise<T> {
    fn default() -> Self {
        Self {
            noise_cov: [[T::one(), T::zero()], [T::zero(), T::one()]],
            pixel_noise: T::zero(),
            offset_noise: T::lit(0.05),
        }
    }
}

/// Parameters of a synthetic scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SynthConfig<T> {
    pub samples: usize,
    pub num_joints: usize,
    pub grid: GridSpec<T>,
    pub sigma: T,
    pub radius: T,
    pub noise: PredictionNoise<T>,
    /// Ground-truth joints are drawn from `[margin, side - 1 - margin]`.
    pub margin: T,
    pub seed: u64,
}

pub const DEFAULT_MARGIN: f64 = 3.0;

impl<T: Scalar> SynthConfig<T> {
    pub fn new(samples: usize, grid: GridSpec<T>, seed: u64) -> Self {
        Self {
            samples,
            num_joints: 17,
            grid,
            sigma: T::lit(crate::codec::DEFAULT_SIGMA),
            radius: T::lit(crate::codec::DEFAULT_RADIUS),
            noise: PredictionNoise::default(),
            margin: T::lit(DEFAULT_MARGIN),
            seed,
        }
    }
}

/// A synthetic batch with "predictions" displaced by known noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene<T> {
    pub batch: Batch<T>,
    /// Aligned with [`Batch::joints`].
    pub predictions: Vec<Prediction<T>>,
    /// The exact peak displacement drawn for each joint.
    pub deltas: Vec<Vec2<T>>,
}

/// Lower Cholesky factor of a symmetric PSD 2x2 matrix.
fn cholesky2<T: Scalar>(c: &[[T; 2]; 2]) -> Result<[[T; 2]; 2]> {
    let (a, b, d) = (c[0][0], c[0][1], c[1][1]);
    let tol = T::lit(1e-12) * (T::one() + a.abs() + d.abs());
    if c[0][1] != c[1][0] || a < T::zero() || d < T::zero() || a * d - b * b < -tol {
        return Err(Error::InvalidArgument(
            "noise covariance must be symmetric positive semi-definite".into(),
        ));
    }
    let l11 = a.sqrt();
    let l21 = if l11 > T::zero() { b / l11 } else { T::zero() };
    let l22 = (d - l21 * l21).max(T::zero()).sqrt();
    Ok([[l11, T::zero()], [l21, l22]])
}

/// Predictions and the peak displacement drawn for each joint.
pub type Rendered<T> = (Vec<Prediction<T>>, Vec<Vec2<T>>);

/// Renders one noisy prediction per joint of `batch`.
///
/// Heatmaps are Gaussians (width `sigma`) centered at `y + delta`,
/// `delta ~ N(0, noise_cov)`, plus uniform per-cell noise; offsets are the
/// true offset field plus Gaussian noise. Unlabeled joints get all-zero
/// tensors and a zero delta. Returns predictions and deltas in
/// [`Batch::joints`] order.
pub fn render_predictions<T: Scalar, R: Rng>(
    batch: &Batch<T>,
    sigma: T,
    radius: T,
    noise: &PredictionNoise<T>,
    rng: &mut R,
) -> Result<Rendered<T>> {
    let chol = cholesky2(&noise.noise_cov)?;
    let grid = batch.grid;
    let pix = noise.pixel_noise.to_f64_lossy();
    let off_sd = noise.offset_noise;
    let mut predictions = Vec::with_capacity(batch.len() * batch.num_joints());
    let mut deltas = Vec::with_capacity(predictions.capacity());
    for joint in batch.joints() {
        if !joint.visibility.is_labeled() {
            predictions.push(Prediction {
                heatmap: Heatmap::zeros(grid),
                offsets: OffsetField::zeros(grid),
            });
            deltas.push(Vec2::zero());
            continue;
        }
        let z0: f64 = StandardNormal.sample(rng);
        let z1: f64 = StandardNormal.sample(rng);
        let (z0, z1) = (T::lit(z0), T::lit(z1));
        let delta = Vec2::new(chol[0][0] * z0, chol[1][0] * z0 + chol[1][1] * z1);
        let peak = JointTarget {
            position: joint.position + delta,
            ..*joint
        };
        let mut heatmap = encode_gaussian(&peak, &grid, sigma);
        if pix > 0.0 {
            for v in &mut heatmap.values {
                *v += T::lit(rng.random_range(-pix..=pix));
            }
        }
        let mut offsets = encode_offsets(joint, &grid, radius);
        if off_sd > T::zero() {
            for v in offsets.dx.iter_mut().chain(offsets.dy.iter_mut()) {
                let z: f64 = StandardNormal.sample(rng);
                *v += off_sd * T::lit(z);
            }
        }
        predictions.push(Prediction { heatmap, offsets });
        deltas.push(delta);
    }
    Ok((predictions, deltas))
}

/// Draws ground-truth joints uniformly over the grid interior.
pub fn synth_batch<T: Scalar, R: Rng>(
    samples: usize,
    num_joints: usize,
    grid: &GridSpec<T>,
    margin: T,
    rng: &mut R,
) -> Result<Batch<T>> {
    grid.validate()?;
    if samples == 0 || num_joints == 0 {
        return Err(Error::InvalidArgument(
            "synthetic scene needs samples and joints".into(),
        ));
    }
    let span = |side: usize| {
        let hi = side as f64 - 1.0;
        let m = margin.to_f64_lossy().clamp(0.0, hi / 2.0);
        (m, hi - m)
    };
    let (x_lo, x_hi) = span(grid.width);
    let (y_lo, y_hi) = span(grid.height);
    let samples = (0..samples)
        .map(|i| Sample {
            joints: (0..num_joints)
                .map(|k| {
                    let y = Vec2::new(
                        T::lit(rng.random_range(x_lo..=x_hi)),
                        T::lit(rng.random_range(y_lo..=y_hi)),
                    );
                    JointTarget::labeled(k, y)
                })
                .collect(),
            source_id: format!("synth-{i}"),
            crop: None,
        })
        .collect();
    Batch::new(samples, *grid)
}

/// Generates ground-truth joints and matching noisy predictions; see
/// [`render_predictions`].
pub fn synth_scene<T: Scalar>(cfg: &SynthConfig<T>) -> Result<SynthScene<T>> {
    let mut rng = seeded(cfg.seed);
    let batch = synth_batch(cfg.samples, cfg.num_joints, &cfg.grid, cfg.margin, &mut rng)?;
    let (predictions, deltas) =
        render_predictions(&batch, cfg.sigma, cfg.radius, &cfg.noise, &mut rng)?;
    Ok(SynthScene {
        batch,
        predictions,
        deltas,
    })
}
