//! Confidence-aware keypoint localization: Gaussian-weighted heatmap and
//! offset-field targets, mixed Gaussian offset masks fitted from arg-max
//! displacements, the weighted two-stage losses with analytic gradients,
//! arg-max + offset decoding, and OKS/AP evaluation.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`). Coordinates are in
//! heatmap-cell units unless a name says otherwise; cell `(x, y)` has its
//! center at the integer point `(x, y)` and input pixels are `cells * stride`.

// `!(x > 0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod codec;
pub mod error;
pub mod geometry;
pub mod gmm;
pub mod harness;
pub mod ingest;
pub mod loss;
pub mod metrics;
pub mod rng;
pub mod scalar;

pub use codec::{
    decode_argmax, decode_with_offset, encode_binary, encode_gaussian, encode_joint,
    encode_offsets, encode_weighted,
};
pub use error::{Error, Result};
pub use geometry::{
    clip_disc, BBox, Batch, Cell, GridSpec, Heatmap, JointTarget, OffsetField, Sample, Vec2,
    Visibility,
};
pub use gmm::{
    em_fit, make_mask_set, sample_stencil, EmConfig, GaussianMixture, MaskSet, MaskStencil,
};
pub use harness::{train_toy, PipelineConfig, RunReport};
pub use loss::{stage1_loss, stage2_loss, weighted_loss, LossConfig, OffsetLoss, Prediction};
pub use metrics::{ap_ar, oks, oks_points};
pub use scalar::Scalar;

pub type Vec2f32 = Vec2<f32>;
pub type Vec2f64 = Vec2<f64>;
pub type GridSpec32 = GridSpec<f32>;
pub type GridSpec64 = GridSpec<f64>;
pub type Heatmap32 = Heatmap<f32>;
pub type Heatmap64 = Heatmap<f64>;
pub type OffsetField32 = OffsetField<f32>;
pub type OffsetField64 = OffsetField<f64>;
pub type Batch32 = Batch<f32>;
pub type Batch64 = Batch<f64>;
pub type GaussianMixture32 = GaussianMixture<f32>;
pub type GaussianMixture64 = GaussianMixture<f64>;
pub type PipelineConfig32 = PipelineConfig<f32>;
pub type PipelineConfig64 = PipelineConfig<f64>;
