//! Displacement statistics and mixed Gaussian masks.
//!
//! Per mini-batch: the arg-max cell of every predicted heatmap is compared
//! with its ground-truth joint, the resulting displacements are pooled and
//! fitted with a 2-D Gaussian mixture by EM, the mixture density is sampled
//! on the integer stencil `[-R, R]^2` and min-max normalized, and the
//! stencil is translated onto every joint.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::decode_argmax;
use crate::error::{Error, Result};
use crate::geometry::{Batch, Cell, Heatmap, Vec2};
use crate::rng::seeded;
use crate::scalar::Scalar;

pub const DEFAULT_MAX_ITERATIONS: usize = 200;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_COVARIANCE_FLOOR: f64 = 1e-4;
/// Minimum number of displacement samples per mixture component.
pub const SAMPLES_PER_COMPONENT: usize = 10;

/// Displacement `coarse prediction - ground truth`, heatmap-cell units.
pub type DisplacementSample<T> = Vec2<T>;

/// K weighted 2-D Gaussian components. Covariances are stored as full
/// symmetric rows so the JSON form reads `[[xx, xy], [xy, yy]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GaussianMixture<T> {
    pub weights: Vec<T>,
    pub means: Vec<[T; 2]>,
    pub covariances: Vec<[[T; 2]; 2]>,
}

impl<T: Scalar> GaussianMixture<T> {
    pub fn single(mean: Vec2<T>, cov: [[T; 2]; 2]) -> Self {
        Self {
            weights: vec![T::one()],
            means: vec![[mean.x, mean.y]],
            covariances: vec![cov],
        }
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.covariances.len() != k {
            return Err(Error::InvalidArgument(
                "mixture weights, means and covariances must have equal non-zero length".into(),
            ));
        }
        let total: T = self.weights.iter().copied().sum();
        if (total - T::one()).abs() > T::lit(1e-6) || self.weights.iter().any(|&w| w < T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "mixture weights must be non-negative and sum to 1 (sum = {total})"
            )));
        }
        for c in &self.covariances {
            let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
            if !(c[0][0] > T::zero() && det > T::zero()) || c[0][1] != c[1][0] {
                return Err(Error::InvalidArgument(
                    "covariances must be symmetric positive definite".into(),
                ));
            }
        }
        Ok(())
    }

    /// Natural log of the mixture density at `p`.
    pub fn log_density(&self, p: Vec2<T>) -> T {
        let terms: Vec<T> = (0..self.components())
            .map(|k| self.weights[k].ln() + log_gaussian(p, self.means[k], &self.covariances[k]))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn density(&self, p: Vec2<T>) -> T {
        self.log_density(p).exp()
    }
}

fn log_gaussian<T: Scalar>(p: Vec2<T>, mean: [T; 2], cov: &[[T; 2]; 2]) -> T {
    let (a, b, c) = (cov[0][0], cov[0][1], cov[1][1]);
    let det = a * c - b * b;
    let dx = p.x - mean[0];
    let dy = p.y - mean[1];
    let maha = (c * dx * dx - (b + b) * dx * dy + a * dy * dy) / det;
    -(T::lit(2.0) * T::PI()).ln() - T::lit(0.5) * det.ln() - T::lit(0.5) * maha
}

fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

/// Stopping rule and regularization for [`em_fit`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iterations: usize,
    /// Convergence threshold on the change of mean per-sample log-likelihood.
    pub tolerance: f64,
    /// Added to every covariance diagonal.
    pub covariance_floor: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iterations: DEFAULT_MAX_ITERATIONS,
            tolerance: DEFAULT_TOLERANCE,
            covariance_floor: DEFAULT_COVARIANCE_FLOOR,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EmFit<T> {
    pub mixture: GaussianMixture<T>,
    /// Mean per-sample log-likelihood of the initial parameters and after every M-step.
    pub log_likelihood: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
}

impl<T: Scalar> EmFit<T> {
    pub fn final_log_likelihood(&self) -> T {
        *self.log_likelihood.last().expect("trace is never empty")
    }
}

/// Fits a `k`-component mixture by expectation maximization.
///
/// Samples are put in a canonical order first, so the result depends only on
/// the sample multiset and the seed. `k = 1` is solved in closed form.
///
/// Covariances get `floor * I` added. The mean log-likelihood in the trace
/// never decreases: a step that would lose likelihood is redone with
/// eigenvalues clipped at `floor` instead.
pub fn em_fit<T: Scalar>(
    samples: &[DisplacementSample<T>],
    k: usize,
    config: &EmConfig,
) -> Result<EmFit<T>> {
    if k == 0 {
        return Err(Error::InvalidArgument(
            "component count must be >= 1".into(),
        ));
    }
    let needed = SAMPLES_PER_COMPONENT * k;
    if samples.len() < needed {
        return Err(Error::TooFewSamples {
            components: k,
            needed,
            got: samples.len(),
        });
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(
            "non-finite displacement sample".into(),
        ));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| {
        a.x.partial_cmp(&b.x)
            .unwrap()
            .then(a.y.partial_cmp(&b.y).unwrap())
    });

    let floor = T::lit(config.covariance_floor);
    let n = T::from_usize_lossy(xs.len());
    let uniform = vec![T::one(); xs.len()];
    let (mean, pooled) = weighted_moments(&xs, &uniform, n);
    let pooled = add_floor(pooled, floor);

    if k == 1 {
        let mixture = GaussianMixture::single(mean, pooled);
        let ll = mean_log_likelihood(&xs, &mixture);
        return Ok(EmFit {
            mixture,
            log_likelihood: vec![ll],
            iterations: 0,
            converged: true,
        });
    }

    let mut mixture = GaussianMixture {
        weights: vec![T::one() / T::from_usize_lossy(k); k],
        means: kmeans_pp_seeds(&xs, k, config.seed),
        covariances: vec![pooled; k],
    };
    let tol = T::lit(config.tolerance);
    let mut resp = vec![vec![T::zero(); xs.len()]; k];
    let mut next = resp.clone();
    let mut ll_prev = e_step(&xs, &mixture, &mut resp);
    let mut trace = vec![ll_prev];
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..config.max_iterations {
        let previous = mixture.clone();
        m_step(&xs, &resp, &mut mixture, floor, CovUpdate::AddFloor);
        iterations += 1;
        let mut ll = e_step(&xs, &mixture, &mut next);
        if ll < ll_prev {
            // Adding the floor is not the exact maximizer and can lose
            // likelihood on near-singular components. Redo the step with the
            // exact maximizer over {min eigenvalue >= floor}; the previous
            // iterate lies in that set, so this step cannot lose likelihood.
            mixture = previous;
            m_step(&xs, &resp, &mut mixture, floor, CovUpdate::ClipEigenvalues);
            ll = e_step(&xs, &mixture, &mut next);
        }
        std::mem::swap(&mut resp, &mut next);
        trace.push(ll);
        if (ll - ll_prev).abs() < tol {
            converged = true;
            break;
        }
        ll_prev = ll;
    }
    Ok(EmFit {
        mixture,
        log_likelihood: trace,
        iterations,
        converged,
    })
}

fn add_floor<T: Scalar>(mut c: [[T; 2]; 2], floor: T) -> [[T; 2]; 2] {
    c[0][0] += floor;
    c[1][1] += floor;
    c
}

/// Raises both eigenvalues of a symmetric 2x2 matrix to at least `floor`.
fn clip_eigenvalues<T: Scalar>(c: [[T; 2]; 2], floor: T) -> [[T; 2]; 2] {
    let two = T::lit(2.0);
    let (a, b, d) = (c[0][0], c[0][1], c[1][1]);
    let mid = (a + d) / two;
    let rad = (((a - d) / two).powi(2) + b * b).sqrt();
    let (hi, lo) = (mid + rad, mid - rad);
    if lo >= floor {
        return c;
    }
    let hi_c = if hi > floor { hi } else { floor };
    // eigenvector of `hi`; the axis-aligned case needs its own branch
    let (ux, uy) = if b != T::zero() {
        (hi - d, b)
    } else if a >= d {
        (T::one(), T::zero())
    } else {
        (T::zero(), T::one())
    };
    let norm = (ux * ux + uy * uy).sqrt();
    let (ux, uy) = (ux / norm, uy / norm);
    // hi_c * u u^T + floor * (I - u u^T)
    let gap = hi_c - floor;
    [
        [floor + gap * ux * ux, gap * ux * uy],
        [gap * ux * uy, floor + gap * uy * uy],
    ]
}

#[derive(Clone, Copy)]
enum CovUpdate {
    AddFloor,
    ClipEigenvalues,
}

/// Weighted mean and (biased) covariance; `mass` is the sum of weights.
fn weighted_moments<T: Scalar>(xs: &[Vec2<T>], w: &[T], mass: T) -> (Vec2<T>, [[T; 2]; 2]) {
    let mut mx = T::zero();
    let mut my = T::zero();
    for (p, &wi) in xs.iter().zip(w) {
        mx += wi * p.x;
        my += wi * p.y;
    }
    mx /= mass;
    my /= mass;
    let (mut sxx, mut sxy, mut syy) = (T::zero(), T::zero(), T::zero());
    for (p, &wi) in xs.iter().zip(w) {
        let dx = p.x - mx;
        let dy = p.y - my;
        sxx += wi * dx * dx;
        sxy += wi * dx * dy;
        syy += wi * dy * dy;
    }
    let cov = [[sxx / mass, sxy / mass], [sxy / mass, syy / mass]];
    (Vec2::new(mx, my), cov)
}

fn kmeans_pp_seeds<T: Scalar>(xs: &[Vec2<T>], k: usize, seed: u64) -> Vec<[T; 2]> {
    let mut rng = seeded(seed);
    let mut centers = vec![xs[rng.random_range(0..xs.len())]];
    let mut d2: Vec<f64> = xs
        .iter()
        .map(|&p| (p - centers[0]).norm_sq().to_f64_lossy())
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = xs.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            idx
        } else {
            rng.random_range(0..xs.len())
        };
        let c = xs[pick];
        centers.push(c);
        for (d, &p) in d2.iter_mut().zip(xs) {
            *d = d.min((p - c).norm_sq().to_f64_lossy());
        }
    }
    centers.into_iter().map(|c| [c.x, c.y]).collect()
}

/// Fills responsibilities and returns the mean log-likelihood of `mixture`.
fn e_step<T: Scalar>(xs: &[Vec2<T>], mixture: &GaussianMixture<T>, resp: &mut [Vec<T>]) -> T {
    let k = mixture.components();
    let log_w: Vec<T> = mixture.weights.iter().map(|w| w.ln()).collect();
    let mut terms = vec![T::zero(); k];
    let mut total = T::zero();
    for (i, &p) in xs.iter().enumerate() {
        for j in 0..k {
            terms[j] = log_w[j] + log_gaussian(p, mixture.means[j], &mixture.covariances[j]);
        }
        let lse = log_sum_exp(&terms);
        for j in 0..k {
            resp[j][i] = (terms[j] - lse).exp();
        }
        total += lse;
    }
    total / T::from_usize_lossy(xs.len())
}

fn m_step<T: Scalar>(
    xs: &[Vec2<T>],
    resp: &[Vec<T>],
    mixture: &mut GaussianMixture<T>,
    floor: T,
    update: CovUpdate,
) {
    let n = T::from_usize_lossy(xs.len());
    let tiny = T::lit(1e-12) * n;
    for (j, r) in resp.iter().enumerate() {
        let mass: T = r.iter().copied().sum();
        mixture.weights[j] = mass / n;
        if mass <= tiny {
            // collapsed component: keep its location, it carries no weight
            continue;
        }
        let (mean, cov) = weighted_moments(xs, r, mass);
        mixture.means[j] = [mean.x, mean.y];
        mixture.covariances[j] = match update {
            CovUpdate::AddFloor => add_floor(cov, floor),
            CovUpdate::ClipEigenvalues => clip_eigenvalues(cov, floor),
        };
    }
    let total: T = mixture.weights.iter().copied().sum();
    for w in &mut mixture.weights {
        *w /= total;
    }
}

fn mean_log_likelihood<T: Scalar>(xs: &[Vec2<T>], mixture: &GaussianMixture<T>) -> T {
    xs.iter().map(|&p| mixture.log_density(p)).sum::<T>() / T::from_usize_lossy(xs.len())
}

/// The initial mixed Gaussian mask: the mixture density sampled on the
/// integer offsets `[-R, R]^2`, min-max normalized to `[0, 1]`.
///
/// `values` is row-major with `v` (the y offset) as the slow axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MaskStencil<T> {
    pub radius: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> MaskStencil<T> {
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Stencil value at integer offset `(u, v)`; `None` outside `[-R, R]^2`.
    pub fn at(&self, u: i64, v: i64) -> Option<T> {
        let r = self.radius as i64;
        if u < -r || u > r || v < -r || v > r {
            return None;
        }
        Some(self.values[((v + r) as usize) * self.side() + (u + r) as usize])
    }
}

/// Samples and normalizes the mixture on the `(2R+1)^2` stencil.
///
/// Densities are evaluated in the log domain and rescaled by their maximum
/// before normalization; min-max normalization is invariant to that scale.
/// A stencil whose raw values are all equal normalizes to a unit impulse at
/// its center.
pub fn sample_stencil<T: Scalar>(
    gmm: &GaussianMixture<T>,
    radius: usize,
) -> Result<MaskStencil<T>> {
    if radius == 0 {
        return Err(Error::InvalidArgument("stencil radius must be >= 1".into()));
    }
    gmm.validate()?;
    let r = radius as i64;
    let side = 2 * radius + 1;
    let mut logs = Vec::with_capacity(side * side);
    for v in -r..=r {
        for u in -r..=r {
            let p = Vec2::new(T::lit(u as f64), T::lit(v as f64));
            logs.push(gmm.log_density(p));
        }
    }
    let peak = logs.iter().copied().fold(T::neg_infinity(), T::max);
    let raw: Vec<T> = if peak.is_finite() {
        logs.iter().map(|&l| (l - peak).exp()).collect()
    } else {
        vec![T::zero(); logs.len()]
    };
    let lo = raw.iter().copied().fold(T::infinity(), T::min);
    let hi = raw.iter().copied().fold(T::neg_infinity(), T::max);
    let range = hi - lo;
    let values = if range > T::zero() && range.is_finite() {
        raw.iter().map(|&x| (x - lo) / range).collect()
    } else {
        let mut impulse = vec![T::zero(); raw.len()];
        impulse[radius * side + radius] = T::one();
        impulse
    };
    Ok(MaskStencil { radius, values })
}

/// Per-joint mixed Gaussian masks for one batch, in sample-major joint order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MaskSet<T> {
    pub batch_id: String,
    pub masks: Vec<Heatmap<T>>,
}

/// Translates the stencil center onto the nearest cell of every joint.
/// Untrainable joints and joints whose nearest cell is off the grid get an
/// all-zero mask.
pub fn make_mask_set<T: Scalar>(
    stencil: &MaskStencil<T>,
    batch: &Batch<T>,
    batch_id: impl Into<String>,
) -> MaskSet<T> {
    let mut set = MaskSet {
        batch_id: batch_id.into(),
        masks: Vec::new(),
    };
    fill_mask_set(stencil, batch, &mut set);
    set
}

/// As [`make_mask_set`], overwriting `set.masks` in place and reusing its
/// buffers when they already have the batch's shape.
pub fn fill_mask_set<T: Scalar>(stencil: &MaskStencil<T>, batch: &Batch<T>, set: &mut MaskSet<T>) {
    let grid = batch.grid;
    let n = batch.len() * batch.num_joints();
    if set.masks.len() != n || set.masks.iter().any(|m| m.grid != grid) {
        set.masks = vec![Heatmap::zeros(grid); n];
    }
    let r = stencil.radius as i64;
    for (mask, joint) in set.masks.iter_mut().zip(batch.joints()) {
        mask.values.iter_mut().for_each(|v| *v = T::zero());
        if !joint.is_trainable() {
            continue;
        }
        let (cx, cy) = joint.position.nearest_cell();
        if !grid.contains_cell(cx, cy) {
            continue;
        }
        for v in -r..=r {
            for u in -r..=r {
                let (x, y) = (cx + u, cy + v);
                if grid.contains_cell(x, y) {
                    mask.set(Cell::new(x as usize, y as usize), stencil.at(u, v).unwrap());
                }
            }
        }
    }
}

/// Arg-max displacements `decode_argmax(pred) - y` for every trainable joint.
/// `predicted` is aligned with [`Batch::joints`].
pub fn collect_displacements<T: Scalar>(
    predicted: &[Heatmap<T>],
    batch: &Batch<T>,
) -> Result<Vec<DisplacementSample<T>>> {
    collect_displacements_from(predicted.iter(), batch)
}

/// As [`collect_displacements`] over any exact-size sequence of heatmaps.
pub fn collect_displacements_from<'a, T, I>(
    predicted: I,
    batch: &Batch<T>,
) -> Result<Vec<DisplacementSample<T>>>
where
    T: Scalar,
    I: IntoIterator<Item = &'a Heatmap<T>>,
    I::IntoIter: ExactSizeIterator,
{
    let predicted = predicted.into_iter();
    let n_joints = batch.len() * batch.num_joints();
    if predicted.len() != n_joints {
        return Err(Error::InvalidArgument(format!(
            "{} predicted heatmaps for {n_joints} joints",
            predicted.len()
        )));
    }
    let mut out = Vec::new();
    for (hm, joint) in predicted.zip(batch.joints()) {
        if !joint.is_trainable() {
            continue;
        }
        hm.grid.ensure_same(&batch.grid)?;
        let (cell, _) = decode_argmax(hm)?;
        out.push(cell.to_point::<T>() - joint.position);
    }
    Ok(out)
}
