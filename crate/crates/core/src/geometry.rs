//! Coordinate frames, lattice geometry and the sample containers consumed by
//! every other module.
//!
//! Coordinates are expressed in heatmap-cell units. Integer coordinates are
//! cell centers: cell `(x, y)` sits at the continuous point `(x, y)` and maps
//! to input pixel `(x * stride, y * stride)`. No half-cell alignment
//! correction is applied anywhere in the crate.

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A 2-vector in either heatmap-cell or input-pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Vec2<T> {
    pub x: T,
    pub y: T,
}

impl<T: Scalar> Vec2<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero())
    }

    pub fn norm_sq(self) -> T {
        self.x * self.x + self.y * self.y
    }

    pub fn norm(self) -> T {
        self.norm_sq().sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Nearest integer lattice point, rounding halves upward (`floor(v + 0.5)`),
    /// which commutes exactly with integer translation.
    pub fn nearest_cell(self) -> (i64, i64) {
        let half = T::lit(0.5);
        let rx = (self.x + half).floor().to_i64().unwrap_or(i64::MIN);
        let ry = (self.y + half).floor().to_i64().unwrap_or(i64::MIN);
        (rx, ry)
    }
}

impl<T: Scalar> Add for Vec2<T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl<T: Scalar> Sub for Vec2<T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl<T: Scalar> Mul<T> for Vec2<T> {
    type Output = Self;
    fn mul(self, rhs: T) -> Self {
        Self::new(self.x * rhs, self.y * rhs)
    }
}

/// An integer heatmap cell, `x` along the width and `y` along the height.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    pub fn to_point<T: Scalar>(self) -> Vec2<T> {
        Vec2::new(T::from_usize_lossy(self.x), T::from_usize_lossy(self.y))
    }
}

/// Heatmap lattice geometry plus the stride linking cells to input pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GridSpec<T> {
    pub width: usize,
    pub height: usize,
    pub stride: T,
}

impl<T: Scalar> GridSpec<T> {
    pub fn new(width: usize, height: usize, stride: T) -> Result<Self> {
        let grid = Self {
            width,
            height,
            stride,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::InvalidGrid(format!(
                "{}x{} grid, both sides must be >= 2",
                self.width, self.height
            )));
        }
        if !(self.stride > T::zero() && self.stride.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "stride {} must be positive",
                self.stride
            )));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.width * self.height
    }

    /// Input-space extent `(width * stride, height * stride)`.
    pub fn input_extent(&self) -> Vec2<T> {
        Vec2::new(
            T::from_usize_lossy(self.width) * self.stride,
            T::from_usize_lossy(self.height) * self.stride,
        )
    }

    /// Row-major index of a cell.
    pub fn index(&self, cell: Cell) -> usize {
        cell.y * self.width + cell.x
    }

    pub fn cell_at(&self, index: usize) -> Cell {
        Cell::new(index % self.width, index / self.width)
    }

    pub fn contains_cell(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as u64) < self.width as u64 && (y as u64) < self.height as u64
    }

    /// True when the nearest lattice cell of `p` lies on the grid.
    pub fn contains_point(&self, p: Vec2<T>) -> bool {
        if !p.is_finite() {
            return false;
        }
        let (x, y) = p.nearest_cell();
        self.contains_cell(x, y)
    }

    /// Checks that two grids describe the same lattice.
    pub fn ensure_same(&self, other: &Self) -> Result<()> {
        if self.width != other.width || self.height != other.height || self.stride != other.stride {
            return Err(Error::GridMismatch(format!(
                "{}x{}@{} vs {}x{}@{}",
                self.width, self.height, self.stride, other.width, other.height, other.stride
            )));
        }
        Ok(())
    }
}

/// Heatmap-cell coordinates to input pixels.
pub fn to_input_coords<T: Scalar>(p: Vec2<T>, grid: &GridSpec<T>) -> Vec2<T> {
    p * grid.stride
}

/// Input pixels to heatmap-cell coordinates.
pub fn to_heatmap_coords<T: Scalar>(p: Vec2<T>, grid: &GridSpec<T>) -> Vec2<T> {
    Vec2::new(p.x / grid.stride, p.y / grid.stride)
}

/// All grid cells within Euclidean distance `radius` of `center`, boundary
/// included, in row-major order. Empty when the disc misses the grid.
pub fn clip_disc<T: Scalar>(center: Vec2<T>, radius: T, grid: &GridSpec<T>) -> Vec<Cell> {
    let mut cells = Vec::new();
    if !(radius > T::zero()) || !center.is_finite() {
        return cells;
    }
    let r2 = radius * radius;
    let y_lo = (center.y - radius).ceil().max(T::zero());
    let y_hi = (center.y + radius)
        .floor()
        .min(T::from_usize_lossy(grid.height - 1));
    let x_lo = (center.x - radius).ceil().max(T::zero());
    let x_hi = (center.x + radius)
        .floor()
        .min(T::from_usize_lossy(grid.width - 1));
    if y_lo > y_hi || x_lo > x_hi {
        return cells;
    }
    let (y_lo, y_hi) = (y_lo.to_usize().unwrap(), y_hi.to_usize().unwrap());
    let (x_lo, x_hi) = (x_lo.to_usize().unwrap(), x_hi.to_usize().unwrap());
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let cell = Cell::new(x, y);
            if (cell.to_point::<T>() - center).norm_sq() <= r2 {
                cells.push(cell);
            }
        }
    }
    cells
}

/// COCO visibility flag: `v = 0`, `v = 1`, `v = 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Visibility {
    Unlabeled,
    LabeledInvisible,
    LabeledVisible,
}

impl Visibility {
    pub fn from_coco(v: i64) -> Option<Self> {
        match v {
            0 => Some(Visibility::Unlabeled),
            1 => Some(Visibility::LabeledInvisible),
            2 => Some(Visibility::LabeledVisible),
            _ => None,
        }
    }

    pub fn to_coco(self) -> i64 {
        match self {
            Visibility::Unlabeled => 0,
            Visibility::LabeledInvisible => 1,
            Visibility::LabeledVisible => 2,
        }
    }

    pub fn is_labeled(self) -> bool {
        self != Visibility::Unlabeled
    }
}

/// Ground truth for one joint of one instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct JointTarget<T> {
    pub joint_index: usize,
    /// Continuous location in heatmap-cell units.
    pub position: Vec2<T>,
    pub visibility: Visibility,
    /// Set when a labeled joint maps outside the grid; such joints carry no loss.
    #[serde(default)]
    pub out_of_bounds: bool,
}

impl<T: Scalar> JointTarget<T> {
    pub fn labeled(joint_index: usize, position: Vec2<T>) -> Self {
        Self {
            joint_index,
            position,
            visibility: Visibility::LabeledVisible,
            out_of_bounds: false,
        }
    }

    pub fn unlabeled(joint_index: usize) -> Self {
        Self {
            joint_index,
            position: Vec2::zero(),
            visibility: Visibility::Unlabeled,
            out_of_bounds: false,
        }
    }

    /// Labeled, on the grid and finite: eligible for targets and loss.
    pub fn is_trainable(&self) -> bool {
        self.visibility.is_labeled() && !self.out_of_bounds && self.position.is_finite()
    }
}

/// Axis-aligned box in original image pixels, COCO `[x, y, w, h]` order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct BBox<T> {
    pub x: T,
    pub y: T,
    pub w: T,
    pub h: T,
}

impl<T: Scalar> BBox<T> {
    pub fn area(&self) -> T {
        self.w * self.h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Sample<T> {
    pub joints: Vec<JointTarget<T>>,
    pub source_id: String,
    /// Original-image crop the sample was mapped from, when loaded from annotations.
    #[serde(default)]
    pub crop: Option<BBox<T>>,
}

impl<T: Scalar> Sample<T> {
    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn labeled_count(&self) -> usize {
        self.joints
            .iter()
            .filter(|j| j.visibility.is_labeled())
            .count()
    }
}

/// A mini-batch: samples sharing one joint count and one grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Batch<T> {
    pub samples: Vec<Sample<T>>,
    pub grid: GridSpec<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(samples: Vec<Sample<T>>, grid: GridSpec<T>) -> Result<Self> {
        grid.validate()?;
        let first = samples
            .first()
            .ok_or_else(|| Error::Empty("batch has no samples".into()))?;
        let k = first.num_joints();
        for s in &samples {
            if s.num_joints() != k {
                return Err(Error::InvalidArgument(format!(
                    "sample {} has {} joints, expected {k}",
                    s.source_id,
                    s.num_joints()
                )));
            }
            for (i, j) in s.joints.iter().enumerate() {
                if j.joint_index != i {
                    return Err(Error::InvalidArgument(format!(
                        "sample {} joint slot {i} carries index {}",
                        s.source_id, j.joint_index
                    )));
                }
            }
        }
        Ok(Self { samples, grid })
    }

    pub fn num_joints(&self) -> usize {
        self.samples.first().map_or(0, Sample::num_joints)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Joints in sample-major order, matching the flattened prediction layout.
    pub fn joints(&self) -> impl Iterator<Item = &JointTarget<T>> {
        self.samples.iter().flat_map(|s| s.joints.iter())
    }
}

/// A scalar grid over a [`GridSpec`], row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Heatmap<T> {
    pub grid: GridSpec<T>,
    pub values: Vec<T>,
}

impl<T: Scalar> Heatmap<T> {
    pub fn zeros(grid: GridSpec<T>) -> Self {
        Self {
            values: vec![T::zero(); grid.n_cells()],
            grid,
        }
    }

    pub fn from_values(grid: GridSpec<T>, values: Vec<T>) -> Result<Self> {
        grid.validate()?;
        if values.len() != grid.n_cells() {
            return Err(Error::GridMismatch(format!(
                "{} values for a {}x{} grid",
                values.len(),
                grid.width,
                grid.height
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn get(&self, cell: Cell) -> T {
        self.values[self.grid.index(cell)]
    }

    pub fn set(&mut self, cell: Cell, v: T) {
        let i = self.grid.index(cell);
        self.values[i] = v;
    }

    pub fn sum(&self) -> T {
        self.values.iter().copied().sum()
    }

    pub fn ensure_matches(&self, other: &Self) -> Result<()> {
        self.grid.ensure_same(&other.grid)?;
        if self.values.len() != other.values.len() {
            return Err(Error::GridMismatch("value count differs".into()));
        }
        Ok(())
    }
}

/// A 2-channel displacement grid in heatmap-cell units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct OffsetField<T> {
    pub grid: GridSpec<T>,
    pub dx: Vec<T>,
    pub dy: Vec<T>,
}

impl<T: Scalar> OffsetField<T> {
    pub fn zeros(grid: GridSpec<T>) -> Self {
        let n = grid.n_cells();
        Self {
            grid,
            dx: vec![T::zero(); n],
            dy: vec![T::zero(); n],
        }
    }

    pub fn from_channels(grid: GridSpec<T>, dx: Vec<T>, dy: Vec<T>) -> Result<Self> {
        grid.validate()?;
        if dx.len() != grid.n_cells() || dy.len() != grid.n_cells() {
            return Err(Error::GridMismatch(format!(
                "offset channels {}/{} for {} cells",
                dx.len(),
                dy.len(),
                grid.n_cells()
            )));
        }
        Ok(Self { grid, dx, dy })
    }

    pub fn get(&self, cell: Cell) -> Vec2<T> {
        let i = self.grid.index(cell);
        Vec2::new(self.dx[i], self.dy[i])
    }

    pub fn ensure_matches(&self, other: &Self) -> Result<()> {
        self.grid.ensure_same(&other.grid)?;
        if self.dx.len() != other.dx.len() || self.dy.len() != other.dy.len() {
            return Err(Error::GridMismatch("offset channel size differs".into()));
        }
        Ok(())
    }
}
