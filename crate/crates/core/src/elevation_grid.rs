//! Horizontal ROI grid, vertical elevation bins and ground-truth
//! rasterization of road point clouds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FrameTag, PointBatch};

/// Metres to centimetres.
pub const CM_PER_M: f64 = 100.0;

/// Horizontal discretization of the road ROI. Row index `i` runs along the
/// longitudinal (Y) axis, column index `j` along the lateral (X) axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub x_min: f64,
    pub y_min: f64,
    pub resolution: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            x_min: -1.0,
            y_min: 2.1,
            resolution: 0.03,
            nx: 64,
            ny: 164,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(Error::config("grid.resolution", "must be positive"));
        }
        if self.nx == 0 || self.ny == 0 {
            return Err(Error::config("grid", "nx and ny must be at least 1"));
        }
        if !self.x_min.is_finite() || !self.y_min.is_finite() {
            return Err(Error::config("grid", "origin must be finite"));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    /// Lower edge of column `j`.
    #[inline]
    pub fn x_edge(&self, j: usize) -> f64 {
        self.x_min + j as f64 * self.resolution
    }

    /// Lower edge of row `i`.
    #[inline]
    pub fn y_edge(&self, i: usize) -> f64 {
        self.y_min + i as f64 * self.resolution
    }

    /// Centre of cell `(i, j)` in road metres, as `(x, y)`.
    #[inline]
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.x_min + (j as f64 + 0.5) * self.resolution,
            self.y_min + (i as f64 + 0.5) * self.resolution,
        )
    }

    /// Index of the half-open interval `[edge(k), edge(k+1))` holding `value`.
    fn axis_index(value: f64, n: usize, edge: impl Fn(usize) -> f64, origin: f64, res: f64) -> Option<usize> {
        if !value.is_finite() || value < edge(0) || value >= edge(n) {
            return None;
        }
        let mut k = (((value - origin) / res).floor().max(0.0) as usize).min(n - 1);
        // the division can be off by one ulp near an edge; the edge test decides
        while k > 0 && value < edge(k) {
            k -= 1;
        }
        while k + 1 < n && value >= edge(k + 1) {
            k += 1;
        }
        Some(k)
    }

    /// Cell `(i, j)` containing road position `(x, y)`, if inside the ROI.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let j = Self::axis_index(x, self.nx, |k| self.x_edge(k), self.x_min, self.resolution)?;
        let i = Self::axis_index(y, self.ny, |k| self.y_edge(k), self.y_min, self.resolution)?;
        Some((i, j))
    }
}

/// Centres of every cell, row-major, each `[x, y]` in metres.
pub fn cell_centers(grid: &GridSpec) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(grid.cells());
    for i in 0..grid.ny {
        for j in 0..grid.nx {
            let (x, y) = grid.cell_center(i, j);
            out.push([x, y]);
        }
    }
    out
}

/// Vertical elevation bins, in centimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinSpec {
    pub e_min: f64,
    pub e_max: f64,
    pub n_classes: usize,
}

impl Default for BinSpec {
    fn default() -> Self {
        Self {
            e_min: -20.0,
            e_max: 20.0,
            n_classes: 80,
        }
    }
}

impl BinSpec {
    /// Bins of width `interval` covering `[e_min, e_max]`; the range must be
    /// an integer multiple of the interval.
    pub fn from_interval(e_min: f64, e_max: f64, interval: f64) -> Result<Self> {
        if !(interval > 0.0) || !(e_max > e_min) {
            return Err(Error::Domain(format!(
                "invalid bin range [{e_min}, {e_max}] with interval {interval}"
            )));
        }
        let ratio = (e_max - e_min) / interval;
        let n = ratio.round();
        if (ratio - n).abs() > 1e-6 || n < 1.0 {
            return Err(Error::Domain(format!(
                "interval {interval} does not divide the range [{e_min}, {e_max}]"
            )));
        }
        Ok(Self {
            e_min,
            e_max,
            n_classes: n as usize,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.e_max > self.e_min) || !self.e_min.is_finite() || !self.e_max.is_finite() {
            return Err(Error::config("bins", "e_max must exceed e_min"));
        }
        if self.n_classes == 0 {
            return Err(Error::config("bins.n_classes", "must be at least 1"));
        }
        Ok(())
    }

    pub fn interval(&self) -> f64 {
        (self.e_max - self.e_min) / self.n_classes as f64
    }

    pub fn center(&self, c: usize) -> f64 {
        self.e_min + (c as f64 + 0.5) * self.interval()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_classes).map(|c| self.center(c)).collect()
    }

    /// Bin index for an elevation in cm, clamped to the boundary bins.
    pub fn class_of(&self, e: f64) -> usize {
        let raw = ((e - self.e_min) / self.interval()).floor();
        raw.clamp(0.0, (self.n_classes - 1) as f64) as usize
    }
}

/// Dense elevation grid (cm) with a validity mask. Masked-out cells hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ElevationMap {
    pub ny: usize,
    pub nx: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl ElevationMap {
    pub fn empty(ny: usize, nx: usize) -> Self {
        Self {
            ny,
            nx,
            values: vec![0.0; ny * nx],
            mask: vec![false; ny * nx],
        }
    }

    pub fn dense(ny: usize, nx: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), ny * nx, "elevation values do not match {ny}x{nx}");
        Self {
            ny,
            nx,
            values,
            mask: vec![true; ny * nx],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let k = i * self.nx + j;
        self.mask[k].then(|| self.values[k])
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn same_shape(&self, other: &ElevationMap) -> bool {
        self.ny == other.ny && self.nx == other.nx
    }
}

/// Rasterizes road-frame points into the mean elevation per cell.
///
/// Sums are accumulated in f64 in ascending point order, so the result does
/// not depend on anything but the multiset of points per cell and their
/// relative order.
pub fn generate_gt(points: &PointBatch, grid: &GridSpec) -> Result<ElevationMap> {
    if points.frame != FrameTag::Road {
        return Err(Error::FrameMismatch {
            expected: FrameTag::Road,
            actual: points.frame,
        });
    }
    let mut sums = vec![0.0f64; grid.cells()];
    let mut counts = vec![0u32; grid.cells()];
    for p in &points.points {
        if let Some((i, j)) = grid.cell_of(p.x, p.y) {
            let k = i * grid.nx + j;
            sums[k] += p.z * CM_PER_M;
            counts[k] += 1;
        }
    }
    let mut map = ElevationMap::empty(grid.ny, grid.nx);
    for k in 0..grid.cells() {
        if counts[k] > 0 {
            map.values[k] = sums[k] / counts[k] as f64;
            map.mask[k] = true;
        }
    }
    Ok(map)
}

/// One-hot bin labels stored as class indices; masked-out cells carry none.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelTensor {
    pub n_classes: usize,
    pub ny: usize,
    pub nx: usize,
    pub classes: Vec<Option<u32>>,
}

impl LabelTensor {
    pub fn mask(&self) -> Vec<bool> {
        self.classes.iter().map(Option::is_some).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.classes.iter().filter(|c| c.is_some()).count()
    }

    /// Dense `n_classes x ny x nx` one-hot tensor.
    pub fn onehot(&self) -> Vec<u8> {
        let cells = self.ny * self.nx;
        let mut out = vec![0u8; self.n_classes * cells];
        for (k, c) in self.classes.iter().enumerate() {
            if let Some(c) = c {
                out[*c as usize * cells + k] = 1;
            }
        }
        out
    }
}

pub fn elevation_to_labels(map: &ElevationMap, bins: &BinSpec) -> Result<LabelTensor> {
    let mut classes = Vec::with_capacity(map.values.len());
    for (k, (&v, &m)) in map.values.iter().zip(&map.mask).enumerate() {
        if !m {
            classes.push(None);
            continue;
        }
        if v.is_nan() {
            return Err(Error::Data(format!(
                "NaN elevation under a valid mask at cell ({}, {})",
                k / map.nx,
                k % map.nx
            )));
        }
        classes.push(Some(bins.class_of(v) as u32));
    }
    Ok(LabelTensor {
        n_classes: bins.n_classes,
        ny: map.ny,
        nx: map.nx,
        classes,
    })
}
