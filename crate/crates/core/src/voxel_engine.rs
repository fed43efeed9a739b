//! Voxels of interest above the road grid, their precomputed projections
//! into a camera's feature map, and the 3D-to-2D feature query.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GatherPlan, Real, Tensor};
use crate::elevation_grid::{GridSpec, CM_PER_M};
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, FrameTag, RigidPose, PROJECTION_Z_MIN};

/// How a voxel reads its feature from the map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    /// Channel vector at the rounded pixel.
    #[default]
    Nearest,
    /// Blend of the four neighbouring pixels.
    Bilinear,
}

/// Stack of `nz` voxel layers over every grid cell. Heights in cm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelGrid {
    pub grid: GridSpec,
    pub z_min: f64,
    pub z_max: f64,
    pub z_res: f64,
    pub nz: usize,
}

pub fn build_voxel_grid(grid: GridSpec, z_min: f64, z_max: f64, z_res: f64) -> Result<VoxelGrid> {
    if !(z_res > 0.0) {
        return Err(Error::Domain(format!("voxel resolution must be positive, got {z_res}")));
    }
    if !(z_max > z_min) {
        return Err(Error::Domain(format!("empty voxel range [{z_min}, {z_max}]")));
    }
    let ratio = (z_max - z_min) / z_res;
    let nz = ratio.round();
    if (ratio - nz).abs() > 1e-6 {
        return Err(Error::Domain(format!(
            "voxel resolution {z_res} does not divide [{z_min}, {z_max}]"
        )));
    }
    grid.validate()?;
    Ok(VoxelGrid {
        grid,
        z_min,
        z_max,
        z_res,
        nz: nz as usize,
    })
}

impl VoxelGrid {
    pub fn len(&self) -> usize {
        self.nz * self.grid.cells()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Height of layer `k` in metres.
    pub fn layer_z(&self, k: usize) -> f64 {
        (self.z_min + (k as f64 + 0.5) * self.z_res) / CM_PER_M
    }

    /// Road-frame centre of voxel `(k, i, j)` in metres.
    pub fn center(&self, k: usize, i: usize, j: usize) -> Vector3<f64> {
        let (x, y) = self.grid.cell_center(i, j);
        Vector3::new(x, y, self.layer_z(k))
    }

    /// All centres in `[k][i][j]` order.
    pub fn centers(&self) -> Vec<Vector3<f64>> {
        let mut out = Vec::with_capacity(self.len());
        for k in 0..self.nz {
            for i in 0..self.grid.ny {
                for j in 0..self.grid.nx {
                    out.push(self.center(k, i, j));
                }
            }
        }
        out
    }
}

/// Projection of every voxel centre into a feature map of stride
/// `feature_stride`. Coordinates are NaN where the voxel is invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionTable {
    pub nz: usize,
    pub ny: usize,
    pub nx: usize,
    pub feature_stride: usize,
    pub feature_height: usize,
    pub feature_width: usize,
    pub coords: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

/// Projects road-frame points into feature-map coordinates `pixel / stride`.
pub fn project_to_feature_map(
    points: &[Vector3<f64>],
    road_to_cam: &RigidPose,
    cam: &CameraModel,
    feature_stride: usize,
) -> (Vec<[f64; 2]>, Vec<bool>) {
    let s = feature_stride as f64;
    let (fw, fh) = ((cam.width as usize / feature_stride) as f64, (cam.height as usize / feature_stride) as f64);
    let mut coords = Vec::with_capacity(points.len());
    let mut valid = Vec::with_capacity(points.len());
    for p in points {
        let pc = road_to_cam.apply(p);
        let proj = cam.project(&pc);
        let (u, v) = (proj.u / s, proj.v / s);
        let ok = proj.depth > PROJECTION_Z_MIN && u >= 0.0 && u < fw && v >= 0.0 && v < fh;
        coords.push(if ok { [u, v] } else { [f64::NAN, f64::NAN] });
        valid.push(ok);
    }
    (coords, valid)
}

pub fn build_projection_table(
    vox: &VoxelGrid,
    road_to_cam: &RigidPose,
    cam: &CameraModel,
    feature_stride: usize,
) -> Result<ProjectionTable> {
    if ![1, 2, 4, 8].contains(&feature_stride) {
        return Err(Error::Domain(format!(
            "feature stride must be 1, 2, 4 or 8, got {feature_stride}"
        )));
    }
    if road_to_cam.source() != FrameTag::Road || road_to_cam.target() != FrameTag::Camera {
        return Err(Error::FrameMismatch {
            expected: FrameTag::Road,
            actual: road_to_cam.source(),
        });
    }
    let (coords, valid) = project_to_feature_map(&vox.centers(), road_to_cam, cam, feature_stride);
    Ok(ProjectionTable {
        nz: vox.nz,
        ny: vox.grid.ny,
        nx: vox.grid.nx,
        feature_stride,
        feature_height: cam.height as usize / feature_stride,
        feature_width: cam.width as usize / feature_stride,
        coords,
        valid,
    })
}

/// Sampling taps for feature-map coordinates `(u, v)` in a `h x w` map.
fn taps_for(coord: [f64; 2], h: usize, w: usize, mode: SampleMode) -> Vec<(u32, f64)> {
    let [u, v] = coord;
    match mode {
        SampleMode::Nearest => {
            let x = (u.round() as usize).min(w - 1);
            let y = (v.round() as usize).min(h - 1);
            vec![((y * w + x) as u32, 1.0)]
        }
        SampleMode::Bilinear => {
            let (x0, y0) = (u.floor() as usize, v.floor() as usize);
            let (fx, fy) = (u - x0 as f64, v - y0 as f64);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let mut taps = Vec::with_capacity(4);
            for (x, y, wt) in [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x1, y0, fx * (1.0 - fy)),
                (x0, y1, (1.0 - fx) * fy),
                (x1, y1, fx * fy),
            ] {
                if wt != 0.0 {
                    taps.push(((y * w + x) as u32, wt));
                }
            }
            taps
        }
    }
}

/// Gather plan for arbitrary coordinates; invalid entries get no taps.
pub fn plan_from_coords(
    coords: &[[f64; 2]],
    valid: &[bool],
    feature_dims: [usize; 2],
    out_dims: Vec<usize>,
    mode: SampleMode,
) -> Result<GatherPlan> {
    let [h, w] = feature_dims;
    let taps: Vec<Vec<(u32, f64)>> = coords
        .iter()
        .zip(valid)
        .map(|(&c, &ok)| if ok { taps_for(c, h, w, mode) } else { Vec::new() })
        .collect();
    GatherPlan::from_taps(feature_dims, out_dims, &taps)
}

impl ProjectionTable {
    pub fn gather_plan(&self, mode: SampleMode) -> Result<GatherPlan> {
        plan_from_coords(
            &self.coords,
            &self.valid,
            [self.feature_height, self.feature_width],
            vec![self.nz, self.ny, self.nx],
            mode,
        )
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Projected coordinates of the voxel column above cell `(i, j)`.
    pub fn column(&self, i: usize, j: usize) -> Vec<Option<[f64; 2]>> {
        (0..self.nz)
            .map(|k| {
                let idx = (k * self.ny + i) * self.nx + j;
                self.valid[idx].then(|| self.coords[idx])
            })
            .collect()
    }
}

/// Per-voxel features `[C, nz, ny, nx]` plus the validity copied from the
/// projection table. Invalid voxels are zero in every channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume<T> {
    pub data: Tensor<T>,
    pub valid: Vec<bool>,
}

pub fn query_features<T: Real>(
    feature_map: &Tensor<T>,
    table: &ProjectionTable,
    mode: SampleMode,
) -> Result<FeatureVolume<T>> {
    let s = feature_map.shape();
    if s.len() != 3 || s[1] != table.feature_height || s[2] != table.feature_width {
        return Err(Error::Contract(format!(
            "feature map {s:?} does not match projection table ({}x{} at stride {})",
            table.feature_height, table.feature_width, table.feature_stride
        )));
    }
    let plan = table.gather_plan(mode)?;
    let data = plan.apply(feature_map.data(), s[0]);
    Ok(FeatureVolume {
        data: Tensor::new(vec![s[0], table.nz, table.ny, table.nx], data)?,
        valid: table.valid.clone(),
    })
}

/// Memoizes projection tables and gather plans per (voxel grid, camera,
/// pose, stride, mode); voxel positions are fixed relative to the camera.
#[derive(Default)]
pub struct ProjectionCache {
    entries: Mutex<HashMap<Vec<u64>, (Arc<ProjectionTable>, Arc<GatherPlan>)>>,
}

impl ProjectionCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(vox: &VoxelGrid, road_to_cam: &RigidPose, cam: &CameraModel, stride: usize, mode: SampleMode) -> Vec<u64> {
        let g = &vox.grid;
        let mut k = vec![
            g.x_min.to_bits(),
            g.y_min.to_bits(),
            g.resolution.to_bits(),
            g.nx as u64,
            g.ny as u64,
            vox.z_min.to_bits(),
            vox.z_max.to_bits(),
            vox.z_res.to_bits(),
            cam.fx.to_bits(),
            cam.fy.to_bits(),
            cam.cx.to_bits(),
            cam.cy.to_bits(),
            cam.width as u64,
            cam.height as u64,
            stride as u64,
            mode as u64,
        ];
        k.extend(road_to_cam.rotation().iter().map(|v| v.to_bits()));
        k.extend(road_to_cam.translation().iter().map(|v| v.to_bits()));
        k
    }

    pub fn get(
        &self,
        vox: &VoxelGrid,
        road_to_cam: &RigidPose,
        cam: &CameraModel,
        stride: usize,
        mode: SampleMode,
    ) -> Result<(Arc<ProjectionTable>, Arc<GatherPlan>)> {
        let key = Self::key(vox, road_to_cam, cam, stride, mode);
        let mut map = self.entries.lock().expect("projection cache poisoned");
        if let Some(hit) = map.get(&key) {
            return Ok(hit.clone());
        }
        let table = build_projection_table(vox, road_to_cam, cam, stride)?;
        let plan = table.gather_plan(mode)?;
        let entry = (Arc::new(table), Arc::new(plan));
        map.insert(key, entry.clone());
        Ok(entry)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("projection cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
