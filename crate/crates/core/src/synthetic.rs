//! Procedural road scenes with known elevation: analytic height fields,
//! value-noise texture, stereo rendering by ray intersection, and point
//! cloud sampling.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};
use crate::elevation_grid::{GridSpec, ElevationMap, CM_PER_M};
use crate::error::{Error, Result};
use crate::geometry::{camera_to_road, compose, CameraModel, FrameTag, PointBatch, RigidPose};
use crate::seeds::substream;

/// Largest |z| a height field may reach, in metres.
pub const MAX_ABS_ELEVATION: f64 = 0.20;

/// One analytic surface component; all lengths in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    Plane { c: f64 },
    /// `height * cos^2(pi (y - y0) / length)` within half a length of `y0`.
    SpeedBump { height: f64, y0: f64, length: f64 },
    Pothole { depth: f64, x0: f64, y0: f64, sigma: f64 },
    /// `amplitude * sin(2 pi y / wavelength)`.
    Sinusoid { amplitude: f64, wavelength: f64 },
    /// `height` for `y > y0`, zero otherwise.
    Step { height: f64, y0: f64 },
    /// Narrow Gaussian groove along the line through `(x0, y0)` at `angle`
    /// (radians from the x axis).
    Crack { depth: f64, x0: f64, y0: f64, angle: f64, width: f64 },
}

fn check(cond: bool, what: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Domain(format!("primitive parameter out of range: {what}")))
    }
}

impl Primitive {
    pub fn validate(&self) -> Result<()> {
        let finite = |vals: &[f64]| vals.iter().all(|v| v.is_finite());
        match *self {
            Primitive::Plane { c } => check(finite(&[c]) && c.abs() <= 0.10, "plane |c| <= 0.10 m"),
            Primitive::SpeedBump { height, y0, length } => {
                check(finite(&[height, y0, length]), "finite speed bump")?;
                check(height > 0.0 && height <= 0.12, "speed bump height in (0, 0.12] m")?;
                check((0.1..=3.0).contains(&length), "speed bump length in [0.1, 3.0] m")
            }
            Primitive::Pothole { depth, x0, y0, sigma } => {
                check(finite(&[depth, x0, y0, sigma]), "finite pothole")?;
                check(depth > 0.0 && depth <= 0.10, "pothole depth in (0, 0.10] m")?;
                check((0.02..=0.5).contains(&sigma), "pothole sigma in [0.02, 0.5] m")
            }
            Primitive::Sinusoid { amplitude, wavelength } => {
                check(finite(&[amplitude, wavelength]), "finite sinusoid")?;
                check(amplitude.abs() <= 0.05, "sinusoid |amplitude| <= 0.05 m")?;
                check(wavelength >= 0.10, "sinusoid wavelength >= 0.10 m")
            }
            Primitive::Step { height, y0 } => {
                check(finite(&[height, y0]), "finite step")?;
                check(height.abs() <= 0.05, "step |height| <= 0.05 m")
            }
            Primitive::Crack { depth, x0, y0, angle, width } => {
                check(finite(&[depth, x0, y0, angle, width]), "finite crack")?;
                check(depth > 0.0 && depth <= 0.05, "crack depth in (0, 0.05] m")?;
                check((0.002..=0.05).contains(&width), "crack width in [0.002, 0.05] m")
            }
        }
    }

    /// Upper bound of |z| contributed by this primitive.
    pub fn max_abs(&self) -> f64 {
        match *self {
            Primitive::Plane { c } => c.abs(),
            Primitive::SpeedBump { height, .. } => height,
            Primitive::Pothole { depth, .. } | Primitive::Crack { depth, .. } => depth,
            Primitive::Sinusoid { amplitude, .. } => amplitude.abs(),
            Primitive::Step { height, .. } => height.abs(),
        }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        use std::f64::consts::PI;
        match *self {
            Primitive::Plane { c } => c,
            Primitive::SpeedBump { height, y0, length } => {
                let d = y - y0;
                if d.abs() < length / 2.0 {
                    let c = (PI * d / length).cos();
                    height * c * c
                } else {
                    0.0
                }
            }
            Primitive::Pothole { depth, x0, y0, sigma } => {
                let r2 = (x - x0).powi(2) + (y - y0).powi(2);
                -depth * (-r2 / (2.0 * sigma * sigma)).exp()
            }
            Primitive::Sinusoid { amplitude, wavelength } => amplitude * (2.0 * PI * y / wavelength).sin(),
            Primitive::Step { height, y0 } => {
                if y > y0 {
                    height
                } else {
                    0.0
                }
            }
            Primitive::Crack { depth, x0, y0, angle, width } => {
                let s = -(x - x0) * angle.sin() + (y - y0) * angle.cos();
                -depth * (-s * s / (2.0 * width * width)).exp()
            }
        }
    }

    /// `(dz/dx, dz/dy)`; zero across the step discontinuity.
    pub fn gradient(&self, x: f64, y: f64) -> (f64, f64) {
        use std::f64::consts::PI;
        match *self {
            Primitive::Plane { .. } | Primitive::Step { .. } => (0.0, 0.0),
            Primitive::SpeedBump { height, y0, length } => {
                let d = y - y0;
                if d.abs() < length / 2.0 {
                    (0.0, -height * PI / length * (2.0 * PI * d / length).sin())
                } else {
                    (0.0, 0.0)
                }
            }
            Primitive::Pothole { depth, x0, y0, sigma } => {
                let s2 = sigma * sigma;
                let e = (-((x - x0).powi(2) + (y - y0).powi(2)) / (2.0 * s2)).exp();
                (depth * e * (x - x0) / s2, depth * e * (y - y0) / s2)
            }
            Primitive::Sinusoid { amplitude, wavelength } => {
                let k = 2.0 * PI / wavelength;
                (0.0, amplitude * k * (k * y).cos())
            }
            Primitive::Crack { depth, x0, y0, angle, width } => {
                let (sn, cs) = angle.sin_cos();
                let s = -(x - x0) * sn + (y - y0) * cs;
                let w2 = width * width;
                let k = depth * (-s * s / (2.0 * w2)).exp() * s / w2;
                (-k * sn, k * cs)
            }
        }
    }
}

/// Sum of primitives, bounded by [`MAX_ABS_ELEVATION`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeightField {
    pub primitives: Vec<Primitive>,
}

impl HeightField {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self> {
        for p in &primitives {
            p.validate()?;
        }
        let bound: f64 = primitives.iter().map(Primitive::max_abs).sum();
        if bound > MAX_ABS_ELEVATION + 1e-12 {
            return Err(Error::Domain(format!(
                "primitives may reach {bound:.3} m, above the {MAX_ABS_ELEVATION} m limit"
            )));
        }
        Ok(Self { primitives })
    }

    pub fn flat(c: f64) -> Result<Self> {
        Self::new(vec![Primitive::Plane { c }])
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.primitives.iter().map(|p| p.eval(x, y)).sum()
    }

    pub fn gradient(&self, x: f64, y: f64) -> (f64, f64) {
        self.primitives.iter().fold((0.0, 0.0), |(a, b), p| {
            let (gx, gy) = p.gradient(x, y);
            (a + gx, b + gy)
        })
    }

    /// Elevation at every cell centre, in cm; fully valid.
    pub fn sample_grid(&self, grid: &GridSpec) -> ElevationMap {
        let mut values = Vec::with_capacity(grid.cells());
        for i in 0..grid.ny {
            for j in 0..grid.nx {
                let (x, y) = grid.cell_center(i, j);
                values.push(self.eval(x, y) * CM_PER_M);
            }
        }
        ElevationMap::dense(grid.ny, grid.nx, values)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Multi-octave value noise painted on the road plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextureField {
    pub seed: u64,
    pub octaves: u32,
    /// Lattice spacing of the coarsest octave in metres; each further
    /// octave halves it.
    pub coarse_cell: f64,
    /// 0 gives a uniform grey, 1 the full [0, 1] range.
    pub contrast: f64,
}

impl Default for TextureField {
    fn default() -> Self {
        Self {
            seed: 0,
            octaves: 5,
            coarse_cell: 0.16,
            contrast: 1.0,
        }
    }
}

impl TextureField {
    pub fn validate(&self) -> Result<()> {
        if !(self.coarse_cell > 0.0) || !(0.0..=1.0).contains(&self.contrast) || self.octaves > 16 {
            return Err(Error::Domain(format!(
                "texture needs coarse_cell > 0, contrast in [0, 1] and at most 16 octaves, got {self:?}"
            )));
        }
        Ok(())
    }

    fn lattice(&self, octave: u32, ix: i64, iy: i64) -> f64 {
        let mut h = splitmix64(self.seed ^ (octave as u64).wrapping_mul(0x632b_e59b_d9b4_e019));
        h = splitmix64(h ^ ix as u64);
        h = splitmix64(h ^ (iy as u64).rotate_left(32));
        (h >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Intensity in [0, 1].
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (mut total, mut norm, mut amp, mut cell) = (0.0, 0.0, 1.0, self.coarse_cell);
        for o in 0..self.octaves {
            let (u, v) = (x / cell, y / cell);
            let (fu, fv) = (u.floor(), v.floor());
            let (ix, iy) = (fu as i64, fv as i64);
            let (tx, ty) = (smooth(u - fu), smooth(v - fv));
            let a = self.lattice(o, ix, iy) * (1.0 - tx) + self.lattice(o, ix + 1, iy) * tx;
            let b = self.lattice(o, ix, iy + 1) * (1.0 - tx) + self.lattice(o, ix + 1, iy + 1) * tx;
            total += amp * (a * (1.0 - ty) + b * ty);
            norm += amp;
            amp *= 0.5;
            cell *= 0.5;
        }
        let n = if norm > 0.0 { total / norm } else { 0.5 };
        (0.5 + self.contrast * (n - 0.5)).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Flat,
    SpeedBump,
    Pothole,
    Sinusoid,
    Step,
    Crack,
    Mixed,
}

impl SceneKind {
    pub const ALL: [SceneKind; 7] = [
        SceneKind::Flat,
        SceneKind::SpeedBump,
        SceneKind::Pothole,
        SceneKind::Sinusoid,
        SceneKind::Step,
        SceneKind::Crack,
        SceneKind::Mixed,
    ];
}

/// Height field plus texture, reproducible from `(kind, seed)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub kind: SceneKind,
    pub seed: u64,
    pub height: HeightField,
    pub texture: TextureField,
}

/// Draws a random scene of `kind` whose features sit inside `grid`.
pub fn make_scene(kind: SceneKind, grid: &GridSpec, texture: TextureField, seed: u64) -> Result<Scene> {
    texture.validate()?;
    let mut rng = substream(seed, "scene", 0);
    let x_max = grid.x_edge(grid.nx);
    let y_max = grid.y_edge(grid.ny);
    let span_y = y_max - grid.y_min;
    let x_in = |r: &mut rand_chacha::ChaCha8Rng| r.gen_range(grid.x_min + 0.1 * (x_max - grid.x_min)..x_max - 0.1 * (x_max - grid.x_min));
    let y_in = |r: &mut rand_chacha::ChaCha8Rng| r.gen_range(grid.y_min + 0.2 * span_y..y_max - 0.2 * span_y);
    let mut prims = vec![Primitive::Plane { c: rng.gen_range(-0.03..0.03) }];
    let bump = |r: &mut rand_chacha::ChaCha8Rng| Primitive::SpeedBump {
        height: r.gen_range(0.03..0.09),
        y0: y_in(r),
        length: r.gen_range(0.4..0.9),
    };
    let pothole = |r: &mut rand_chacha::ChaCha8Rng, x0: f64| Primitive::Pothole {
        depth: r.gen_range(0.03..0.08),
        x0,
        y0: y_in(r),
        sigma: r.gen_range(0.06..0.15),
    };
    match kind {
        SceneKind::Flat => {}
        SceneKind::SpeedBump => prims.push(bump(&mut rng)),
        SceneKind::Pothole => {
            let x0 = x_in(&mut rng);
            prims.push(pothole(&mut rng, x0));
        }
        SceneKind::Sinusoid => prims.push(Primitive::Sinusoid {
            amplitude: rng.gen_range(0.01..0.04),
            wavelength: rng.gen_range(0.6..1.5),
        }),
        SceneKind::Step => {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            prims.push(Primitive::Step {
                height: sign * rng.gen_range(0.01..0.04),
                y0: y_in(&mut rng),
            });
        }
        SceneKind::Crack => {
            let x0 = x_in(&mut rng);
            prims.push(Primitive::Crack {
                depth: rng.gen_range(0.01..0.03),
                x0,
                y0: y_in(&mut rng),
                angle: rng.gen_range(0.0..std::f64::consts::PI),
                width: rng.gen_range(0.006..0.015),
            });
        }
        SceneKind::Mixed => {
            prims.push(bump(&mut rng));
            let x0 = x_in(&mut rng);
            prims.push(pothole(&mut rng, x0));
        }
    }
    Ok(Scene {
        kind,
        seed,
        height: HeightField::new(prims)?,
        texture: TextureField {
            seed: splitmix64(seed ^ 0x7e57),
            ..texture
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderOptions {
    /// Fixed-point intersection steps per ray.
    pub iterations: usize,
    /// Rays travelling farther than this (metres) see sky.
    pub max_distance: f64,
    /// Height residual (metres) below which a ray counts as converged.
    pub tolerance: f64,
    /// Sub-samples per pixel axis.
    pub supersample: usize,
    /// Direction towards the light, road frame.
    pub light: [f64; 3],
    pub ambient: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            iterations: 8,
            max_distance: 50.0,
            tolerance: 1e-7,
            supersample: 1,
            light: [0.3, -0.6, 1.0],
            ambient: 0.4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RayHit {
    Surface {
        point: Vector3<f64>,
        /// False when the fixed-point steps did not settle and the
        /// bracketing search found the hit instead.
        fixed_point: bool,
    },
    Sky,
}

/// Intersects the ray `origin + t * dir` (road frame) with the height field.
pub fn intersect_ray(hf: &HeightField, origin: &Vector3<f64>, dir: &Vector3<f64>, opts: &RenderOptions) -> RayHit {
    if dir.z >= 0.0 {
        return RayHit::Sky;
    }
    let len = dir.norm();
    let at = |z: f64| (z - origin.z) / dir.z;
    let mut z = 0.0;
    let mut settled = false;
    for _ in 0..opts.iterations {
        let p = origin + dir * at(z);
        let next = hf.eval(p.x, p.y);
        let moved = (next - z).abs();
        z = next;
        if moved <= opts.tolerance {
            settled = true;
            break;
        }
    }
    if settled {
        let t = at(z);
        if t <= 0.0 || t * len > opts.max_distance {
            return RayHit::Sky;
        }
        return RayHit::Surface { point: origin + dir * t, fixed_point: true };
    }
    // bracket between the planes bounding the surface, then bisect
    let residual = |t: f64| {
        let p = origin + dir * t;
        p.z - hf.eval(p.x, p.y)
    };
    let (t_top, t_bottom) = (at(MAX_ABS_ELEVATION + 1e-9).max(0.0), at(-MAX_ABS_ELEVATION - 1e-9));
    let steps = 512;
    let mut lo = t_top;
    let mut hi = t_bottom;
    let mut prev = t_top;
    for k in 1..=steps {
        let t = t_top + (t_bottom - t_top) * k as f64 / steps as f64;
        if residual(t) <= 0.0 {
            lo = prev;
            hi = t;
            break;
        }
        prev = t;
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if residual(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = 0.5 * (lo + hi);
    if t * len > opts.max_distance {
        return RayHit::Sky;
    }
    RayHit::Surface { point: origin + dir * t, fixed_point: false }
}

/// Row-major grayscale image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.data[v * self.width + u]
    }

    /// `[3, H, W]` tensor with the gray value in every channel.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let plane: Vec<T> = self.data.iter().map(|&v| T::from_f64(v as f64)).collect();
        let mut data = Vec::with_capacity(3 * plane.len());
        for _ in 0..3 {
            data.extend_from_slice(&plane);
        }
        Tensor::new(vec![3, self.height, self.width], data).expect("3 planes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub image: GrayImage,
    /// Sub-pixel rays the fixed-point steps left unsettled.
    pub nonconverged: usize,
    pub sky: usize,
}

/// Renders `scene` through `cam` placed by `cam_to_road`.
pub fn render_view(scene: &Scene, cam: &CameraModel, cam_to_road: &RigidPose, opts: &RenderOptions) -> Result<RenderOutput> {
    cam.validate()?;
    if cam_to_road.source() != FrameTag::Camera || cam_to_road.target() != FrameTag::Road {
        return Err(Error::FrameMismatch { expected: FrameTag::Camera, actual: cam_to_road.source() });
    }
    let origin = cam_to_road.apply(&Vector3::zeros());
    if origin.z <= MAX_ABS_ELEVATION {
        return Err(Error::Domain(format!("camera at {:.3} m is not above the surface", origin.z)));
    }
    let s = opts.supersample.max(1);
    let light = Vector3::from(opts.light).normalize();
    let (w, h) = (cam.width as usize, cam.height as usize);
    let rows: Vec<(Vec<f32>, usize, usize)> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut row = Vec::with_capacity(w);
            let (mut bad, mut sky) = (0, 0);
            for u in 0..w {
                let mut acc = 0.0;
                for a in 0..s {
                    for b in 0..s {
                        let su = u as f64 + (b as f64 + 0.5) / s as f64 - 0.5;
                        let sv = v as f64 + (a as f64 + 0.5) / s as f64 - 0.5;
                        let dir = cam_to_road.apply_direction(&cam.ray_direction(su, sv));
                        match intersect_ray(&scene.height, &origin, &dir, opts) {
                            RayHit::Sky => sky += 1,
                            RayHit::Surface { point, fixed_point } => {
                                if !fixed_point {
                                    bad += 1;
                                }
                                let (gx, gy) = scene.height.gradient(point.x, point.y);
                                let n = Vector3::new(-gx, -gy, 1.0).normalize();
                                let shade = opts.ambient + (1.0 - opts.ambient) * n.dot(&light).max(0.0);
                                acc += scene.texture.eval(point.x, point.y) * shade;
                            }
                        }
                    }
                }
                row.push((acc / (s * s) as f64) as f32);
            }
            (row, bad, sky)
        })
        .collect();
    let mut data = Vec::with_capacity(w * h);
    let (mut nonconverged, mut sky) = (0, 0);
    for (row, bad, sk) in rows {
        data.extend(row);
        nonconverged += bad;
        sky += sk;
    }
    Ok(RenderOutput {
        image: GrayImage { width: w, height: h, data },
        nonconverged,
        sky,
    })
}

/// Rectified camera pair; the right camera sits `baseline` along the left
/// camera's X axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigSpec {
    pub camera: CameraModel,
    /// Radians; positive pitch looks down.
    pub roll: f64,
    pub pitch: f64,
    pub camera_height: f64,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self {
            camera: CameraModel::default(),
            roll: 0.0,
            pitch: 0.34,
            camera_height: crate::geometry::DEFAULT_CAMERA_HEIGHT,
        }
    }
}

impl RigSpec {
    pub fn left_to_road(&self) -> Result<RigidPose> {
        camera_to_road(self.roll, self.pitch, self.camera_height)
    }

    pub fn right_to_road(&self) -> Result<RigidPose> {
        compose(&self.left_to_road()?, &self.camera.left_to_right().inverse())
    }

    pub fn road_to_views(&self) -> Result<[RigidPose; 2]> {
        Ok([self.left_to_road()?.inverse(), self.right_to_road()?.inverse()])
    }
}

/// Uniform random road-frame samples of the surface over `grid`.
pub fn sample_point_cloud(
    hf: &HeightField,
    grid: &GridSpec,
    density: f64,
    sigma_z: f64,
    rng: &mut impl Rng,
) -> Result<PointBatch> {
    if !(density >= 0.0) || !density.is_finite() || !(sigma_z >= 0.0) {
        return Err(Error::Domain(format!(
            "density {density} and noise {sigma_z} must be finite and non-negative"
        )));
    }
    let (x_max, y_max) = (grid.x_edge(grid.nx), grid.y_edge(grid.ny));
    let n = (density * (x_max - grid.x_min) * (y_max - grid.y_min)).round() as usize;
    let noise = Normal::new(0.0, sigma_z).expect("non-negative std");
    let points = (0..n)
        .map(|_| {
            let x = rng.gen_range(grid.x_min..x_max);
            let y = rng.gen_range(grid.y_min..y_max);
            let mut z = hf.eval(x, y);
            if sigma_z > 0.0 {
                z += noise.sample(rng);
            }
            Vector3::new(x, y, z)
        })
        .collect();
    Ok(PointBatch::new(FrameTag::Road, points))
}

/// What a dataset is built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub kinds: Vec<SceneKind>,
    pub texture: TextureField,
    pub render: RenderOptions,
    pub stereo: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kinds: SceneKind::ALL.to_vec(),
            texture: TextureField::default(),
            render: RenderOptions::default(),
            stereo: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub scene: Scene,
    pub left: GrayImage,
    pub right: Option<GrayImage>,
    /// Analytic elevation at cell centres, cm.
    pub gt: ElevationMap,
    pub rig: RigSpec,
    pub nonconverged: usize,
}

pub fn make_sample(scene: Scene, grid: &GridSpec, rig: &RigSpec, spec: &DatasetSpec) -> Result<SyntheticSample> {
    let left = render_view(&scene, &rig.camera, &rig.left_to_road()?, &spec.render)?;
    let mut nonconverged = left.nonconverged;
    let right = if spec.stereo {
        let r = render_view(&scene, &rig.camera, &rig.right_to_road()?, &spec.render)?;
        nonconverged += r.nonconverged;
        Some(r.image)
    } else {
        None
    };
    Ok(SyntheticSample {
        gt: scene.height.sample_grid(grid),
        scene,
        left: left.image,
        right,
        rig: *rig,
        nonconverged,
    })
}

/// `n_scenes` samples cycling through `spec.kinds`; scene `k` draws from the
/// substream `(seed, "data", k)`.
pub fn make_dataset(n_scenes: usize, grid: &GridSpec, rig: &RigSpec, spec: &DatasetSpec, seed: u64) -> Result<Vec<SyntheticSample>> {
    make_dataset_range(0, n_scenes, grid, rig, spec, seed)
}

/// Scenes `start..start + count` of the sequence [`make_dataset`] produces.
pub fn make_dataset_range(
    start: usize,
    count: usize,
    grid: &GridSpec,
    rig: &RigSpec,
    spec: &DatasetSpec,
    seed: u64,
) -> Result<Vec<SyntheticSample>> {
    if spec.kinds.is_empty() {
        return Err(Error::Domain("dataset needs at least one scene kind".into()));
    }
    (start..start + count)
        .into_par_iter()
        .map(|k| {
            let scene_seed = substream(seed, "data", k as u64).gen::<u64>();
            let scene = make_scene(spec.kinds[k % spec.kinds.len()], grid, spec.texture, scene_seed)?;
            make_sample(scene, grid, rig, spec)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elevation_grid::generate_gt;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_rig() -> RigSpec {
        RigSpec {
            camera: CameraModel { fx: 200.0, fy: 200.0, cx: 80.0, cy: 48.0, width: 160, height: 96, baseline: 0.3 },
            roll: 0.0,
            pitch: 0.38,
            camera_height: 1.1,
        }
    }

    fn small_grid() -> GridSpec {
        GridSpec { x_min: -0.3, y_min: 2.1, resolution: 0.03, nx: 20, ny: 30 }
    }

    fn scene_with(prims: Vec<Primitive>, texture: TextureField) -> Scene {
        Scene { kind: SceneKind::Flat, seed: 0, height: HeightField::new(prims).unwrap(), texture }
    }

    #[test]
    fn primitive_examples() {
        let plane = HeightField::flat(0.0).unwrap();
        assert_eq!(plane.eval(0.3, 4.0), 0.0);
        let bump = Primitive::SpeedBump { height: 0.06, y0: 3.0, length: 0.5 };
        assert_eq!(bump.eval(0.1, 3.0), 0.06);
        assert_eq!(bump.eval(0.1, 3.3), 0.0);
        let hole = Primitive::Pothole { depth: 0.05, x0: 0.0, y0: 3.0, sigma: 0.1 };
        assert!((hole.eval(0.0, 3.0) + 0.05).abs() < 1e-15);
        assert!(hole.eval(0.3, 3.0) > -0.001);
    }

    #[test]
    fn out_of_range_parameters_are_rejected() {
        let bad = [
            Primitive::SpeedBump { height: 0.13, y0: 3.0, length: 0.5 },
            Primitive::Pothole { depth: 0.11, x0: 0.0, y0: 3.0, sigma: 0.1 },
            Primitive::Sinusoid { amplitude: 0.01, wavelength: 0.05 },
            Primitive::Plane { c: f64::NAN },
        ];
        for p in bad {
            assert!(matches!(HeightField::new(vec![p]), Err(Error::Domain(_))), "{p:?}");
        }
        let too_tall = vec![
            Primitive::SpeedBump { height: 0.12, y0: 3.0, length: 0.5 },
            Primitive::Pothole { depth: 0.10, x0: 0.0, y0: 3.0, sigma: 0.1 },
        ];
        assert!(HeightField::new(too_tall).is_err());
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let hf = HeightField::new(vec![
            Primitive::SpeedBump { height: 0.05, y0: 3.0, length: 0.8 },
            Primitive::Pothole { depth: 0.04, x0: 0.1, y0: 3.2, sigma: 0.1 },
            Primitive::Sinusoid { amplitude: 0.01, wavelength: 0.7 },
            Primitive::Crack { depth: 0.02, x0: -0.1, y0: 3.1, angle: 0.7, width: 0.02 },
        ])
        .unwrap();
        let h = 1e-6;
        for &(x, y) in &[(0.0, 3.1), (0.12, 2.9), (-0.2, 3.25)] {
            let (gx, gy) = hf.gradient(x, y);
            let nx = (hf.eval(x + h, y) - hf.eval(x - h, y)) / (2.0 * h);
            let ny = (hf.eval(x, y + h) - hf.eval(x, y - h)) / (2.0 * h);
            assert!((gx - nx).abs() < 1e-6 && (gy - ny).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_texture_plane_renders_constant_road() {
        let scene = scene_with(vec![Primitive::Plane { c: 0.02 }], TextureField { contrast: 0.0, ..TextureField::default() });
        let rig = small_rig();
        let out = render_view(&scene, &rig.camera, &rig.left_to_road().unwrap(), &RenderOptions::default()).unwrap();
        let road: Vec<f32> = out.image.data.iter().copied().filter(|&v| v > 0.0).collect();
        assert!(!road.is_empty());
        assert!(road.iter().all(|&v| v == road[0]));
        assert_eq!(out.nonconverged, 0);
    }

    #[test]
    fn plane_hits_reproject_to_their_pixel() {
        let rig = small_rig();
        let pose = rig.left_to_road().unwrap();
        let hf = HeightField::flat(-0.04).unwrap();
        let origin = pose.apply(&Vector3::zeros());
        let opts = RenderOptions::default();
        for &(u, v) in &[(10.0, 90.0), (80.0, 48.0), (150.0, 60.0), (33.0, 20.0)] {
            let dir = pose.apply_direction(&rig.camera.ray_direction(u, v));
            let RayHit::Surface { point, fixed_point } = intersect_ray(&hf, &origin, &dir, &opts) else {
                panic!("ray ({u}, {v}) missed");
            };
            assert!(fixed_point);
            let t = (-0.04 - origin.z) / dir.z;
            assert!((point - (origin + dir * t)).norm() < 1e-6);
            let back = rig.camera.project(&pose.inverse().apply(&point));
            assert!((back.u - u).abs() < 1e-6 && (back.v - v).abs() < 1e-6);
        }
    }

    #[test]
    fn step_hits_match_closed_form_away_from_the_edge() {
        let rig = small_rig();
        let pose = rig.left_to_road().unwrap();
        let origin = pose.apply(&Vector3::zeros());
        let hf = HeightField::new(vec![Primitive::Plane { c: 0.01 }, Primitive::Step { height: 0.03, y0: 3.0 }]).unwrap();
        let opts = RenderOptions::default();
        let mut checked = 0;
        for v in (0..96).step_by(5) {
            let dir = pose.apply_direction(&rig.camera.ray_direction(80.0, v as f64));
            let RayHit::Surface { point, .. } = intersect_ray(&hf, &origin, &dir, &opts) else { continue };
            for level in [0.01, 0.04] {
                let t = (level - origin.z) / dir.z;
                let p = origin + dir * t;
                let on_level = (level == 0.01 && p.y < 2.95) || (level == 0.04 && p.y > 3.05);
                if on_level && (hf.eval(p.x, p.y) - level).abs() < 1e-12 {
                    assert!((point - p).norm() < 1e-6, "v={v}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 5);
    }

    #[test]
    fn steep_far_surfaces_fall_back_and_still_hit() {
        let rig = small_rig();
        let pose = rig.left_to_road().unwrap();
        let origin = pose.apply(&Vector3::zeros());
        let hf = HeightField::new(vec![Primitive::Sinusoid { amplitude: 0.05, wavelength: 0.3 }]).unwrap();
        let opts = RenderOptions::default();
        let mut fallback = 0;
        for v in 0..20 {
            let dir = pose.apply_direction(&rig.camera.ray_direction(80.0, v as f64));
            if let RayHit::Surface { point, fixed_point } = intersect_ray(&hf, &origin, &dir, &opts) {
                assert!((point.z - hf.eval(point.x, point.y)).abs() < 1e-9);
                fallback += usize::from(!fixed_point);
            }
        }
        assert!(fallback > 0);
    }

    /// Fixed-point steps contract when slope times the ray's
    /// horizontal-to-vertical ratio stays below one.
    #[test]
    fn gentle_scenes_converge_everywhere() {
        let rig = small_rig();
        let gentle = [
            vec![Primitive::Plane { c: 0.02 }],
            vec![Primitive::Pothole { depth: 0.02, x0: 0.0, y0: 3.0, sigma: 0.3 }],
            vec![Primitive::SpeedBump { height: 0.02, y0: 3.2, length: 1.5 }],
        ];
        for prims in gentle {
            let scene = scene_with(prims.clone(), TextureField::default());
            let out = render_view(&scene, &rig.camera, &rig.left_to_road().unwrap(), &RenderOptions::default()).unwrap();
            assert_eq!(out.nonconverged, 0, "{prims:?}");
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let rig = small_rig();
        let scene = make_scene(SceneKind::Mixed, &small_grid(), TextureField::default(), 9).unwrap();
        let opts = RenderOptions { supersample: 2, ..RenderOptions::default() };
        let a = render_view(&scene, &rig.camera, &rig.left_to_road().unwrap(), &opts).unwrap();
        let b = render_view(&scene, &rig.camera, &rig.left_to_road().unwrap(), &opts).unwrap();
        assert_eq!(a, b);
    }

    /// Sub-pixel match of a horizontal strip along the right image row;
    /// disparity is constant along a row on a road plane.
    fn match_disparity(left: &GrayImage, right: &GrayImage, u: usize, v: usize, guess: f64) -> f64 {
        let r = 16i64;
        let sample = |x: f64| {
            let x0 = x.floor();
            let f = x - x0;
            let x0 = x0 as usize;
            right.get(x0, v) as f64 * (1.0 - f) + right.get(x0 + 1, v) as f64 * f
        };
        let mut best = (f64::INFINITY, guess);
        let mut d = guess - 3.0;
        while d <= guess + 3.0 {
            let ssd: f64 = (-r..=r)
                .map(|dx| {
                    let x = (u as i64 + dx) as usize;
                    (left.get(x, v) as f64 - sample(x as f64 - d)).powi(2)
                })
                .sum();
            if ssd < best.0 {
                best = (ssd, d);
            }
            d += 0.05;
        }
        best.1
    }

    #[test]
    fn stereo_disparity_matches_baseline_over_depth() {
        let rig = small_rig();
        let texture = TextureField { coarse_cell: 0.48, ..TextureField::default() };
        let scene = scene_with(vec![Primitive::Plane { c: 0.0 }], texture);
        let opts = RenderOptions { supersample: 3, ..RenderOptions::default() };
        let left = render_view(&scene, &rig.camera, &rig.left_to_road().unwrap(), &opts).unwrap().image;
        let right = render_view(&scene, &rig.camera, &rig.right_to_road().unwrap(), &opts).unwrap().image;
        let [to_left, _] = rig.road_to_views().unwrap();
        for &(x, y) in &[(0.0, 3.0), (0.2, 3.5), (-0.2, 2.6), (0.1, 4.0)] {
            let proj = rig.camera.project(&to_left.apply(&Vector3::new(x, y, 0.0)));
            let (u, v) = (proj.u.round() as usize, proj.v.round() as usize);
            // depth of the plane point seen at the integer pixel
            let pose = rig.left_to_road().unwrap();
            let ray = pose.apply_direction(&rig.camera.ray_direction(u as f64, v as f64));
            let hit = pose.apply(&Vector3::zeros()) + ray * (-pose.translation().z / ray.z);
            let expected = rig.camera.fx * rig.camera.baseline / to_left.apply(&hit).z;
            let found = match_disparity(&left, &right, u, v, expected);
            assert!((found - expected).abs() < 0.5, "({x}, {y}): {found} vs {expected}");
        }
    }

    proptest! {
        #[test]
        fn rectified_views_share_rows(x in -0.5f64..0.5, y in 2.2f64..6.0, z in -0.2f64..0.2) {
            let rig = small_rig();
            let [l, r] = rig.road_to_views().unwrap();
            let p = Vector3::new(x, y, z);
            let (a, b) = (rig.camera.project(&l.apply(&p)), rig.camera.project(&r.apply(&p)));
            prop_assert!((a.v - b.v).abs() < 1e-6);
        }

        #[test]
        fn texture_stays_in_unit_range(x in -10.0f64..10.0, y in -10.0f64..10.0, seed in any::<u64>()) {
            let t = TextureField { seed, ..TextureField::default() };
            let v = t.eval(x, y);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, t.eval(x, y));
        }

        #[test]
        fn random_scenes_stay_within_bounds(seed in any::<u64>(), k in 0usize..7) {
            let grid = small_grid();
            let scene = make_scene(SceneKind::ALL[k], &grid, TextureField::default(), seed).unwrap();
            let map = scene.height.sample_grid(&grid);
            prop_assert!(map.values.iter().all(|v| v.abs() <= 20.0));
        }
    }

    #[test]
    fn one_point_per_cell_recovers_plane_exactly() {
        let grid = small_grid();
        let hf = HeightField::flat(0.01).unwrap();
        let density = 1.0 / (0.03 * 0.03);
        let cloud = sample_point_cloud(&hf, &grid, density, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(cloud.len(), grid.cells());
        let map = generate_gt(&cloud, &grid).unwrap();
        assert!(map.valid_count() > grid.cells() / 2);
        for k in 0..grid.cells() {
            if map.mask[k] {
                assert_eq!(map.values[k], 1.0);
            }
        }
    }

    #[test]
    fn noisy_cloud_cell_error_matches_standard_error() {
        let grid = small_grid();
        let hf = HeightField::flat(0.0).unwrap();
        let density = 50.0 / (0.03 * 0.03);
        let cloud = sample_point_cloud(&hf, &grid, density, 0.002, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let map = generate_gt(&cloud, &grid).unwrap();
        let n = map.valid_count() as f64;
        let std = (map.values.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        let expected = 0.2 / 50f64.sqrt();
        assert!((std / expected - 1.0).abs() < 0.15, "{std} vs {expected}");
    }

    #[test]
    fn zero_density_gives_empty_map() {
        let grid = small_grid();
        let cloud = sample_point_cloud(&HeightField::flat(0.0).unwrap(), &grid, 0.0, 0.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(cloud.is_empty());
        assert_eq!(generate_gt(&cloud, &grid).unwrap().valid_count(), 0);
        assert!(sample_point_cloud(&HeightField::flat(0.0).unwrap(), &grid, -1.0, 0.0, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
    }

    #[test]
    fn dataset_is_reproducible_with_analytic_labels() {
        let grid = GridSpec { nx: 8, ny: 10, ..small_grid() };
        let rig = RigSpec { camera: CameraModel { width: 64, height: 32, cx: 32.0, cy: 16.0, fx: 80.0, fy: 80.0, baseline: 0.3 }, ..small_rig() };
        let spec = DatasetSpec::default();
        let a = make_dataset(8, &grid, &rig, &spec, 5).unwrap();
        let b = make_dataset(8, &grid, &rig, &spec, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        for s in &a {
            assert_eq!(s.gt.valid_count(), grid.cells());
            assert!(s.right.is_some());
            for i in 0..grid.ny {
                for j in 0..grid.nx {
                    let (x, y) = grid.cell_center(i, j);
                    assert_eq!(s.gt.get(i, j), Some(s.scene.height.eval(x, y) * 100.0));
                }
            }
        }
        assert_ne!(a[0].scene, a[7].scene);
    }
}
