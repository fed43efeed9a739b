//! On-disk formats: elevation maps, point clouds, images, poses and frame
//! directories.
//!
//! A frame directory holds
//!
//! ```text
//! left.png             required
//! right.png            required for stereo models
//! cloud.txt | cloud.pcd  road-frame points in metres (text triples or PCD ASCII)
//! pose.json            {"roll": .., "pitch": .., "camera_height": .., "camera": {..}}
//! ```
//!
//! `camera_height` and `camera` are optional and default to the run's rig.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::elevation_grid::{generate_gt, ElevationMap, GridSpec};
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, FrameTag, PointBatch};
use crate::synthetic::{GrayImage, RigSpec, Scene, SyntheticSample};
use crate::training::Frame;

const RBEV_MAGIC: &[u8; 4] = b"RBEV";
const RBEV_VERSION: u32 = 1;
const RBEV_HEADER: usize = 4 + 4 * 3 + 4 * 3;

pub const LEFT_IMAGE: &str = "left.png";
pub const RIGHT_IMAGE: &str = "right.png";
pub const CLOUD_TEXT: &str = "cloud.txt";
pub const CLOUD_PCD: &str = "cloud.pcd";
pub const POSE_FILE: &str = "pose.json";
pub const GT_FILE: &str = "gt.rbev";
pub const SCENE_FILE: &str = "scene.json";

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write(path, text)
}

/// Elevation map in the binary `RBEV` layout: little-endian header (magic,
/// version, ny, nx, resolution, x_min, y_min), f32 values in cm, u8 mask.
pub fn elevation_to_bytes(map: &ElevationMap, grid: &GridSpec) -> Result<Vec<u8>> {
    if (map.ny, map.nx) != (grid.ny, grid.nx) {
        return Err(Error::Contract(format!(
            "map is {}x{}, grid is {}x{}",
            map.ny, map.nx, grid.ny, grid.nx
        )));
    }
    let n = map.values.len();
    let mut out = Vec::with_capacity(RBEV_HEADER + 5 * n);
    out.extend_from_slice(RBEV_MAGIC);
    for v in [RBEV_VERSION, map.ny as u32, map.nx as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in [grid.resolution, grid.x_min, grid.y_min] {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &v in &map.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.extend(map.mask.iter().map(|&m| u8::from(m)));
    Ok(out)
}

/// Inverse of [`elevation_to_bytes`]; the grid comes back at f32 precision.
pub fn elevation_from_bytes(buf: &[u8]) -> Result<(ElevationMap, GridSpec)> {
    let corrupt = |m: &str| Error::Data(format!("elevation file: {m}"));
    if buf.len() < RBEV_HEADER || &buf[..4] != RBEV_MAGIC {
        return Err(corrupt("bad magic or truncated header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().expect("4 bytes"));
    let f32_at = |o: usize| f32::from_le_bytes(buf[o..o + 4].try_into().expect("4 bytes"));
    if u32_at(4) != RBEV_VERSION {
        return Err(corrupt(&format!("unsupported version {}", u32_at(4))));
    }
    let (ny, nx) = (u32_at(8) as usize, u32_at(12) as usize);
    let n = ny.checked_mul(nx).ok_or_else(|| corrupt("size overflow"))?;
    if buf.len() != RBEV_HEADER + 5 * n {
        return Err(corrupt(&format!("expected {} bytes for {ny}x{nx}, got {}", RBEV_HEADER + 5 * n, buf.len())));
    }
    let grid = GridSpec {
        resolution: f32_at(16) as f64,
        x_min: f32_at(20) as f64,
        y_min: f32_at(24) as f64,
        nx,
        ny,
    };
    let values = (0..n).map(|k| f32_at(RBEV_HEADER + 4 * k) as f64).collect();
    let mask_at = RBEV_HEADER + 4 * n;
    let mut mask = Vec::with_capacity(n);
    for &b in &buf[mask_at..] {
        match b {
            0 => mask.push(false),
            1 => mask.push(true),
            _ => return Err(corrupt(&format!("mask byte {b}"))),
        }
    }
    Ok((ElevationMap { ny, nx, values, mask }, grid))
}

pub fn write_elevation(path: &Path, map: &ElevationMap, grid: &GridSpec) -> Result<()> {
    write(path, elevation_to_bytes(map, grid)?)
}

pub fn read_elevation(path: &Path) -> Result<(ElevationMap, GridSpec)> {
    elevation_from_bytes(&read(path)?).map_err(|e| at_path(path, e))
}

fn at_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    }
}

/// Parses `x y z` lines (metres, road frame). Blank lines and lines starting
/// with `#` are skipped; extra columns are ignored.
pub fn parse_cloud_text(text: &str) -> Result<PointBatch> {
    let mut points = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let p = parse_triple(line.split_whitespace(), n + 1)?;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("line {}: non-finite coordinate", n + 1)));
        }
        points.push(p);
    }
    Ok(PointBatch::new(FrameTag::Road, points))
}

fn parse_triple<'a>(mut fields: impl Iterator<Item = &'a str>, line: usize) -> Result<Vector3<f64>> {
    let mut xyz = [0.0f64; 3];
    for v in &mut xyz {
        let f = fields.next().ok_or_else(|| Error::Data(format!("line {line}: expected x y z")))?;
        *v = f.parse().map_err(|_| Error::Data(format!("line {line}: `{f}` is not a number")))?;
    }
    Ok(Vector3::from(xyz))
}

/// Parses an ASCII PCD file, reading the `x`, `y`, `z` fields. Points with
/// a non-finite coordinate (organized-cloud holes) are dropped.
pub fn parse_cloud_pcd(text: &str) -> Result<PointBatch> {
    let mut fields: Vec<String> = Vec::new();
    let mut lines = text.lines().enumerate();
    for (n, line) in lines.by_ref() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("FIELDS") => fields = parts.map(str::to_string).collect(),
            Some("DATA") => {
                let kind = parts.next().unwrap_or("");
                if kind != "ascii" {
                    return Err(Error::Data(format!("line {}: only ascii PCD data is supported, got `{kind}`", n + 1)));
                }
                break;
            }
            _ => {}
        }
    }
    let idx = |name: &str| {
        fields
            .iter()
            .position(|f| f == name)
            .ok_or_else(|| Error::Data(format!("PCD header lacks field `{name}`")))
    };
    let cols = [idx("x")?, idx("y")?, idx("z")?];
    let mut points = Vec::new();
    for (n, line) in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.is_empty() {
            continue;
        }
        if parts.len() < fields.len() {
            return Err(Error::Data(format!("line {}: expected {} fields", n + 1, fields.len())));
        }
        let p = parse_triple(cols.iter().map(|&c| parts[c]), n + 1)?;
        if p.iter().all(|v| v.is_finite()) {
            points.push(p);
        }
    }
    Ok(PointBatch::new(FrameTag::Road, points))
}

/// Reads `.pcd` files as PCD ASCII and anything else as text triples.
pub fn read_cloud(path: &Path) -> Result<PointBatch> {
    let text = read_text(path)?;
    let parsed = if path.extension().is_some_and(|e| e == "pcd") {
        parse_cloud_pcd(&text)
    } else {
        parse_cloud_text(&text)
    };
    parsed.map_err(|e| at_path(path, e))
}

pub fn write_cloud(path: &Path, cloud: &PointBatch) -> Result<()> {
    if cloud.frame != FrameTag::Road {
        return Err(Error::FrameMismatch { expected: FrameTag::Road, actual: cloud.frame });
    }
    let mut s = String::with_capacity(cloud.points.len() * 32);
    for p in &cloud.points {
        s.push_str(&format!("{} {} {}\n", p.x, p.y, p.z));
    }
    write(path, s)
}

/// 16-bit grayscale PNG.
pub fn write_gray_png(path: &Path, img: &GrayImage) -> Result<()> {
    let data: Vec<u16> = img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(img.width as u32, img.height as u32, data)
        .expect("buffer matches dimensions");
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    buf.save(path).map_err(|e| Error::Image { path: path.into(), message: e.to_string() })
}

/// Any PNG, converted to gray in [0, 1].
pub fn read_gray_png(path: &Path) -> Result<GrayImage> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "image not found")));
    }
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), message: e.to_string() })?;
    let luma = img.into_luma16();
    Ok(GrayImage {
        width: luma.width() as usize,
        height: luma.height() as usize,
        data: luma.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
    })
}

/// Camera attitude for a frame: roll and pitch in radians relative to the
/// levelled reference frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseFile {
    pub roll: f64,
    pub pitch: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_height: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<CameraModel>,
}

impl PoseFile {
    pub fn from_rig(rig: &RigSpec) -> Self {
        Self { roll: rig.roll, pitch: rig.pitch, camera_height: Some(rig.camera_height), camera: Some(rig.camera) }
    }

    /// `base` with this pose's attitude and any overrides applied.
    pub fn rig(&self, base: &RigSpec) -> RigSpec {
        RigSpec {
            camera: self.camera.unwrap_or(base.camera),
            roll: self.roll,
            pitch: self.pitch,
            camera_height: self.camera_height.unwrap_or(base.camera_height),
        }
    }
}

/// Roll and pitch from a camera-to-reference rotation `R = Rz(roll) Rx(pitch)`
/// given as a row-major 3x3, 3x4 or 4x4 matrix. This reads a generic extrinsic;
/// it has not been checked against any real dataset's pose files.
pub fn pose_from_rotation_text(text: &str) -> Result<PoseFile> {
    let vals: Vec<f64> = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| Error::Data(format!("`{s}` is not a number"))))
        .collect::<Result<_>>()?;
    let m = match vals.len() {
        9 => Matrix3::from_row_slice(&vals),
        12 | 16 => Matrix3::new(vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10]),
        n => return Err(Error::Data(format!("expected 9, 12 or 16 matrix entries, got {n}"))),
    };
    if (m * m.transpose() - Matrix3::identity()).abs().max() > 1e-6 {
        return Err(Error::Data("rotation part is not orthonormal".into()));
    }
    // m[1][0] = sin r, m[0][0] = cos r, m[2][1] = -sin p, m[2][2] = cos p
    Ok(PoseFile {
        roll: m[(1, 0)].atan2(m[(0, 0)]),
        pitch: (-m[(2, 1)]).atan2(m[(2, 2)]),
        camera_height: None,
        camera: None,
    })
}

/// Loads a frame directory. `stereo` demands the right image; ground truth
/// is rasterized from the cloud over `grid`.
pub fn load_frame_dir(dir: &Path, base_rig: &RigSpec, grid: &GridSpec, stereo: bool) -> Result<Frame> {
    let need = |name: &str| -> Result<PathBuf> {
        let p = dir.join(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::Data(format!("missing {}", p.display())))
        }
    };
    let pose_path = need(POSE_FILE)?;
    let pose: PoseFile = serde_json::from_str(&read_text(&pose_path)?)
        .map_err(|e| Error::Data(format!("{}: {e}", pose_path.display())))?;
    let rig = pose.rig(base_rig);
    rig.camera.validate()?;
    let left = read_gray_png(&need(LEFT_IMAGE)?)?;
    let right = if stereo {
        Some(read_gray_png(&need(RIGHT_IMAGE)?)?)
    } else {
        dir.join(RIGHT_IMAGE).exists().then(|| read_gray_png(&dir.join(RIGHT_IMAGE))).transpose()?
    };
    for img in std::iter::once(&left).chain(right.as_ref()) {
        if (img.width, img.height) != (rig.camera.width as usize, rig.camera.height as usize) {
            return Err(Error::Contract(format!(
                "{}: image is {}x{}, camera is {}x{}",
                dir.display(),
                img.width,
                img.height,
                rig.camera.width,
                rig.camera.height
            )));
        }
    }
    let cloud_path = [CLOUD_TEXT, CLOUD_PCD]
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.exists())
        .ok_or_else(|| Error::Data(format!("missing {} or {}", dir.join(CLOUD_TEXT).display(), CLOUD_PCD)))?;
    let gt = generate_gt(&read_cloud(&cloud_path)?, grid)?;
    Ok(Frame { left, right, gt, rig })
}

/// Sub-directories of `root` in name order, each loaded as a frame.
pub fn load_frame_dirs(root: &Path, base_rig: &RigSpec, grid: &GridSpec, stereo: bool) -> Result<Vec<Frame>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("{} has no frame directories", root.display())));
    }
    dirs.iter().map(|d| load_frame_dir(d, base_rig, grid, stereo)).collect()
}

/// Scene record written next to a generated frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene: Scene,
    pub rig: RigSpec,
    pub nonconverged_rays: usize,
}

/// Writes a generated sample as a frame directory plus the analytic ground
/// truth and the scene record.
pub fn write_sample_dir(dir: &Path, sample: &SyntheticSample, cloud: &PointBatch, grid: &GridSpec) -> Result<()> {
    write_gray_png(&dir.join(LEFT_IMAGE), &sample.left)?;
    if let Some(r) = &sample.right {
        write_gray_png(&dir.join(RIGHT_IMAGE), r)?;
    }
    write_cloud(&dir.join(CLOUD_TEXT), cloud)?;
    write_elevation(&dir.join(GT_FILE), &sample.gt, grid)?;
    let pose = serde_json::to_string_pretty(&PoseFile::from_rig(&sample.rig)).expect("pose serializes");
    write_text(&dir.join(POSE_FILE), &pose)?;
    let record = SceneRecord { scene: sample.scene.clone(), rig: sample.rig, nonconverged_rays: sample.nonconverged };
    write_text(&dir.join(SCENE_FILE), &serde_json::to_string_pretty(&record).expect("scene serializes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{camera_to_road, rotation_from_roll_pitch};
    use proptest::prelude::*;

    fn small_grid() -> GridSpec {
        GridSpec { x_min: -0.09, y_min: 2.1, resolution: 0.03, nx: 6, ny: 4 }
    }

    #[test]
    fn elevation_round_trip() {
        let grid = small_grid();
        let mut map = ElevationMap::empty(4, 6);
        map.values[3] = 1.25;
        map.mask[3] = true;
        map.values[7] = -3.5;
        map.mask[7] = true;
        let bytes = elevation_to_bytes(&map, &grid).unwrap();
        assert_eq!(&bytes[..4], b"RBEV");
        assert_eq!(bytes.len(), 28 + 5 * 24);
        let (back, g) = elevation_from_bytes(&bytes).unwrap();
        assert_eq!(back, map);
        assert_eq!((g.ny, g.nx), (4, 6));
        assert!((g.x_min - grid.x_min).abs() < 1e-7 && (g.resolution - 0.03).abs() < 1e-7);
    }

    #[test]
    fn corrupt_elevation_files_are_rejected() {
        let bytes = elevation_to_bytes(&ElevationMap::empty(4, 6), &small_grid()).unwrap();
        assert!(elevation_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(elevation_from_bytes(&bad).is_err());
        let mut bad = bytes;
        *bad.last_mut().unwrap() = 7;
        assert!(elevation_from_bytes(&bad).is_err());
    }

    #[test]
    fn three_point_cloud_matches_hand_means() {
        let text = "# x y z\n-0.085 2.105 0.010\n-0.080 2.110 0.020\n\n0.05 2.2 -0.03\n";
        let grid = small_grid();
        let map = generate_gt(&parse_cloud_text(text).unwrap(), &grid).unwrap();
        assert_eq!(map.get(0, 0), Some(1.5));
        assert_eq!(map.get(3, 4), Some(-3.0));
        assert_eq!(map.valid_count(), 2);
    }

    #[test]
    fn cloud_text_errors_name_the_line() {
        let err = parse_cloud_text("0 0 0\n1 2\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(parse_cloud_text("0 0 abc").is_err());
    }

    #[test]
    fn pcd_ascii_reads_xyz_columns() {
        let pcd = "# .PCD v0.7\nVERSION 0.7\nFIELDS x y z intensity\nSIZE 4 4 4 4\nTYPE F F F F\nCOUNT 1 1 1 1\n\
                   WIDTH 2\nHEIGHT 1\nPOINTS 2\nDATA ascii\n0.1 2.5 0.01 9\n-0.2 3.0 -0.02 3\n";
        let cloud = parse_cloud_pcd(pcd).unwrap();
        assert_eq!(cloud.points, vec![Vector3::new(0.1, 2.5, 0.01), Vector3::new(-0.2, 3.0, -0.02)]);
        assert!(parse_cloud_pcd("FIELDS x y\nDATA ascii\n1 2\n").is_err());
        assert!(parse_cloud_pcd("FIELDS x y z\nDATA binary\n").is_err());
    }

    #[test]
    fn zero_pose_gives_identity_rotation() {
        let pose: PoseFile = serde_json::from_str(r#"{"roll": 0.0, "pitch": 0.0}"#).unwrap();
        let r = rotation_from_roll_pitch(pose.roll, pose.pitch).unwrap();
        assert_eq!(r.rotation(), &Matrix3::identity());
        assert!(serde_json::from_str::<PoseFile>(r#"{"roll": 0, "pitch": 0, "yaw": 0}"#).is_err());
    }

    #[test]
    fn rotation_text_recovers_roll_and_pitch() {
        let r = rotation_from_roll_pitch(0.03, 0.31).unwrap();
        let text: Vec<String> = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| r.rotation()[(i, j)].to_string()).collect();
        let pose = pose_from_rotation_text(&text.join(" ")).unwrap();
        assert!((pose.roll - 0.03).abs() < 1e-12 && (pose.pitch - 0.31).abs() < 1e-12);
        assert!(pose_from_rotation_text("1 0 0 0 2 0 0 0 1").is_err());
    }

    #[test]
    fn png_round_trip_is_close() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage { width: 5, height: 3, data: (0..15).map(|k| k as f32 / 14.0).collect() };
        let path = dir.path().join("a.png");
        write_gray_png(&path, &img).unwrap();
        let back = read_gray_png(&path).unwrap();
        assert_eq!((back.width, back.height), (5, 3));
        assert!(img.data.iter().zip(&back.data).all(|(a, b)| (a - b).abs() < 1e-4));
    }

    #[test]
    fn frame_directory_round_trip_and_missing_right_image() {
        let dir = tempfile::tempdir().unwrap();
        let rig = RigSpec {
            camera: CameraModel { fx: 100.0, fy: 100.0, cx: 16.0, cy: 8.0, width: 32, height: 16, baseline: 0.3 },
            ..RigSpec::default()
        };
        let img = GrayImage { width: 32, height: 16, data: vec![0.5; 512] };
        write_gray_png(&dir.path().join(LEFT_IMAGE), &img).unwrap();
        write_text(&dir.path().join(POSE_FILE), r#"{"roll": 0.0, "pitch": 0.3}"#).unwrap();
        write_text(&dir.path().join(CLOUD_TEXT), "0.0 2.2 0.01\n").unwrap();
        let grid = small_grid();
        let frame = load_frame_dir(dir.path(), &rig, &grid, false).unwrap();
        assert_eq!(frame.rig.pitch, 0.3);
        assert_eq!(frame.gt.valid_count(), 1);
        assert!(camera_to_road(frame.rig.roll, frame.rig.pitch, frame.rig.camera_height).is_ok());
        let err = load_frame_dir(dir.path(), &rig, &grid, true).unwrap_err().to_string();
        assert!(err.contains("right.png"), "{err}");
        fs::remove_file(dir.path().join(CLOUD_TEXT)).unwrap();
        let err = load_frame_dir(dir.path(), &rig, &grid, false).unwrap_err().to_string();
        assert!(err.contains("cloud.txt"), "{err}");
    }

    proptest! {
        #[test]
        fn cloud_text_round_trip(pts in prop::collection::vec((-5.0f64..5.0, 0.0f64..10.0, -0.2f64..0.2), 0..40)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.txt");
            let batch = PointBatch::new(FrameTag::Road, pts.iter().map(|&(x, y, z)| Vector3::new(x, y, z)).collect());
            write_cloud(&path, &batch).unwrap();
            prop_assert_eq!(read_cloud(&path).unwrap().points, batch.points);
        }
    }
}
