//! One JSON document describing a run: grid, bins, voxels, rig, model,
//! optimizer, training schedule, dataset and seed.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::{AdamW, OneCycle};
use crate::elevation_grid::{BinSpec, GridSpec};
use crate::error::{Error, Result};
use crate::geometry::CameraModel;
use crate::heads::{BackboneConfig, ModelConfig, ModelKind};
use crate::synthetic::{DatasetSpec, RigSpec};
use crate::voxel_engine::{build_voxel_grid, VoxelGrid};

/// Elevation bins by width, in cm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BinsConfig {
    pub e_min: f64,
    pub e_max: f64,
    pub interval: f64,
}

impl Default for BinsConfig {
    fn default() -> Self {
        Self { e_min: -20.0, e_max: 20.0, interval: 0.5 }
    }
}

/// Vertical voxel layers, in cm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoxelConfig {
    pub z_min: f64,
    pub z_max: f64,
    pub resolution: f64,
}

impl Default for VoxelConfig {
    fn default() -> Self {
        Self { z_min: -20.0, z_max: 20.0, resolution: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Peak learning rate; overrides the per-kind value when set.
    pub lr: Option<f64>,
    pub mono_lr: f64,
    pub stereo_lr: f64,
    pub adamw: AdamW,
    pub warmup_fraction: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: None, mono_lr: 8e-4, stereo_lr: 5e-4, adamw: AdamW::default(), warmup_fraction: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Overrides the per-kind epoch count when set.
    pub epochs: Option<usize>,
    pub mono_epochs: usize,
    pub stereo_epochs: usize,
    pub batch_size: usize,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { epochs: None, mono_epochs: 50, stereo_epochs: 40, batch_size: 8, checkpoint_every: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Directory of stored frames; synthetic scenes are generated when unset.
    pub dir: Option<PathBuf>,
    pub n_train: usize,
    pub n_heldout: usize,
    pub synthetic: DatasetSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { dir: None, n_train: 64, n_heldout: 16, synthetic: DatasetSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: GridSpec,
    pub bins: BinsConfig,
    pub voxel: VoxelConfig,
    pub rig: RigSpec,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub training: TrainingConfig,
    pub dataset: DatasetConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            bins: BinsConfig::default(),
            voxel: VoxelConfig::default(),
            rig: RigSpec::default(),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            training: TrainingConfig::default(),
            dataset: DatasetConfig::default(),
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Camera used by the toy profile: 192x96 pixels looking at a 1.92 m deep
/// patch from 1.10 m.
pub fn toy_rig() -> RigSpec {
    RigSpec {
        camera: CameraModel { fx: 358.0, fy: 358.0, cx: 96.0, cy: 48.0, width: 192, height: 96, baseline: 0.4 },
        roll: 0.0,
        pitch: 0.375,
        camera_height: crate::geometry::DEFAULT_CAMERA_HEIGHT,
    }
}

impl RunConfig {
    /// Desk-scale profile: 64x32 grid, 16 voxel layers, 32 classes, halved
    /// backbone widths, 30 epochs over 8 scenes at batch size 1.
    pub fn toy(kind: ModelKind) -> Self {
        let mut c = Self::default();
        c.apply_toy();
        c.model.kind = kind;
        c
    }

    pub fn apply_toy(&mut self) {
        self.grid = GridSpec { x_min: -0.48, y_min: 2.1, resolution: 0.03, nx: 32, ny: 64 };
        self.voxel.resolution = (self.voxel.z_max - self.voxel.z_min) / 16.0;
        self.bins.interval = (self.bins.e_max - self.bins.e_min) / 32.0;
        self.rig = toy_rig();
        self.model.backbone = BackboneConfig { widths: [8, 16], channels: 32 };
        self.model.head_width = 16;
        self.optimizer.mono_lr = 3e-3;
        self.optimizer.stereo_lr = 3e-3;
        self.training.mono_epochs = 30;
        self.training.stereo_epochs = 30;
        self.training.batch_size = 1;
        self.dataset.n_train = 8;
        self.dataset.n_heldout = 4;
        self.output_dir = PathBuf::from("runs/toy");
    }

    /// Parses `json` on top of `base`: keys present in the document replace
    /// the base values, nested objects merge key by key.
    pub fn from_json_over(base: &RunConfig, json: &str) -> Result<Self> {
        let overlay: Value =
            serde_json::from_str(json).map_err(|e| Error::config("<document>", e.to_string()))?;
        let cfg = base.overlay(overlay)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `self` with `overlay` merged in, without validation.
    pub fn overlay(&self, overlay: Value) -> Result<Self> {
        let mut merged = serde_json::to_value(self).expect("config serializes");
        merge(&mut merged, overlay);
        serde_json::from_value(merged).map_err(|e| Error::config(error_path(&e), e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn bin_spec(&self) -> Result<BinSpec> {
        let b = &self.bins;
        BinSpec::from_interval(b.e_min, b.e_max, b.interval).map_err(|e| Error::config("bins.interval", e.to_string()))
    }

    pub fn voxel_grid(&self) -> Result<VoxelGrid> {
        let v = &self.voxel;
        build_voxel_grid(self.grid, v.z_min, v.z_max, v.resolution)
            .map_err(|e| Error::config("voxel.resolution", e.to_string()))
    }

    pub fn lr(&self) -> f64 {
        self.optimizer.lr.unwrap_or(match self.model.kind {
            ModelKind::Mono => self.optimizer.mono_lr,
            ModelKind::Stereo => self.optimizer.stereo_lr,
        })
    }

    pub fn epochs(&self) -> usize {
        self.training.epochs.unwrap_or(match self.model.kind {
            ModelKind::Mono => self.training.mono_epochs,
            ModelKind::Stereo => self.training.stereo_epochs,
        })
    }

    pub fn schedule(&self, total_steps: usize) -> OneCycle {
        OneCycle { warmup_fraction: self.optimizer.warmup_fraction, ..OneCycle::new(self.lr(), total_steps) }
    }

    /// Checks every section; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let bins = self.bin_spec()?;
        bins.validate()?;
        self.voxel_grid()?;
        self.rig.camera.validate()?;
        if !(self.rig.camera_height > 0.0) {
            return Err(Error::config("rig.camera_height", "must be positive"));
        }
        if !self.rig.roll.is_finite() || !self.rig.pitch.is_finite() {
            return Err(Error::config("rig", "roll and pitch must be finite"));
        }
        let cam = &self.rig.camera;
        if cam.width % 4 != 0 || cam.height % 4 != 0 {
            return Err(Error::config("rig.camera", "width and height must be multiples of 4"));
        }
        if self.model.kind == ModelKind::Stereo && !(cam.baseline > 0.0) {
            return Err(Error::config("rig.camera.baseline", "stereo needs a positive baseline"));
        }
        self.model.validate()?;
        if let Some(n) = self.model.n_classes {
            if n != bins.n_classes {
                return Err(Error::config(
                    "model.n_classes",
                    format!("{n} disagrees with the {} bins implied by bins.interval", bins.n_classes),
                ));
            }
        }
        if !(self.lr() > 0.0 && self.lr().is_finite()) {
            return Err(Error::config("optimizer.lr", "must be positive"));
        }
        let w = self.optimizer.warmup_fraction;
        if !(0.0..1.0).contains(&w) {
            return Err(Error::config("optimizer.warmup_fraction", "must lie in [0, 1)"));
        }
        let a = &self.optimizer.adamw;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) || !(a.weight_decay >= 0.0) {
            return Err(Error::config("optimizer.adamw", "betas must lie in [0, 1), eps > 0, weight_decay >= 0"));
        }
        if self.epochs() == 0 {
            return Err(Error::config("training.epochs", "must be positive"));
        }
        if self.training.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be positive"));
        }
        if self.dataset.n_train == 0 {
            return Err(Error::config("dataset.n_train", "must be positive"));
        }
        if self.dataset.dir.is_none() {
            let s = &self.dataset.synthetic;
            if s.kinds.is_empty() {
                return Err(Error::config("dataset.synthetic.kinds", "needs at least one scene kind"));
            }
            if self.model.kind == ModelKind::Stereo && !s.stereo {
                return Err(Error::config("dataset.synthetic.stereo", "stereo model needs right images"));
            }
            s.texture.validate()?;
        }
        Ok(())
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn error_path(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    msg.split('`').nth(1).map(str::to_string).unwrap_or_else(|| "<document>".into())
}
