//! Sweeps over configuration overrides, one CSV row per variant.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::heads::{ModelKind, VolumeMode};
use crate::training::{Frame, Pipeline};

/// Class intervals in cm for the bin-width sweep.
pub const CLASS_INTERVALS_CM: [f64; 6] = [2.0, 1.6, 1.0, 0.8, 0.5, 0.4];
/// Voxel heights in cm for the voxel-resolution sweep.
pub const VOXEL_RESOLUTIONS_CM: [f64; 3] = [0.5, 1.0, 2.0];
pub const FEATURE_STRIDES: [usize; 2] = [4, 2];
pub const VOLUME_MODES: [VolumeMode; 2] = [VolumeMode::Subtract, VolumeMode::Multiply];

/// A named JSON overlay applied to the base config.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub id: String,
    pub overlay: Value,
}

pub fn class_interval_sweep() -> Vec<Variant> {
    CLASS_INTERVALS_CM
        .iter()
        .map(|&i| Variant { id: format!("interval_{i}"), overlay: json!({"bins": {"interval": i}}) })
        .collect()
}

pub fn voxel_resolution_sweep() -> Vec<Variant> {
    VOXEL_RESOLUTIONS_CM
        .iter()
        .map(|&r| Variant { id: format!("voxel_{r}"), overlay: json!({"voxel": {"resolution": r}}) })
        .collect()
}

/// Stereo models over feature stride x volume construction.
pub fn feature_volume_sweep() -> Vec<Variant> {
    let mut out = Vec::new();
    for s in FEATURE_STRIDES {
        for m in VOLUME_MODES {
            out.push(Variant {
                id: format!("stride{s}_{}", m.as_str()),
                overlay: json!({"model": {"kind": "stereo", "feature_stride": s, "volume_mode": m.as_str()}}),
            });
        }
    }
    out
}

/// One variant's outcome. Metric columns are empty when the variant failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant_id: String,
    pub model_kind: String,
    pub class_interval_cm: Option<f64>,
    pub n_classes: Option<usize>,
    pub voxel_res_cm: Option<f64>,
    pub feature_stride: Option<usize>,
    pub volume_mode: String,
    pub abs_err_cm: Option<f64>,
    pub rmse_cm: Option<f64>,
    pub frac_gt_half: Option<f64>,
    pub n_valid: Option<usize>,
    /// Host seconds per frame; not comparable across machines.
    pub wall_s_per_frame: Option<f64>,
    pub status: String,
}

impl AblationRow {
    /// Every column except the variant name and the timing.
    pub fn same_result(&self, other: &Self) -> bool {
        let strip = |r: &Self| AblationRow { variant_id: String::new(), wall_s_per_frame: None, ..r.clone() };
        strip(self) == strip(other)
    }
}

fn config_columns(id: &str, cfg: Option<&RunConfig>, status: String) -> AblationRow {
    let bins = cfg.and_then(|c| c.bin_spec().ok());
    AblationRow {
        variant_id: id.to_string(),
        model_kind: cfg.map(|c| c.model.kind.as_str().to_string()).unwrap_or_default(),
        class_interval_cm: cfg.map(|c| c.bins.interval),
        n_classes: bins.map(|b| b.n_classes),
        voxel_res_cm: cfg.map(|c| c.voxel.resolution),
        feature_stride: cfg.map(|c| c.model.stride()),
        volume_mode: match cfg {
            Some(c) if c.model.kind == ModelKind::Stereo => c.model.volume_mode.as_str().to_string(),
            Some(_) => "none".to_string(),
            None => String::new(),
        },
        abs_err_cm: None,
        rmse_cm: None,
        frac_gt_half: None,
        n_valid: None,
        wall_s_per_frame: None,
        status,
    }
}

fn run_variant(base: &RunConfig, v: &Variant, train: &[Frame], eval: &[Frame]) -> AblationRow {
    let cfg = match base.overlay(v.overlay.clone()) {
        Ok(c) => c,
        Err(e) => return config_columns(&v.id, None, format!("failed: {e}")),
    };
    let outcome = (|| -> Result<_> {
        let pipe = Pipeline::new(&cfg)?;
        let train = pipe.prepare_all(train)?;
        let eval = pipe.prepare_all(eval)?;
        let out = pipe.train(&train, |_, _| Ok(()))?;
        pipe.evaluate(&out.params, &eval)
    })();
    match outcome {
        Ok(ev) => {
            let r = ev.report;
            AblationRow {
                abs_err_cm: Some(r.abs_err_cm),
                rmse_cm: Some(r.rmse_cm),
                frac_gt_half: Some(r.frac_gt_half),
                n_valid: Some(r.n_valid),
                wall_s_per_frame: Some(r.wall_s_per_frame),
                ..config_columns(&v.id, Some(&cfg), "ok".into())
            }
        }
        Err(e) => {
            log::warn!("variant {} failed: {e}", v.id);
            config_columns(&v.id, Some(&cfg), format!("failed: {e}"))
        }
    }
}

/// Trains and evaluates every variant with the base seed and budget. Rows
/// come back in variant order whatever the scheduling; `parallel` runs
/// variants concurrently on the current rayon pool.
pub fn run_ablation(base: &RunConfig, variants: &[Variant], train: &[Frame], eval: &[Frame], parallel: bool) -> Vec<AblationRow> {
    if parallel {
        variants.par_iter().map(|v| run_variant(base, v, train, eval)).collect()
    } else {
        variants.iter().map(|v| run_variant(base, v, train, eval)).collect()
    }
}

pub fn rows_to_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<AblationRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Data(e.to_string()))
}
