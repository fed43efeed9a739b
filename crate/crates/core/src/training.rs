//! Frames to tensors, the training loop and evaluation.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor};
use crate::config::RunConfig;
use crate::elevation_grid::{elevation_to_labels, BinSpec, ElevationMap, LabelTensor};
use crate::error::{Error, Result};
use crate::heads::{self, ModelKind, ViewInput, VolumeDims};
use crate::metrics::{compute_metrics_many, distance_profile_many, DistanceProfile, MetricReport};
use crate::seeds::substream;
use crate::synthetic::{GrayImage, RigSpec, SyntheticSample};
use crate::voxel_engine::{ProjectionCache, VoxelGrid};

/// One labelled observation: images, the rig that took them and the
/// elevation ground truth in cm.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub left: GrayImage,
    pub right: Option<GrayImage>,
    pub gt: ElevationMap,
    pub rig: RigSpec,
}

impl From<&SyntheticSample> for Frame {
    fn from(s: &SyntheticSample) -> Self {
        Self { left: s.left.clone(), right: s.right.clone(), gt: s.gt.clone(), rig: s.rig }
    }
}

/// A frame turned into network inputs and class labels.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub views: Vec<ViewInput<f32>>,
    pub labels: LabelTensor,
    pub gt: ElevationMap,
}

/// Per-step training record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

pub struct TrainOutput {
    pub params: ParamStore<f32>,
    pub log: Vec<StepRecord>,
    /// Wall-clock seconds per epoch; kept apart from the log, which must be
    /// reproducible.
    pub epoch_wall_s: Vec<f64>,
}

/// Everything fixed by a config: bins, voxels and cached projections.
pub struct Pipeline {
    pub cfg: RunConfig,
    pub bins: BinSpec,
    pub vox: VoxelGrid,
    cache: ProjectionCache,
}

fn image_tensor(img: &GrayImage) -> Tensor<f32> {
    let mut t = img.to_tensor::<f32>();
    t.data_mut().iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
    t
}

impl Pipeline {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg: cfg.clone(), bins: cfg.bin_spec()?, vox: cfg.voxel_grid()?, cache: ProjectionCache::new() })
    }

    pub fn n_classes(&self) -> usize {
        self.bins.n_classes
    }

    pub fn dims(&self) -> VolumeDims {
        VolumeDims { nz: self.vox.nz, ny: self.vox.grid.ny, nx: self.vox.grid.nx }
    }

    pub fn init_params(&self) -> ParamStore<f32> {
        let mut rng = substream(self.cfg.seed, "init", 0);
        heads::init_params(&self.cfg.model, self.n_classes(), self.vox.nz, &mut rng)
    }

    pub fn prepare(&self, frame: &Frame) -> Result<Prepared> {
        let g = &self.vox.grid;
        if (frame.gt.ny, frame.gt.nx) != (g.ny, g.nx) {
            return Err(Error::Contract(format!(
                "ground truth is {}x{}, grid is {}x{}",
                frame.gt.ny, frame.gt.nx, g.ny, g.nx
            )));
        }
        let cam = &frame.rig.camera;
        let [road_to_left, road_to_right] = frame.rig.road_to_views()?;
        let mut images = vec![(&frame.left, road_to_left)];
        if self.cfg.model.kind == ModelKind::Stereo {
            let right = frame
                .right
                .as_ref()
                .ok_or_else(|| Error::Data("stereo model needs a right image".into()))?;
            images.push((right, road_to_right));
        }
        let stride = self.cfg.model.stride();
        let mut views = Vec::with_capacity(images.len());
        for (img, pose) in images {
            if (img.width, img.height) != (cam.width as usize, cam.height as usize) {
                return Err(Error::Contract(format!(
                    "image is {}x{}, camera is {}x{}",
                    img.width, img.height, cam.width, cam.height
                )));
            }
            let (table, plan) = self.cache.get(&self.vox, &pose, cam, stride, self.cfg.model.sample_mode)?;
            views.push(ViewInput { image: image_tensor(img), plan, valid: Arc::new(table.valid.clone()) });
        }
        Ok(Prepared { views, labels: elevation_to_labels(&frame.gt, &self.bins)?, gt: frame.gt.clone() })
    }

    pub fn prepare_all(&self, frames: &[Frame]) -> Result<Vec<Prepared>> {
        frames.iter().map(|f| self.prepare(f)).collect()
    }

    fn logits(&self, g: &mut Graph<f32>, params: &ParamStore<f32>, p: &Prepared) -> Result<crate::autodiff::Var> {
        heads::forward(g, params, &self.cfg.model, &p.views, self.dims(), self.n_classes())
    }

    /// Loss and per-parameter gradients of one frame, parameters in store order.
    pub fn sample_gradients(&self, params: &ParamStore<f32>, p: &Prepared) -> Result<(f64, Vec<(String, Vec<f32>)>)> {
        let mut g = Graph::new();
        let logits = self.logits(&mut g, params, p)?;
        let out = heads::masked_ce_loss(&mut g, logits, &p.labels, self.cfg.model.loss_reduction)?;
        let loss = g.value(out.loss).data()[0] as f64;
        let grads = g.backward(out.loss)?;
        let mut summed: Vec<(String, Vec<f32>)> = Vec::new();
        for (name, grad) in grads.params(&g) {
            match summed.iter_mut().find(|(n, _)| n == name) {
                Some((_, acc)) => acc.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
                None => summed.push((name.to_string(), grad.to_vec())),
            }
        }
        Ok((loss, summed))
    }

    pub fn predict(&self, params: &ParamStore<f32>, p: &Prepared) -> Result<ElevationMap> {
        let mut g = Graph::new();
        let logits = self.logits(&mut g, params, p)?;
        heads::soft_argmin(g.value(logits), &self.bins)
    }

    /// Pooled metrics over `data` plus the per-frame predictions.
    pub fn evaluate(&self, params: &ParamStore<f32>, data: &[Prepared]) -> Result<Evaluation> {
        let start = Instant::now();
        let preds = data.iter().map(|p| self.predict(params, p)).collect::<Result<Vec<_>>>()?;
        let wall = start.elapsed().as_secs_f64() / data.len().max(1) as f64;
        let pairs: Vec<_> = preds.iter().zip(data).map(|(e, p)| (e, &p.gt)).collect();
        let mut report = compute_metrics_many(&pairs)?;
        report.wall_s_per_frame = wall;
        let profile = distance_profile_many(&pairs)?;
        Ok(Evaluation { report, profile, predictions: preds })
    }

    /// Mini-batch AdamW under the one-cycle schedule. Frame order per epoch
    /// comes from the seed; per-frame gradients may be computed in parallel
    /// but are summed in batch order, so the result does not depend on the
    /// thread count. `on_epoch` sees the parameters after each epoch.
    pub fn train(
        &self,
        data: &[Prepared],
        mut on_epoch: impl FnMut(usize, &ParamStore<f32>) -> Result<()>,
    ) -> Result<TrainOutput> {
        if data.is_empty() {
            return Err(Error::Data("no training frames".into()));
        }
        let batch = self.cfg.training.batch_size.min(data.len());
        let per_epoch = data.len().div_ceil(batch);
        let epochs = self.cfg.epochs();
        let schedule = self.cfg.schedule(epochs * per_epoch);
        let adamw = self.cfg.optimizer.adamw;
        let mut params = self.init_params();
        let mut log = Vec::with_capacity(epochs * per_epoch);
        let mut epoch_wall_s = Vec::with_capacity(epochs);
        let mut step = 0;
        for epoch in 0..epochs {
            let start = Instant::now();
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut substream(self.cfg.seed, "order", epoch as u64));
            for chunk in order.chunks(batch) {
                let results: Vec<_> = chunk.par_iter().map(|&k| self.sample_gradients(&params, &data[k])).collect();
                params.zero_grad();
                let scale = 1.0 / chunk.len() as f64;
                let mut loss = 0.0;
                for r in results {
                    let (l, grads) = r?;
                    loss += l * scale;
                    for (name, grad) in &grads {
                        params.accumulate(name, grad, scale)?;
                    }
                }
                if !loss.is_finite() {
                    return Err(Error::Training { param: "<loss>".into(), message: format!("loss {loss} at step {step}") });
                }
                let lr = schedule.lr(step);
                params.adamw_step(&adamw, lr)?;
                log.push(StepRecord { step, epoch, loss, lr });
                log::debug!("epoch {epoch} step {step} loss {loss:.6} lr {lr:.3e}");
                step += 1;
            }
            epoch_wall_s.push(start.elapsed().as_secs_f64());
            on_epoch(epoch, &params)?;
        }
        Ok(TrainOutput { params, log, epoch_wall_s })
    }
}

pub struct Evaluation {
    pub report: MetricReport,
    pub profile: DistanceProfile,
    pub predictions: Vec<ElevationMap>,
}

/// Mean loss over the first and last `fraction` of the log.
pub fn loss_windows(log: &[StepRecord], fraction: f64) -> Option<(f64, f64)> {
    if log.is_empty() {
        return None;
    }
    let w = ((log.len() as f64 * fraction).ceil() as usize).clamp(1, log.len());
    let mean = |s: &[StepRecord]| s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64;
    Some((mean(&log[..w]), mean(&log[log.len() - w..])))
}

/// TrainLog CSV: `step,epoch,loss,lr`.
pub fn log_to_csv(log: &[StepRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in log {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elevation_grid::GridSpec;
    use crate::heads::{BackboneConfig, ModelConfig};
    use crate::synthetic::{make_dataset, SceneKind};

    fn tiny_cfg(kind: ModelKind) -> RunConfig {
        let mut c = RunConfig::toy(kind);
        c.grid = GridSpec { x_min: -0.24, y_min: 2.4, resolution: 0.03, nx: 16, ny: 16 };
        c.model = ModelConfig { kind, backbone: BackboneConfig { widths: [4, 4], channels: 4 }, head_width: 4, ..c.model };
        c.dataset.synthetic.kinds = vec![SceneKind::SpeedBump, SceneKind::Sinusoid];
        c.training.epochs = Some(2);
        c.training.batch_size = 2;
        c.dataset.n_train = 3;
        c
    }

    fn frames(c: &RunConfig) -> Vec<Frame> {
        make_dataset(c.dataset.n_train, &c.grid, &c.rig, &c.dataset.synthetic, c.seed)
            .unwrap()
            .iter()
            .map(Frame::from)
            .collect()
    }

    #[test]
    fn training_is_independent_of_thread_count() {
        let c = tiny_cfg(ModelKind::Stereo);
        let pipe = Pipeline::new(&c).unwrap();
        let data = pipe.prepare_all(&frames(&c)).unwrap();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| pipe.train(&data, |_, _| Ok(())).unwrap())
        };
        let (a, b) = (run(1), run(3));
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 4);
        for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn stereo_needs_right_image() {
        let c = tiny_cfg(ModelKind::Stereo);
        let pipe = Pipeline::new(&c).unwrap();
        let mut f = frames(&c).remove(0);
        f.right = None;
        assert!(matches!(pipe.prepare(&f), Err(Error::Data(_))));
    }

    #[test]
    fn evaluation_pools_frames() {
        let c = tiny_cfg(ModelKind::Mono);
        let pipe = Pipeline::new(&c).unwrap();
        let data = pipe.prepare_all(&frames(&c)).unwrap();
        let ev = pipe.evaluate(&pipe.init_params(), &data).unwrap();
        assert_eq!(ev.report.n_valid, 3 * 16 * 16);
        assert_eq!(ev.predictions.len(), 3);
        assert_eq!(ev.profile.rows.len(), 15);
    }

    #[test]
    fn loss_window_means() {
        let log: Vec<StepRecord> =
            (0..20).map(|s| StepRecord { step: s, epoch: 0, loss: s as f64, lr: 0.0 }).collect();
        assert_eq!(loss_windows(&log, 0.1), Some((0.5, 18.5)));
        let csv = log_to_csv(&log[..2]).unwrap();
        assert_eq!(csv, "step,epoch,loss,lr\n0,0,0.0,0.0\n1,0,1.0,0.0\n");
    }
}
